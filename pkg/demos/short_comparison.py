"""A shortened version of the desk experiment: four training modes, then a report.

Trains source-only, uniform strong (w=0.1), uniform weak (w=0.8) and the
adversarial semantic hallucination on the default synthetic world with a
reduced schedule, evaluates on the shift suite and renders figures.
About 10 minutes on one CPU core with the defaults below.

    python demos/short_comparison.py --out runs/
"""
import argparse
from pathlib import Path

import torch

from ashplus.config import TrainConfig
from ashplus.experiment import WorldSettings, build_world, pretrain_world_autoencoder, load_autoencoder, \
    save_autoencoder
from ashplus.metrics import write_eval_report
from ashplus.report import build_report
from ashplus.synthdata import DEFAULT_CLASS_NAMES
from ashplus.trainloop import train_ashplus, train_source_only, train_uniform


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--iters", type=int, default=600)
    ap.add_argument("--warmup", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--autoencoder")
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)

    settings = WorldSettings()
    world = build_world(settings)
    if args.autoencoder:
        ae = load_autoencoder(args.autoencoder)
    else:
        print("pretraining the autoencoder ...")
        ae = pretrain_world_autoencoder(world, settings)
        save_autoencoder(out / "autoencoder.bin", ae)

    cfg = TrainConfig(iter_num=args.iters, warmup_iters=args.warmup, seed=args.seed)
    kw = dict(eval_domains=world.eval_domains)
    runs = {
        "source": lambda d: train_source_only(world.train, cfg, out_dir=d, **kw),
        "uniform_strong": lambda d: train_uniform(world.train, world.style_pool, cfg.replace(uniform_w=0.1), ae,
                                                  out_dir=d, **kw),
        "uniform_weak": lambda d: train_uniform(world.train, world.style_pool, cfg.replace(uniform_w=0.8), ae,
                                                out_dir=d, **kw),
        "ashplus": lambda d: train_ashplus(world.train, world.style_pool, cfg, ae, out_dir=d, **kw),
    }
    dirs = []
    for name, fn in runs.items():
        d = out / name
        record = fn(d)
        write_eval_report(d / "eval.csv", record.results, DEFAULT_CLASS_NAMES)
        print(f"{name:15s} avg target mIoU {100 * record.avg_target_miou:6.2f}  ({record.wall_clock:.0f}s)")
        dirs.append(d)
    print(build_report(dirs, out / "report"))


if __name__ == "__main__":
    main()
