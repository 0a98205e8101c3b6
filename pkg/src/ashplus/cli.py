"""Command-line entry point: ``ashplus <command> [flags]``.

Every command writes ``resolved.cfg`` (loadable again through ``--config``)
and ``manifest.txt`` under ``--out``. Exit codes: 0 success, 2 usage,
3 configuration, 4 ingestion, 5 runtime.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import experiment as xp
from .config import TrainConfig, parse_kv_text
from .errors import AshPlusError, CheckpointError, ConfigError, IngestionError
from .synthdata import DEFAULT_CLASS_NAMES, DomainSpec

log = logging.getLogger("ashplus")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_INGEST, EXIT_RUNTIME = 0, 2, 3, 4, 5

# keys a config file may carry besides TrainConfig and WorldSettings fields
RUN_KEYS = ("command", "data", "style_pool", "autoencoder", "checkpoint", "grid", "spec",
            "n_pixels", "n_images")
NORMALIZATION_NOTE = "score = sum|X_stylized - X_s| / count of pixels predicted as the class before masking"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# resolution of flags + config file
# ---------------------------------------------------------------------------

class Resolved:
    def __init__(self, command: str, cfg: TrainConfig, world: xp.WorldSettings, run: dict):
        self.command, self.cfg, self.world, self.run = command, cfg, world, run

    def to_text(self) -> str:
        lines = [f"# ashplus {self.command}: resolved configuration", "# [train]"]
        lines.append(self.cfg.to_text().rstrip("\n"))
        lines.append("# [world]")
        lines.append(self.world.to_text().rstrip("\n"))
        lines.append("# [run]")
        lines.append(f"command={self.command}")
        for key in RUN_KEYS[1:]:
            if self.run.get(key) is not None:
                lines.append(f"{key}={self.run[key]}")
        return "\n".join(lines) + "\n"


def _resolve(args) -> Resolved:
    file_values = {}
    if args.config:
        try:
            file_values = parse_kv_text(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    train_keys = set(TrainConfig().to_dict())
    unknown = set(file_values) - train_keys - xp.WorldSettings.keys() - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig.from_dict({k: v for k, v in file_values.items() if k in train_keys})
    world = xp.WorldSettings.from_dict({k: v for k, v in file_values.items() if k in xp.WorldSettings.keys()})
    run = {k: file_values[k] for k in RUN_KEYS[1:] if k in file_values}

    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.deterministic:
        cfg = cfg.replace(deterministic=True)
    for key in ("data", "style_pool", "autoencoder", "checkpoint", "grid", "spec", "n_pixels", "n_images"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    if getattr(args, "w", None) is not None:
        cfg = cfg.replace(uniform_w=args.w)
    cfg.validate()
    return Resolved(args.command, cfg, world, run)


def _setup_runtime(args, cfg: TrainConfig) -> None:
    if args.device == "accel":
        raise ConfigError("accelerator execution is not available in this build; use --device cpu")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    if cfg.deterministic and args.workers > 1:
        log.warning("deterministic mode runs single-threaded; ignoring --workers %d", args.workers)
    elif not cfg.deterministic:
        torch.set_num_threads(args.workers)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _world(res: Resolved, need_style: bool) -> xp.World:
    if res.run.get("data"):
        world = xp.load_world(res.run["data"], res.run.get("style_pool"))
    else:
        world = xp.build_world(res.world, res.cfg.image_size)
        if res.run.get("style_pool"):
            world.style_pool = xp.load_style_pool(res.run["style_pool"])
    if need_style and world.style_pool is None:
        raise ConfigError("this command needs a style pool: pass --style-pool DIR or a --data dir with style/")
    if world.train.num_classes != res.cfg.num_classes:
        raise ConfigError(f"data has {world.train.num_classes} classes, config says {res.cfg.num_classes}")
    return world


def _autoencoder(res: Resolved, world: xp.World, out: Path):
    if res.run.get("autoencoder"):
        return _load_or_ingest(xp.load_autoencoder, res.run["autoencoder"])
    log.info("no --autoencoder given; pretraining one (%d epochs)", res.world.ae_epochs)
    ae = xp.pretrain_world_autoencoder(world, res.world)
    path = xp.save_autoencoder(out / "autoencoder.bin", ae)
    res.run["autoencoder"] = str(path)
    return ae


def _load_or_ingest(loader, path):
    if not Path(path).exists():
        raise IngestionError(f"file not found: {path}")
    try:
        return loader(path)
    except CheckpointError as exc:
        raise IngestionError(str(exc)) from exc


def _write_manifest(out: Path) -> Path:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt")
    path = out / "manifest.txt"
    path.write_text("".join(f + "\n" for f in files))
    return path


def _echo(res: Resolved, out: Path) -> None:
    text = res.to_text()
    (out / "resolved.cfg").write_text(text)
    sys.stdout.write(text)


def _eval_outputs(record, out: Path) -> None:
    from .metrics import summarize, write_eval_report

    if record.results:
        write_eval_report(out / "eval.csv", record.results, DEFAULT_CLASS_NAMES[:record.config.num_classes])
        summary = summarize(record.results)
        (out / "summary.txt").write_text(summary + "\n")
        print(summary)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, res: Resolved) -> None:
    out = _out_dir(args)
    spec = None
    if res.run.get("spec") and res.run["spec"] != "default":
        try:
            spec = DomainSpec.from_dict(json.loads(Path(res.run["spec"]).read_text()))
        except OSError as exc:
            raise IngestionError(f"cannot read spec {res.run['spec']}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed spec file {res.run['spec']}: {exc}") from exc
        spec.validate()
    res.run.setdefault("spec", "default")
    _echo(res, out)
    world = xp.build_world(res.world, res.cfg.image_size, spec)
    xp.save_world(world, out)
    log.info("wrote %d training pairs and %d evaluation domains to %s", len(world.train),
             len(world.eval_domains), out)


def cmd_pretrain_ae(args, res: Resolved) -> None:
    out = _out_dir(args)
    world = _world(res, need_style=True)
    ae = xp.pretrain_world_autoencoder(world, res.world)
    path = xp.save_autoencoder(out / "autoencoder.bin", ae)
    res.run["autoencoder"] = str(path)
    _echo(res, out)
    if world.source_eval is not None:
        mae = xp.heldout_mae(ae, world)
        (out / "autoencoder.txt").write_text(f"heldout_mae={mae!r}\n")
        print(f"held-out reconstruction MAE: {mae:.4f}")


def _train(args, res: Resolved, mode: str) -> None:
    from .trainloop import train_ashplus, train_source_only, train_uniform

    out = _out_dir(args)
    world = _world(res, need_style=mode != "source")
    ae = _autoencoder(res, world, out) if mode != "source" else None
    _echo(res, out)
    kwargs = dict(eval_domains=world.eval_domains, out_dir=out)
    if mode == "source":
        record = train_source_only(world.train, res.cfg, **kwargs)
    elif mode == "uniform":
        record = train_uniform(world.train, world.style_pool, res.cfg, ae, **kwargs)
    else:
        record = train_ashplus(world.train, world.style_pool, res.cfg, ae, **kwargs)
    _eval_outputs(record, out)


def cmd_ablate(args, res: Resolved) -> None:
    from .trainloop import ablation_suite

    out = _out_dir(args)
    world = _world(res, need_style=True)
    ae = _autoencoder(res, world, out)
    _echo(res, out)
    rows = ablation_suite(world.train, world.style_pool, res.cfg, ae, world.eval_domains, out)
    for row in rows:
        _eval_outputs(row.record, out / row.name)
    print((out / "ablation.csv").read_text(), end="")


def cmd_sweep_sigma(args, res: Resolved) -> None:
    from .trainloop import SIGMA_GRIDS, sigma_sweep

    out = _out_dir(args)
    grid = res.run.setdefault("grid", "synthia-default")
    if grid not in SIGMA_GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; choose from {sorted(SIGMA_GRIDS)}")
    world = _world(res, need_style=True)
    ae = _autoencoder(res, world, out)
    _echo(res, out)
    sigma_sweep(world.train, world.style_pool, grid, res.cfg, ae, world.eval_domains, out, out / "sweep.csv")
    print((out / "sweep.csv").read_text(), end="")


def _checkpoint(res: Resolved):
    from .nets import load_checkpoint

    path = res.run.get("checkpoint")
    if not path:
        raise UsageError(f"{res.command}: --checkpoint PATH is required")
    return _load_or_ingest(load_checkpoint, path)


def _segmenter(state, num_classes):
    from .nets import SegNet, load_module

    return load_module(SegNet(num_classes), state, "segmenter").eval()


def cmd_eval(args, res: Resolved) -> None:
    from .metrics import evaluate, summarize, write_eval_report

    out = _out_dir(args)
    state = _checkpoint(res)
    world = _world(res, need_style=False)
    _echo(res, out)
    segmenter = _segmenter(state, res.cfg.num_classes)
    domains = world.eval_domains or [world.train]
    results = [evaluate(segmenter, ds) for ds in domains]
    write_eval_report(out / "eval.csv", results, DEFAULT_CLASS_NAMES[:res.cfg.num_classes])
    summary = summarize(results)
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)


def cmd_analyze_classwise(args, res: Resolved) -> None:
    from .dft import DualFeatureTransform
    from .metrics import classwise_style_diff
    from .nets import Decoder, Encoder, freeze, load_module

    out = _out_dir(args)
    state = _checkpoint(res)
    for prefix in ("dft", "encoder", "decoder"):
        if not state.has_module(prefix):
            raise IngestionError(f"{res.run['checkpoint']}: no {prefix} weights (train with train-ashplus)")
    cfg = TrainConfig.from_dict(state.config) if state.config else res.cfg
    world = _world(res, need_style=False)
    _echo(res, out)
    segmenter = _segmenter(state, cfg.num_classes)
    channels = tuple(state.meta.get("encoder_channels") or (16, 32, 64))
    encoder = freeze(load_module(Encoder(channels), state, "encoder"))
    decoder = freeze(load_module(Decoder(channels), state, "decoder"))
    dft = load_module(DualFeatureTransform(cfg.num_classes, channels[-1], cfg.embed_dim, cfg.alpha_max,
                                           cfg.hard_onehot), state, "dft").eval()
    ds = world.source_eval or world.train
    n = int(res.run.get("n_images") or 8)
    X = ds.image_tensor()[:n]
    style = world.style_pool[:1] if world.style_pool is not None else None
    maps, rows = [], []
    for k in range(cfg.num_classes):
        r = classwise_style_diff(X, k, segmenter, dft, encoder, decoder, cfg, seed=cfg.seed, X_style=style)
        maps.append(r.diff_map[0].mean(dim=0).numpy())
        rows.append((k, DEFAULT_CLASS_NAMES[k] if k < len(DEFAULT_CLASS_NAMES) else f"class{k}",
                     r.predicted_pixels, "" if r.absent else repr(r.score)))
    np.save(out / "classwise_maps.npy", np.stack(maps))
    np.save(out / "classwise_input.npy", X[0].permute(1, 2, 0).numpy())
    with (out / "classwise.csv").open("w", newline="") as fh:
        fh.write(f"# {NORMALIZATION_NOTE}\n")
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "predicted_pixels", "score"])
        writer.writerows(rows)
    print((out / "classwise.csv").read_text(), end="")


def cmd_dump_features(args, res: Resolved) -> None:
    from .metrics import dump_features

    out = _out_dir(args)
    state = _checkpoint(res)
    world = _world(res, need_style=False)
    res.run.setdefault("n_pixels", 10000)
    res.run.setdefault("n_images", 40)
    _echo(res, out)
    segmenter = _segmenter(state, res.cfg.num_classes)
    ds = world.source_eval or world.train
    X, _ = dump_features(segmenter, ds, int(res.run["n_pixels"]), seed=res.cfg.seed,
                         n_images=int(res.run["n_images"]), path=out / "features.csv")
    print(f"wrote {len(X)} feature rows of width {X.shape[1]} to {out / 'features.csv'}")


def cmd_report(args, res: Resolved) -> None:
    from .report import build_report

    out = _out_dir(args)
    _echo(res, out)
    summary = build_report([Path(p) for p in args.runs], out)
    print(summary, end="")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic world (train split, evaluation suite, style pool)"),
    "pretrain-ae": (cmd_pretrain_ae, "pretrain and freeze the encoder/decoder pair"),
    "train-source": (lambda a, r: _train(a, r, "source"), "source-only baseline"),
    "train-uniform": (lambda a, r: _train(a, r, "uniform"), "fixed-strength stylization baseline"),
    "train-ashplus": (lambda a, r: _train(a, r, "ashplus"), "adversarial semantic hallucination training"),
    "ablate": (cmd_ablate, "run the five cumulative ablation rows"),
    "sweep-sigma": (cmd_sweep_sigma, "train once per (sigma1, sigma2) grid point"),
    "eval": (cmd_eval, "evaluate a checkpoint on the evaluation suite"),
    "analyze-classwise": (cmd_analyze_classwise, "per-class stylization difference analysis"),
    "dump-features": (cmd_dump_features, "sample penultimate features with labels to CSV"),
    "report": (cmd_report, "plots and a markdown summary over run directories"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file (training, world and run keys)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="directory from gen-data, or a single dataset directory")
    common.add_argument("--style-pool", dest="style_pool", help="directory of style PNG images")
    common.add_argument("--device", choices=("cpu", "accel"), default="cpu")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--deterministic", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ashplus", description="Adversarial semantic hallucination at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "gen-data":
            p.add_argument("--spec", help="'default' or a JSON domain spec file")
        if name in ("train-source", "train-uniform", "train-ashplus", "ablate", "sweep-sigma"):
            if name != "train-source":
                p.add_argument("--autoencoder", help="checkpoint from pretrain-ae (pretrained on the fly if absent)")
        if name == "train-uniform":
            p.add_argument("--w", type=float, help="content weight: near 1 weak, near 0 strong")
        if name == "sweep-sigma":
            p.add_argument("--grid", help="synthia-default or gta5-default")
        if name in ("eval", "analyze-classwise", "dump-features"):
            p.add_argument("--checkpoint")
        if name in ("analyze-classwise", "dump-features"):
            p.add_argument("--n-images", dest="n_images", type=int)
        if name == "dump-features":
            p.add_argument("--n-pixels", dest="n_pixels", type=int)
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        res = _resolve(args)
        _setup_runtime(args, res.cfg)
        COMMANDS[args.command][0](args, res)
        if args.out:
            _write_manifest(Path(args.out))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, CheckpointError) as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except (AshPlusError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
