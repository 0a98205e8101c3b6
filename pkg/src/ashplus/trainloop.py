"""Alternating dFT / segmenter optimization and the comparison training modes.

Every mode shares one loop. Each iteration samples a source batch and one
style image. For the stylizing modes it generates the stylized batch, steps
the dFT on the adversarial objective (ASH+ only), then steps the segmenter
on segmentation + consistency. An optional source-only warm start precedes
the joint iterations.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .config import TrainConfig
from .dft import DualFeatureTransform, hallucinate, uniform_hallucinate
from .errors import ConfigError
from .metrics import DomainResult, avg_miou, evaluate
from .nets import SegNet, collect_tensors, load_checkpoint, load_module, write_checkpoint
from .objectives import ash_plus_loss, consistency_loss, seg_loss

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iter", "seg", "cont", "content", "style_pos", "style_neg", "ash_plus")

SIGMA_GRIDS = {
    "synthia-default": ((0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25)),
    "gta5-default": ((0.1, 0.9), (0.4, 0.6), (0.4, 0.4), (0.5, 0.5),
                     (0.6, 0.4), (0.7, 0.3), (0.75, 1.5), (0.25, 0.5)),
}

# cumulative toggles, in table order
ABLATION_ROWS = (
    ("baseline", dict(enable_stylization=False, enable_orthogonal_noise=False,
                      enable_adversarial=False, enable_alpha=False)),
    ("stylization", dict(enable_stylization=True, enable_orthogonal_noise=False,
                         enable_adversarial=False, enable_alpha=False)),
    ("orthogonal_noise", dict(enable_stylization=True, enable_orthogonal_noise=True,
                              enable_adversarial=False, enable_alpha=False)),
    ("ash", dict(enable_stylization=True, enable_orthogonal_noise=True,
                 enable_adversarial=True, enable_alpha=False)),
    ("ash_plus", dict(enable_stylization=True, enable_orthogonal_noise=True,
                      enable_adversarial=True, enable_alpha=True)),
)

Hook = Callable[[str, int], None]


@dataclass
class RunRecord:
    mode: str
    config: TrainConfig
    losses: list = field(default_factory=list)
    results: list = field(default_factory=list)  # DomainResult per evaluation domain
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    wall_clock: float = 0.0
    segmenter: Optional[SegNet] = None
    dft: Optional[DualFeatureTransform] = None

    @property
    def target_mious(self) -> list:
        return [r.miou for r in self.results if r.name != "source"]

    @property
    def avg_target_miou(self) -> float:
        vals = self.target_mious
        return avg_miou(vals) if vals else float("nan")

    def result(self, name: str) -> DomainResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled, warn_only=False)
    # NaN-filling fresh buffers costs ~7% per step and buys nothing on CPU
    torch.utils.deterministic.fill_uninitialized_memory = False


def noise_seed(run_seed: int, iteration: int) -> int:
    return (int(run_seed) * 1_000_003 + int(iteration)) % (2 ** 63)


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Temporarily stop gradients from accumulating in ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _optimizer(kind: str, params, lr: float, momentum: float):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=momentum)


def _row(iteration: int, **values) -> dict:
    row = {c: None for c in LOSS_COLUMNS}
    row["iter"] = iteration
    for k, v in values.items():
        row[k] = None if v is None else float(v)
    return row


def write_metrics_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else (row[c] if c == "iter" else repr(row[c]))
                             for c in LOSS_COLUMNS])
    return path


def read_metrics_csv(path) -> list:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({c: (int(rec[c]) if c == "iter" else (float(rec[c]) if rec[c] else None))
                         for c in LOSS_COLUMNS})
    return rows


def _run(mode: str, source_ds, style_pool, cfg: TrainConfig, autoencoder=None, eval_domains=(),
         out_dir=None, hooks: Sequence[Hook] = (), init_segmenter: Optional[SegNet] = None) -> RunRecord:
    cfg.validate()
    if source_ds.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {source_ds.num_classes} classes, config says {cfg.num_classes}")
    stylizing = mode in ("ashplus", "uniform") and cfg.enable_stylization
    if stylizing and (autoencoder is None or style_pool is None or len(style_pool) == 0):
        raise ConfigError(f"{mode} training needs a pretrained autoencoder and a non-empty style pool")
    set_determinism(cfg.deterministic)
    started = time.perf_counter()
    torch.manual_seed(cfg.seed)

    segmenter = SegNet(cfg.num_classes)
    if init_segmenter is not None:
        segmenter.load_state_dict(init_segmenter.state_dict())
    segmenter.train()
    opt_g = _optimizer(cfg.optimizer_g, segmenter.parameters(), cfg.lr_g, cfg.momentum)

    encoder = decoder = dft = opt_dft = None
    if stylizing:
        encoder, decoder = autoencoder
        if mode == "ashplus" and cfg.enable_adversarial:
            dft = DualFeatureTransform(cfg.num_classes, encoder.channels[-1], cfg.embed_dim,
                                       cfg.alpha_max, cfg.hard_onehot)
            opt_dft = _optimizer(cfg.optimizer_dft, dft.parameters(), cfg.lr_dft, cfg.momentum)

    images = source_ds.image_tensor()
    labels = source_ds.label_tensor()
    gen = torch.Generator().manual_seed(cfg.seed)

    def emit(event: str, iteration: int) -> None:
        for hook in hooks:
            hook(event, iteration)

    warmup = cfg.warmup_iters
    total = warmup + cfg.iter_num
    rows = []
    for it in range(total):
        idx = torch.randint(len(images), (cfg.batch_size,), generator=gen)
        X_s, Y_s = images[idx], labels[idx]
        style_idx = torch.randint(len(style_pool), (1,), generator=gen) if stylizing else None
        joint = stylizing and it >= warmup

        if not joint:
            seg = seg_loss(segmenter(X_s), Y_s)
            opt_g.zero_grad()
            seg.backward()
            opt_g.step()
            emit("g_step", it)
            rows.append(_row(it, seg=seg.item()))
            continue

        X_style = style_pool[style_idx]
        breakdown = None
        if mode == "ashplus":
            X_sty, inter = hallucinate(X_s, X_style, segmenter, encoder, decoder, dft, cfg,
                                       seed=noise_seed(cfg.seed, it))
            emit("hallucinate", it)
            if dft is not None:
                with frozen(segmenter):
                    breakdown = ash_plus_loss(segmenter, encoder, X_s, X_style, X_sty, inter,
                                              p_src=inter.probs)
                opt_dft.zero_grad()
                breakdown.ash_plus.backward()
                opt_dft.step()
                emit("dft_step", it)
            X_sty = X_sty.detach()
        else:
            with torch.no_grad():
                X_sty = uniform_hallucinate(X_s, X_style, encoder, decoder, cfg.uniform_w)
            emit("hallucinate", it)

        logits_s = segmenter(X_s)
        logits_sty = segmenter(X_sty)
        seg = seg_loss(logits_s, Y_s)
        if cfg.seg_on_stylized:
            seg = seg + seg_loss(logits_sty, Y_s)
        cont = consistency_loss(torch.softmax(logits_sty, dim=1), torch.softmax(logits_s, dim=1))
        loss = cfg.seg_weight * seg + cfg.cont_weight * cont
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        emit("g_step", it)
        if breakdown is not None:
            rows.append(_row(it, seg=seg.item(), cont=breakdown.cont.item(), content=breakdown.content.item(),
                             style_pos=breakdown.style_pos.item(), style_neg=breakdown.style_neg.item(),
                             ash_plus=breakdown.ash_plus.item()))
        else:
            rows.append(_row(it, seg=seg.item(), cont=cont.item()))
        if it % 250 == 0:
            log.info("%s iter %d: seg %.4f cont %.4f", mode, it, seg.item(), cont.item())

    segmenter.eval()
    record = RunRecord(mode, cfg, rows, segmenter=segmenter, dft=dft)
    record.results = [evaluate(segmenter, ds) for ds in eval_domains]
    record.wall_clock = time.perf_counter() - started
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.metrics_path = write_metrics_csv(out / "metrics.csv", rows)
        modules = {"segmenter": segmenter, "dft": dft}
        if stylizing:
            modules.update(encoder=encoder, decoder=decoder)
        record.checkpoint_path = write_checkpoint(
            out / "checkpoint.bin", collect_tensors(modules), cfg.to_dict(), total,
            {"mode": mode, "final_miou": {r.name: r.miou for r in record.results},
             "encoder_channels": list(encoder.channels) if stylizing else None})
    return record


def train_ashplus(source_ds, style_pool, cfg: TrainConfig, autoencoder, **kwargs) -> RunRecord:
    """Adversarial semantic hallucination training; toggles off fall back to the ablation variants."""
    if not cfg.enable_stylization:
        return _run("source", source_ds, style_pool, cfg, autoencoder, **kwargs)
    return _run("ashplus", source_ds, style_pool, cfg, autoencoder, **kwargs)


def train_source_only(source_ds, cfg: TrainConfig, **kwargs) -> RunRecord:
    """Segmentation loss only, for ``warmup_iters + iter_num`` steps (same number of segmenter updates)."""
    return _run("source", source_ds, None, cfg, None, **kwargs)


def train_uniform(source_ds, style_pool, cfg: TrainConfig, autoencoder, **kwargs) -> RunRecord:
    """Fixed-strength stylization at ``cfg.uniform_w`` with no dFT."""
    return _run("uniform", source_ds, style_pool, cfg.replace(enable_stylization=True), autoencoder, **kwargs)


def load_segmenter(checkpoint_path, num_classes: Optional[int] = None) -> SegNet:
    state = load_checkpoint(checkpoint_path)
    k = num_classes or int(state.config.get("num_classes", 8))
    return load_module(SegNet(k), state, "segmenter").eval()


@dataclass
class AblationRow:
    name: str
    toggles: dict
    record: RunRecord

    @property
    def avg_target_miou(self) -> float:
        return self.record.avg_target_miou


def ablation_suite(source_ds, style_pool, base_cfg: TrainConfig, autoencoder, eval_domains=(),
                   out_dir=None) -> list:
    rows = []
    for name, toggles in ABLATION_ROWS:
        cfg = base_cfg.replace(**toggles)
        sub = None if out_dir is None else Path(out_dir) / name
        record = train_ashplus(source_ds, style_pool, cfg, autoencoder, eval_domains=eval_domains, out_dir=sub)
        log.info("ablation %s: avg target mIoU %.4f", name, record.avg_target_miou)
        rows.append(AblationRow(name, toggles, record))
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / "ablation.csv", rows)
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> Path:
    toggle_names = [k for k in ABLATION_ROWS[-1][1]]
    domains = [r.name for r in rows[0].record.results] if rows else []
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", *toggle_names, *[f"miou_{d}" for d in domains], "avg_target_miou"])
        for row in rows:
            writer.writerow([row.name, *[int(row.toggles[t]) for t in toggle_names],
                             *[repr(r.miou) for r in row.record.results], repr(row.avg_target_miou)])
    return Path(path)


def sigma_sweep(source_ds, style_pool, grid, base_cfg: TrainConfig, autoencoder, eval_domains=(),
                out_dir=None, csv_path=None) -> list:
    """Train and evaluate once per (sigma1, sigma2); returns dict rows and optionally writes a CSV."""
    if isinstance(grid, str):
        if grid not in SIGMA_GRIDS:
            raise ConfigError(f"unknown sigma grid {grid!r}; choose from {sorted(SIGMA_GRIDS)}")
        grid = SIGMA_GRIDS[grid]
    rows = []
    for s1, s2 in grid:
        cfg = base_cfg.replace(sigma1=float(s1), sigma2=float(s2))
        sub = None if out_dir is None else Path(out_dir) / f"s1_{s1:g}_s2_{s2:g}"
        record = train_ashplus(source_ds, style_pool, cfg, autoencoder, eval_domains=eval_domains, out_dir=sub)
        row = {"sigma1": float(s1), "sigma2": float(s2)}
        for r in record.results:
            if r.name != "source":
                row[f"miou_{r.name}"] = r.miou
        row["avg"] = record.avg_target_miou
        rows.append(row)
    if csv_path is not None:
        write_rows_csv(csv_path, rows)
    return rows


def write_rows_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    header = list(rows[0]) if rows else ["sigma1", "sigma2", "avg"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(row[h]) if isinstance(row[h], float) else row[h] for h in header])
    return path
