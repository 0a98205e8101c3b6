"""Static figures and a markdown summary over finished run directories."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IngestionError  # noqa: E402

_PNG_META = {"Software": None}


@dataclass
class RunSummary:
    label: str
    path: Path
    losses: Optional[dict] = None  # column -> (iters, values)
    mious: dict = field(default_factory=dict)  # domain -> mIoU
    classwise: Optional[tuple] = None  # (input image, per-class maps, class names)

    @property
    def source_miou(self) -> float:
        return self.mious.get("source", float("nan"))

    @property
    def avg_target_miou(self) -> float:
        vals = [v for k, v in self.mious.items() if k != "source"]
        return float(np.mean(vals)) if vals else float("nan")


def _read_losses(path: Path) -> dict:
    cols = {}
    with path.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            it = int(rec["iter"])
            for key, value in rec.items():
                if key != "iter" and value:
                    cols.setdefault(key, ([], []))
                    cols[key][0].append(it)
                    cols[key][1].append(float(value))
    return cols


def _read_eval(path: Path) -> dict:
    with path.open(newline="") as fh:
        return {rec["domain"]: float(rec["miou"]) if rec["miou"] else float("nan") for rec in csv.DictReader(fh)}


def _read_classwise(run: Path):
    maps = np.load(run / "classwise_maps.npy")
    image = np.load(run / "classwise_input.npy") if (run / "classwise_input.npy").is_file() else None
    names = [f"class {k}" for k in range(len(maps))]
    if (run / "classwise.csv").is_file():
        lines = [ln for ln in (run / "classwise.csv").read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        names = [f"{r['class_name']} ({float(r['score']):.3g})" if r["score"] else f"{r['class_name']} (absent)"
                 for r in rows]
    return image, maps, names


def load_run(path: Path, label: Optional[str] = None) -> RunSummary:
    if not path.is_dir():
        raise IngestionError(f"run directory not found: {path}")
    summary = RunSummary(label or path.name, path)
    if (path / "metrics.csv").is_file():
        summary.losses = _read_losses(path / "metrics.csv")
    if (path / "eval.csv").is_file():
        summary.mious = _read_eval(path / "eval.csv")
    if (path / "classwise_maps.npy").is_file():
        summary.classwise = _read_classwise(path)
    if summary.losses is None and not summary.mious and summary.classwise is None:
        raise IngestionError(f"{path}: no metrics.csv, eval.csv or classwise_maps.npy to report on")
    return summary


def _labels(paths: Sequence[Path]) -> list:
    names = [p.name for p in paths]
    if len(set(names)) == len(names):
        return names
    return [f"{p.parent.name}/{p.name}" for p in paths]


def _moving_average(values, width: int = 25) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < width:
        return values
    kernel = np.ones(width) / width
    return np.convolve(values, kernel, mode="valid")


def plot_losses(runs: Sequence[RunSummary], path: Path) -> Path:
    columns = ["seg", "cont", "ash_plus"]
    fig, axes = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3.2))
    for ax, col in zip(axes, columns):
        for run in runs:
            if run.losses and col in run.losses:
                iters, values = run.losses[col]
                smooth = _moving_average(values)
                ax.plot(iters[len(iters) - len(smooth):], smooth, label=run.label, linewidth=1)
        ax.set_title(col)
        ax.set_xlabel("iteration")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_miou_bars(runs: Sequence[RunSummary], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 * len(runs) + 2, 3.2))
    values = [100 * (r.avg_target_miou if not np.isnan(r.avg_target_miou) else r.source_miou) for r in runs]
    bars = ax.bar(range(len(runs)), values, color="tab:blue")
    ax.bar_label(bars, fmt="%.1f", fontsize=8)
    ax.set_xticks(range(len(runs)), [r.label for r in runs], rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("avg target mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_domain_bars(runs: Sequence[RunSummary], path: Path) -> Path:
    domains = sorted({d for r in runs for d in r.mious}, key=lambda d: (d != "source", d))
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(domains) * len(runs)), 3.2))
    width = 0.8 / max(len(runs), 1)
    for i, run in enumerate(runs):
        ys = [100 * run.mious.get(d, np.nan) for d in domains]
        ax.bar(np.arange(len(domains)) + i * width, ys, width, label=run.label)
    ax.set_xticks(np.arange(len(domains)) + 0.4 - width / 2, domains, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mIoU (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_classwise(run: RunSummary, path: Path) -> Path:
    image, maps, names = run.classwise
    panels = len(maps) + (image is not None)
    fig, axes = plt.subplots(1, panels, figsize=(1.8 * panels, 2.2))
    axes = np.atleast_1d(axes)
    offset = 0
    if image is not None:
        axes[0].imshow(np.clip(image, 0, 1))
        axes[0].set_title("input", fontsize=7)
        offset = 1
    vmax = float(maps.max()) or 1.0
    for ax, m, name in zip(axes[offset:], maps, names):
        ax.imshow(m, cmap="magma", vmin=0, vmax=vmax)
        ax.set_title(name, fontsize=6)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _fmt(v: float) -> str:
    return "n/a" if np.isnan(v) else f"{100 * v:.2f}"


def summary_markdown(runs: Sequence[RunSummary], figures: Sequence[Path]) -> str:
    runs = [r for r in runs if r.mious]
    lines = ["# Run report", "", "| run | source mIoU | avg target mIoU |", "|---|---|---|"]
    for r in runs:
        lines.append(f"| {r.label} | {_fmt(r.source_miou)} | {_fmt(r.avg_target_miou)} |")
    domains = sorted({d for r in runs for d in r.mious if d != "source"})
    if domains:
        lines += ["", "| run | " + " | ".join(domains) + " |", "|---|" + "---|" * len(domains)]
        for r in runs:
            lines.append(f"| {r.label} | " + " | ".join(_fmt(r.mious.get(d, np.nan)) for d in domains) + " |")
    lines += ["", "Figures:"] + [f"- {p.name}" for p in figures]
    return "\n".join(lines) + "\n"


def build_report(run_dirs: Sequence[Path], out: Path) -> str:
    """Write figures plus ``summary.md`` into ``out`` and return the markdown text."""
    run_dirs = [Path(p) for p in run_dirs]
    runs = [load_run(p, label) for p, label in zip(run_dirs, _labels(run_dirs))]
    out.mkdir(parents=True, exist_ok=True)
    figures = []
    if any(r.losses for r in runs):
        figures.append(plot_losses(runs, out / "loss_curves.png"))
    scored = [r for r in runs if r.mious]
    if scored:
        figures.append(plot_miou_bars(scored, out / "miou_bars.png"))
        figures.append(plot_domain_bars(scored, out / "miou_domains.png"))
    for r in runs:
        if r.classwise is not None:
            figures.append(plot_classwise(r, out / f"classwise_{r.label.replace('/', '_')}.png"))
    text = summary_markdown(runs, figures)
    (out / "summary.md").write_text(text)
    return text
