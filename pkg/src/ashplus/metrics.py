"""Segmentation metrics and post-training analyses."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import ShapeError
from .objectives import IGNORE_INDEX


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, prediction, truth, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Add joint (truth, prediction) pixel counts into ``cm`` in place and return it.

    Rows index ground truth, columns index prediction; ignored pixels are skipped.
    """
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ShapeError(f"prediction {prediction.shape} vs truth {truth.shape}")
    k = cm.shape[0]
    keep = truth != ignore_index
    t = truth[keep].astype(np.int64)
    p = prediction[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
        raise ShapeError(f"class ids out of range for a {k}-class confusion matrix")
    cm += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


def iou_per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(iou, present)``; classes with an empty union get NaN and ``present=False``."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return iou, present


def miou(cm: np.ndarray) -> float:
    iou, present = iou_per_class(cm)
    if not present.any():
        return float("nan")
    return float(iou[present].mean())


def avg_miou(per_domain: Sequence[float]) -> float:
    values = [float(v) for v in per_domain]
    if not values:
        raise ValueError("avg_miou of an empty list")
    return sum(values) / len(values)


def rel_diff(ours: float, theirs: float) -> float:
    """Improvement of ``ours`` over ``theirs`` as a percentage of ``ours``."""
    return 100.0 * (ours - theirs) / ours


@torch.no_grad()
def predict(segmenter, images: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        preds.append(segmenter(images[start:start + batch_size]).argmax(dim=1).cpu().numpy())
    return np.concatenate(preds, axis=0)


@dataclass
class DomainResult:
    name: str
    confusion: np.ndarray

    @property
    def miou(self) -> float:
        return miou(self.confusion)

    @property
    def iou(self) -> np.ndarray:
        return iou_per_class(self.confusion)[0]


def evaluate(segmenter, dataset, batch_size: int = 32) -> DomainResult:
    was_training = segmenter.training
    segmenter.eval()
    cm = new_confusion(dataset.num_classes)
    images = dataset.image_tensor()
    accumulate(cm, predict(segmenter, images, batch_size), dataset.labels)
    segmenter.train(was_training)
    return DomainResult(dataset.name, cm)


def write_eval_report(path, results: Iterable[DomainResult], class_names: Optional[Sequence[str]] = None) -> Path:
    results = list(results)
    k = results[0].confusion.shape[0] if results else 0
    names = list(class_names) if class_names else [f"class{i}" for i in range(k)]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", *[f"iou_{n}" for n in names], "miou"])
        for r in results:
            writer.writerow([r.name, *[_fmt(v) for v in r.iou], _fmt(r.miou)])
    return path


def summarize(results: Sequence[DomainResult], class_names: Optional[Sequence[str]] = None) -> str:
    lines = [f"{'domain':<16} mIoU"]
    for r in results:
        lines.append(f"{r.name:<16} {100 * r.miou:6.2f}")
    if results:
        lines.append(f"{'average':<16} {100 * avg_miou([r.miou for r in results]):6.2f}")
    return "\n".join(lines)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


@dataclass
class ClasswiseDiff:
    class_id: int
    diff_map: torch.Tensor  # |X_stylized - X_s|, (B, 3, H, W)
    predicted_pixels: int
    score: Optional[float]  # diff sum / predicted pixels; None when the class is never predicted

    @property
    def absent(self) -> bool:
        return self.score is None


@torch.no_grad()
def classwise_style_diff(X_s: torch.Tensor, class_k: int, segmenter, dft, encoder, decoder, cfg,
                         seed: int = 0, X_style: Optional[torch.Tensor] = None) -> ClasswiseDiff:
    """Stylize with every probability channel except ``class_k`` zeroed.

    The normalizing pixel count is taken from the unmasked argmax prediction.
    Without ``X_style`` the source batch serves as its own style input.
    """
    from .dft import hallucinate

    probs = torch.softmax(segmenter(X_s), dim=1)
    predicted = int((probs.argmax(dim=1) == class_k).sum())
    masked = torch.zeros_like(probs)
    masked[:, class_k] = probs[:, class_k]
    X_stylized, _ = hallucinate(X_s, X_s if X_style is None else X_style, segmenter, encoder,
                                decoder, dft, cfg, seed=seed, probs=masked)
    diff = (X_stylized - X_s).abs()
    score = float(diff.sum()) / predicted if predicted > 0 else None
    return ClasswiseDiff(class_k, diff, predicted, score)


@torch.no_grad()
def dump_features(segmenter, dataset, n_pixels: int, seed: int = 0, n_images: Optional[int] = None,
                  path=None) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly sample penultimate feature vectors with their ground-truth class.

    Features are bilinearly upsampled to label resolution; ignored pixels are never drawn.
    """
    rng = np.random.default_rng(seed)
    n_total = len(dataset)
    chosen = np.sort(rng.choice(n_total, size=min(n_images or n_total, n_total), replace=False))
    images = dataset.image_tensor()[torch.from_numpy(chosen)]
    labels = dataset.labels[chosen]
    feats = segmenter.features(images)
    feats = torch.nn.functional.interpolate(feats, size=labels.shape[-2:], mode="bilinear",
                                            align_corners=False)
    feats = feats.permute(0, 2, 3, 1).reshape(-1, feats.shape[1]).numpy()
    flat_labels = labels.reshape(-1)
    candidates = np.flatnonzero(flat_labels != IGNORE_INDEX)
    pick = rng.choice(candidates, size=n_pixels, replace=n_pixels > len(candidates))
    X, y = feats[pick], flat_labels[pick].astype(np.int64)
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{i}" for i in range(X.shape[1])] + ["class_id"])
            for row, cls in zip(X, y):
                writer.writerow([repr(float(v)) for v in row] + [int(cls)])
    return X, y
