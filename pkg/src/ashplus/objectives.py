"""Segmentation, consistency and adversarial stylization objectives."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidLabelError, ShapeError
from .featstats import ChannelStats, channel_stats, content_loss

IGNORE_INDEX = 255
PROB_FLOOR = 1e-8


@dataclass
class LossBreakdown:
    seg: torch.Tensor
    cont: torch.Tensor
    content: torch.Tensor
    style_pos: torch.Tensor
    style_neg: torch.Tensor
    ash_plus: torch.Tensor

    @classmethod
    def compose(cls, cont, content, style_pos, style_neg, seg=None) -> "LossBreakdown":
        ash_plus = -cont + content + style_pos - style_neg
        if seg is None:
            seg = torch.zeros_like(ash_plus)
        return cls(seg, cont, content, style_pos, style_neg, ash_plus)

    def composition_holds(self) -> bool:
        return bool(torch.equal(self.ash_plus, -self.cont + self.content + self.style_pos - self.style_neg))

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def detach(self) -> "LossBreakdown":
        return LossBreakdown(*(getattr(self, f.name).detach() for f in fields(self)))


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Pixel cross-entropy summed over labelled pixels, divided by their count."""
    if logits.dim() != 4 or labels.dim() != 3 or logits.shape[0] != labels.shape[0] \
            or logits.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    labels = labels.long()
    valid = labels != ignore_index
    k = logits.shape[1]
    if ((labels < 0) | ((labels >= k) & valid)).any():
        raise InvalidLabelError(f"label ids must lie in [0, {k}) or equal {ignore_index}")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("every pixel is ignored; segmentation loss set to 0", RuntimeWarning)
        return logits.sum() * 0.0
    total = F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="sum")
    return total / count


def consistency_loss(p_stylized: torch.Tensor, p_src: torch.Tensor) -> torch.Tensor:
    """Mean over pixels (and batch) of KL(p_stylized || p_src) along the class axis."""
    if p_stylized.shape != p_src.shape or p_stylized.dim() != 4:
        raise ShapeError(f"consistency_loss shape mismatch: {tuple(p_stylized.shape)} vs {tuple(p_src.shape)}")
    log_ratio = torch.log(p_stylized.clamp_min(PROB_FLOOR)) - torch.log(p_src.clamp_min(PROB_FLOOR))
    per_pixel = (p_stylized * log_ratio).sum(dim=1)
    return per_pixel.mean()


def _l2(x: torch.Tensor) -> torch.Tensor:
    # per-row Euclidean norm with a zero (not NaN) gradient at the origin
    sq = (x * x).sum(dim=-1)
    safe = torch.sqrt(sq.clamp_min(torch.finfo(sq.dtype).tiny))
    return torch.where(sq > 0, safe, sq)


def style_loss(target_stats: Sequence[ChannelStats], probe_stats: Sequence[ChannelStats]) -> torch.Tensor:
    """Sum over layers of ||mean_t - mean_p|| + ||std_t - std_p||, norms over channels, averaged over batch."""
    if len(target_stats) != len(probe_stats):
        raise ShapeError(f"style_loss needs equal layer counts, got {len(target_stats)} and {len(probe_stats)}")
    total = None
    for t, p in zip(target_stats, probe_stats):
        if t.mean.shape != p.mean.shape:
            raise ShapeError(f"layer stats shape mismatch: {tuple(t.mean.shape)} vs {tuple(p.mean.shape)}")
        term = (_l2(t.mean - p.mean) + _l2(t.std - p.std)).mean()
        total = term if total is None else total + term
    if total is None:
        raise ShapeError("style_loss needs at least one layer")
    return total


def _expand_stats(stats: ChannelStats, batch: int) -> ChannelStats:
    if stats.mean.shape[0] == batch:
        return stats
    return ChannelStats(stats.mean.expand(batch, -1), stats.std.expand(batch, -1))


def ash_plus_loss(segmenter, encoder, X_s: torch.Tensor, X_style: torch.Tensor,
                  X_stylized: torch.Tensor, inter, p_src: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Composite dFT objective ``-cont + content + style_pos - style_neg``.

    Style terms probe the re-encoded stylized image at every encoder stage.
    Positive targets are the style image's stage statistics, with the
    perturbed style features at the deepest stage; negative targets are the
    source image's statistics. ``p_src`` may pass in an already computed
    source prediction from the same segmenter weights.
    """
    p_stylized = torch.softmax(segmenter(X_stylized), dim=1)
    if p_src is None:
        p_src = torch.softmax(segmenter(X_s), dim=1)
    cont = consistency_loss(p_stylized, p_src)
    content = content_loss(inter.f_src, inter.merged)

    batch = X_s.shape[0]
    probe = [channel_stats(f) for f in encoder(X_stylized)]
    style_feats = inter.style_stages or encoder(X_style)
    pos_targets = [_expand_stats(channel_stats(f), batch) for f in style_feats[:-1]]
    pos_targets.append(channel_stats(inter.f_style_prime))
    src_feats = inter.src_stages or encoder(X_s)
    neg_targets = [channel_stats(f) for f in src_feats[:-1]] + [channel_stats(inter.f_src)]
    style_pos = style_loss(pos_targets, probe)
    style_neg = style_loss(neg_targets, probe)
    return LossBreakdown.compose(cont, content, style_pos, style_neg)
