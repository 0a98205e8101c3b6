"""Channel statistics, adaptive instance normalization and the latent content distance."""
from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import InvalidInputError, ShapeError

EPS = 1e-5


class ChannelStats(NamedTuple):
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C), floored at EPS


def _check_feature_map(f: torch.Tensor, name: str = "f") -> None:
    if f.dim() != 4 or min(f.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (B, C, H, W) tensor, got {tuple(f.shape)}")


def channel_stats(f: torch.Tensor, eps: float = EPS) -> ChannelStats:
    """Per-(batch, channel) spatial mean and population std, std floored at ``eps``."""
    _check_feature_map(f)
    if not torch.isfinite(f).all():
        raise InvalidInputError("feature map contains non-finite values")
    flat = f.flatten(2)
    mean = flat.mean(dim=2)
    var = flat.var(dim=2, unbiased=False)
    # the floor is applied on the variance so the gradient stays finite at zero spread
    std = torch.sqrt(torch.clamp(var, min=eps * eps))
    return ChannelStats(mean, std)


def adain(f_src: torch.Tensor, f_style_like: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Re-normalize ``f_src`` so each channel carries the mean/std of ``f_style_like``.

    Spatial sizes of the two inputs may differ; batch and channel counts must match.
    """
    _check_feature_map(f_src, "f_src")
    _check_feature_map(f_style_like, "f_style_like")
    if f_src.shape[:2] != f_style_like.shape[:2]:
        raise ShapeError(
            f"adain needs matching (B, C): {tuple(f_src.shape[:2])} vs {tuple(f_style_like.shape[:2])}"
        )
    src = channel_stats(f_src, eps)
    sty = channel_stats(f_style_like, eps)
    normalized = (f_src - src.mean[..., None, None]) / src.std[..., None, None]
    return sty.std[..., None, None] * normalized + sty.mean[..., None, None]


def content_loss(f_src: torch.Tensor, merged: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of ``f_src - merged`` over every element."""
    if f_src.shape != merged.shape:
        raise ShapeError(f"content_loss shape mismatch: {tuple(f_src.shape)} vs {tuple(merged.shape)}")
    diff = (f_src - merged).flatten()
    # sqrt(sum + tiny) keeps the gradient defined when the inputs coincide
    sq = (diff * diff).sum()
    return torch.where(sq > 0, torch.sqrt(torch.clamp(sq, min=torch.finfo(sq.dtype).tiny)), sq)
