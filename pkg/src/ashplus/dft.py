"""Dual-stage feature transform (dFT).

Stage one perturbs the style features with semantically predicted scale/shift
maps; stage two re-balances source content against the AdaIN-merged features
with a per-element weight before decoding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .errors import ConfigError, DegenerateInputError, ShapeError
from .featstats import adain


class HallucinationParams(NamedTuple):
    gamma: torch.Tensor
    beta: torch.Tensor
    alpha: torch.Tensor


class DualFeatureTransform(nn.Module):
    """Embedding of per-pixel class probabilities plus the (gamma, beta, alpha) heads.

    The final head layer starts at zero, so a fresh layer emits gamma=1,
    beta=0, alpha=0 everywhere.
    """

    def __init__(self, num_classes: int, feat_channels: int, embed_dim: int = 64,
                 alpha_max: float = 0.5, hard_onehot: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.feat_channels = feat_channels
        self.embed_dim = embed_dim
        self.alpha_max = alpha_max
        self.hard_onehot = hard_onehot
        self.embed = nn.Conv2d(num_classes, embed_dim, kernel_size=1)
        self.head_hidden = nn.Conv2d(embed_dim, embed_dim, kernel_size=3, padding=1)
        self.head_out = nn.Conv2d(embed_dim, 3 * feat_channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.head_out.weight)
        nn.init.zeros_(self.head_out.bias)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, probs: torch.Tensor, target_hw) -> HallucinationParams:
        return generate_params(embed_predictions(probs, target_hw, self), self)


def embed_predictions(probs: torch.Tensor, target_hw, weights: DualFeatureTransform) -> torch.Tensor:
    """Resample a (B, K, H, W) probability map to ``target_hw`` and embed it pointwise.

    Gradients never reach whatever produced ``probs``.
    """
    if probs.dim() != 4:
        raise ShapeError(f"probs must be (B, K, H, W), got {tuple(probs.shape)}")
    if probs.shape[1] != weights.num_classes:
        raise ConfigError(
            f"probability map has {probs.shape[1]} classes, dFT configured for {weights.num_classes}"
        )
    probs = probs.detach()
    if weights.hard_onehot:
        probs = F.one_hot(probs.argmax(dim=1), weights.num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    target_hw = tuple(int(s) for s in target_hw)
    if tuple(probs.shape[-2:]) != target_hw:
        downsampling = probs.shape[-2] > target_hw[0] or probs.shape[-1] > target_hw[1]
        probs = F.interpolate(probs, size=target_hw, mode="bilinear", align_corners=False,
                              antialias=downsampling)
    return torch.tanh(weights.embed(probs))


def generate_params(phi: torch.Tensor, weights: DualFeatureTransform) -> HallucinationParams:
    hidden = F.leaky_relu(weights.head_hidden(phi), 0.1)
    gamma_raw, beta, alpha_raw = weights.head_out(hidden).chunk(3, dim=1)
    return HallucinationParams(1.0 + gamma_raw, beta, weights.alpha_max * torch.tanh(alpha_raw))


def orthogonal_unit_noise(f_style: torch.Tensor, seed: int) -> torch.Tensor:
    """Gaussian noise per batch element, orthogonal to that element of ``f_style``, unit Frobenius norm."""
    if f_style.dim() != 4:
        raise ShapeError(f"f_style must be (B, C, H, W), got {tuple(f_style.shape)}")
    gen = torch.Generator().manual_seed(int(seed))
    flat = f_style.detach().to(torch.float64).reshape(f_style.shape[0], -1)
    norms = flat.norm(dim=1)
    if (norms == 0).any():
        raise DegenerateInputError("cannot draw noise orthogonal to an all-zero style tensor")
    unit = flat / norms[:, None]
    noise = torch.randn(flat.shape, generator=gen, dtype=torch.float64)
    noise = noise - (noise * unit).sum(dim=1, keepdim=True) * unit
    # second pass removes the residual component left by rounding
    noise = noise - (noise * unit).sum(dim=1, keepdim=True) * unit
    noise = noise / noise.norm(dim=1, keepdim=True)
    return noise.reshape(f_style.shape).to(f_style.dtype)


def _same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def perturb_style(f_style: torch.Tensor, params: HallucinationParams, z: torch.Tensor) -> torch.Tensor:
    """First stage: ``gamma * (z * f_style + 1) + beta``, all elementwise."""
    _same_shape(f_style, params.gamma, params.beta, z)
    return params.gamma * (z * f_style + 1.0) + params.beta


def blend(f_src: torch.Tensor, merged: torch.Tensor, alpha: torch.Tensor,
          sigma1: float, sigma2: float) -> torch.Tensor:
    """Second stage: ``(sigma1 + alpha) * f_src + (sigma2 - alpha) * merged``."""
    _same_shape(f_src, merged, alpha)
    if sigma1 < 0 or sigma2 < 0:
        raise ConfigError("sigma1 and sigma2 must be >= 0")
    s1 = torch.full_like(f_src, float(sigma1))
    s2 = torch.full_like(f_src, float(sigma2))
    return (s1 + alpha) * f_src + (s2 - alpha) * merged


@dataclass
class Intermediates:
    f_src: torch.Tensor
    f_style: torch.Tensor
    f_style_prime: torch.Tensor
    merged: torch.Tensor
    blended: torch.Tensor
    alpha: torch.Tensor
    gamma: torch.Tensor
    beta: torch.Tensor
    z: torch.Tensor
    probs: torch.Tensor
    # every encoder stage, deepest last; style stages already batch-matched
    src_stages: Optional[list] = None
    style_stages: Optional[list] = None


def _match_batch(f: torch.Tensor, batch: int) -> torch.Tensor:
    if f.shape[0] == batch:
        return f
    if f.shape[0] != 1:
        raise ShapeError(f"style batch {f.shape[0]} cannot broadcast to source batch {batch}")
    return f.expand(batch, *f.shape[1:])


def hallucinate(X_s: torch.Tensor, X_style: torch.Tensor, segmenter, encoder, decoder,
                weights: Optional[DualFeatureTransform], cfg: TrainConfig, seed: int = 0,
                probs: Optional[torch.Tensor] = None):
    """Stylize a source batch.

    Runs encode -> predict -> embed -> heads -> noise -> perturb -> AdaIN ->
    blend -> decode and returns ``(X_stylized, Intermediates)``. ``X_style``
    may hold one image, shared by the whole batch.

    With ``cfg.enable_adversarial`` off there is no dFT: the raw style
    features stand in for gamma and beta is zero, so the perturbation reduces
    to ``f_style * (z * f_style + 1)`` (plain AdaIN when noise is off too).
    ``probs`` overrides the segmenter's prediction (used for class masking).
    """
    src_stages = encoder(X_s)
    f_src = src_stages[-1]
    style_stages = [_match_batch(f, f_src.shape[0]) for f in encoder(X_style)]
    f_style = style_stages[-1]
    if probs is None:
        with torch.no_grad():
            probs = torch.softmax(segmenter(X_s), dim=1)
    probs = probs.detach()

    if cfg.enable_orthogonal_noise:
        z = orthogonal_unit_noise(f_style, seed)
    else:
        z = torch.zeros_like(f_style)

    if cfg.enable_adversarial:
        if weights is None:
            raise ConfigError("adversarial stylization needs dFT weights")
        params = weights(probs, f_src.shape[-2:])
        _same_shape(f_src, params.gamma, params.beta, params.alpha)
    else:
        params = HallucinationParams(f_style, torch.zeros_like(f_style), torch.zeros_like(f_style))
    alpha = params.alpha if cfg.enable_alpha else torch.zeros_like(params.alpha)

    f_style_prime = perturb_style(f_style, params, z)
    merged = adain(f_src, f_style_prime)
    blended = blend(f_src, merged, alpha, cfg.sigma1, cfg.sigma2)
    X_stylized = decoder(blended).clamp(0.0, 1.0)
    inter = Intermediates(f_src=f_src, f_style=f_style, f_style_prime=f_style_prime, merged=merged,
                          blended=blended, alpha=alpha, gamma=params.gamma, beta=params.beta,
                          z=z, probs=probs, src_stages=src_stages, style_stages=style_stages)
    return X_stylized, inter


def uniform_hallucinate(X_s: torch.Tensor, X_style: torch.Tensor, encoder, decoder, w: float) -> torch.Tensor:
    """Fixed-strength AdaIN stylization: ``Dec(w * f_src + (1 - w) * AdaIN(f_src, f_style))``."""
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"w must lie in [0, 1], got {w}")
    f_src = encoder(X_s)[-1]
    f_style = _match_batch(encoder(X_style)[-1], f_src.shape[0])
    mixed = w * f_src + (1.0 - w) * adain(f_src, f_style)
    return decoder(mixed).clamp(0.0, 1.0)
