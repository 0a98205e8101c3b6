"""Desk-scale encoder / decoder / segmenter and the checkpoint container.

The encoder and decoder stand in for a large pretrained image autoencoder;
any module with the same call signatures can replace them.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (CheckpointError, CheckpointVersionError, ConfigError,
                     CorruptCheckpointError, ShapeError)

log = logging.getLogger(__name__)


class Encoder(nn.Module):
    """Stack of stages, each halving the spatial resolution; returns every stage's output."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), in_channels: int = 3):
        super().__init__()
        if len(channels) < 2:
            raise ConfigError("encoder needs at least two stages")
        self.channels = tuple(channels)
        self.in_channels = in_channels
        stages = []
        prev = in_channels
        for ch in self.channels:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(),
            ))
            prev = ch
        self.stages = nn.ModuleList(stages)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`: deepest features back to a clamped 3-channel image."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), out_channels: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        rev = list(reversed(self.channels))
        outs = rev[1:] + [rev[-1]]
        blocks = []
        for cin, cout in zip(rev, outs):
            blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
            ))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(outs[-1], out_channels, 3, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() != 4 or f.shape[1] != self.channels[-1]:
            raise ShapeError(f"decoder expects (B, {self.channels[-1]}, h, w), got {tuple(f.shape)}")
        for block in self.blocks:
            f = block(f)
        return self.to_rgb(f).clamp(0.0, 1.0)


class SegNet(nn.Module):
    """Five-layer dilated conv net producing full-resolution logits."""

    def __init__(self, num_classes: int = 8, width: int = 32, stem: int = 24, in_channels: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.conv1 = nn.Conv2d(in_channels, stem, 3, padding=1)
        self.conv2 = nn.Conv2d(stem, width, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width, width, 3, padding=2, dilation=2)
        self.conv4 = nn.Conv2d(width, width, 3, padding=4, dilation=4)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    @property
    def feature_dim(self) -> int:
        return self.width

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate activations at half resolution."""
        if x.dim() != 4 or x.shape[1] != self.conv1.in_channels:
            raise ShapeError(f"segmenter expects (B, 3, H, W), got {tuple(x.shape)}")
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return F.relu(self.conv4(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.classifier(self.features(x))
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def encode(encoder: Encoder, X: torch.Tensor) -> list[torch.Tensor]:
    return encoder(X)


def decode(decoder: Decoder, f: torch.Tensor) -> torch.Tensor:
    return decoder(f)


def segment(segmenter: SegNet, X: torch.Tensor) -> torch.Tensor:
    return segmenter(X)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


@dataclass
class AutoencoderConfig:
    channels: tuple = (16, 32, 64)
    epochs: int = 40
    batch_size: int = 8
    lr: float = 3e-3
    seed: int = 0


@dataclass
class PretrainResult:
    encoder: Encoder
    decoder: Decoder
    epoch_losses: list = field(default_factory=list)


def pretrain_autoencoder(images: torch.Tensor, cfg: Optional[AutoencoderConfig] = None) -> PretrainResult:
    """Train an encoder/decoder pair on ``images`` (N, 3, H, W) by L1 reconstruction, then freeze both."""
    cfg = cfg or AutoencoderConfig()
    if images is None or len(images) == 0:
        raise ConfigError("autoencoder corpus is empty")
    torch.manual_seed(cfg.seed)
    encoder, decoder = Encoder(cfg.channels), Decoder(cfg.channels)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(images)
    losses = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = images[order[start:start + cfg.batch_size]]
            # unclamped output so saturated pixels still get gradient
            feats = encoder(batch)[-1]
            out = decoder.to_rgb(_decoder_trunk(decoder, feats))
            loss = (out - batch).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        sched.step()
        losses.append(total / n)
        log.debug("autoencoder epoch %d: L1 %.5f", epoch, losses[-1])
    return PretrainResult(freeze(encoder), freeze(decoder), losses)


def _decoder_trunk(decoder: Decoder, f: torch.Tensor) -> torch.Tensor:
    for block in decoder.blocks:
        f = block(f)
    return f


@torch.no_grad()
def reconstruction_mae(encoder: Encoder, decoder: Decoder, images: torch.Tensor, batch_size: int = 32) -> float:
    total = 0.0
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        total += (decoder(encoder(batch)[-1]) - batch).abs().sum().item()
    return total / images.numel()


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: MAGIC | u32 version | u64 header length | JSON header | blobs | u32 crc32
# every integer little-endian; blobs are raw little-endian arrays in header order
# ---------------------------------------------------------------------------

MAGIC = b"ASHPCKPT"
FORMAT_VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class CheckpointState:
    tensors: dict
    config: dict
    iteration: int
    meta: dict = field(default_factory=dict)

    def module_state(self, prefix: str) -> dict:
        prefix = prefix + "."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def has_module(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)


def collect_tensors(modules: Mapping[str, nn.Module]) -> dict:
    tensors = {}
    for prefix, module in modules.items():
        if module is None:
            continue
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value
    return tensors


def save_checkpoint(path, modules: Mapping[str, nn.Module], config: Optional[dict] = None,
                    iteration: int = 0, meta: Optional[dict] = None) -> Path:
    """Write ``modules`` (prefix -> module) plus config/iteration into one binary file."""
    return write_checkpoint(path, collect_tensors(modules), config, iteration, meta)


def write_checkpoint(path, tensors: Mapping[str, torch.Tensor], config: Optional[dict] = None,
                     iteration: int = 0, meta: Optional[dict] = None) -> Path:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "iteration": int(iteration),
                         "config": config or {}, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def load_checkpoint(path) -> CheckpointState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 4 or not data.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a checkpoint or truncated")
    version, header_len = struct.unpack("<IQ", data[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(body[fixed:fixed + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    blob_start = fixed + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = blob_start + entry["offset"]
        raw = body[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CorruptCheckpointError(f"{path}: blob {entry['name']} truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[entry["dtype"]])
    return CheckpointState(tensors, header["config"], header["iteration"], header["meta"])


def load_module(module: nn.Module, state: CheckpointState, prefix: str) -> nn.Module:
    sub = state.module_state(prefix)
    if not sub:
        raise CheckpointError(f"checkpoint has no parameters for {prefix!r}")
    module.load_state_dict(sub)
    return module
