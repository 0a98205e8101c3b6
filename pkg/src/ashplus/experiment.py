"""Desk-scale world assembly shared by the CLI, the demos and the acceptance suite."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import torch

from .config import _coerce
from .errors import ConfigError, IngestionError
from .nets import (AutoencoderConfig, Decoder, Encoder, collect_tensors, freeze, load_checkpoint,
                   load_module, pretrain_autoencoder, reconstruction_mae, write_checkpoint)
from .synthdata import (DomainSpec, SegDataset, default_spec, generate_domain, generate_style_pool, load_dataset,
                        make_shift_suite, save_dataset)


@dataclass
class WorldSettings:
    """Sizes and seeds of the synthetic world plus the autoencoder schedule."""

    n_train: int = 400
    n_eval: int = 40
    k_targets: int = 10
    shift_magnitude: float = 1.0
    style_pool_size: int = 200
    world_seed: int = 100
    ae_epochs: int = 40
    ae_lr: float = 3e-3
    ae_batch_size: int = 8
    ae_seed: int = 0

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSettings":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown world keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k].type, k, v) for k, v in data.items()})

    def replace(self, **changes) -> "WorldSettings":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    def autoencoder_config(self) -> AutoencoderConfig:
        return AutoencoderConfig(epochs=self.ae_epochs, lr=self.ae_lr, batch_size=self.ae_batch_size,
                                 seed=self.ae_seed)


@dataclass
class World:
    train: SegDataset
    source_eval: SegDataset
    targets: list
    style_pool: torch.Tensor

    @property
    def eval_domains(self) -> list:
        head = [self.source_eval] if self.source_eval is not None else []
        return head + list(self.targets)

    @property
    def image_size(self) -> int:
        return int(self.train.images.shape[1])


def build_world(settings: Optional[WorldSettings] = None, image_size: int = 64,
                spec: Optional[DomainSpec] = None) -> World:
    """Training split, an unseen-layout evaluation suite, and the style pool.

    The evaluation suite uses seed ``world_seed + 1`` and the style pool
    ``world_seed + 2``, so no evaluation layout appears in training.
    """
    s = settings or WorldSettings()
    spec = dataclasses.replace(spec, name="source") if spec else default_spec("source", image_size)
    image_size = spec.image_size
    train = generate_domain(spec, s.n_train, s.world_seed)
    train.name = "train"
    source_eval, targets = make_shift_suite(spec, s.k_targets, s.shift_magnitude, s.world_seed + 1,
                                            n=s.n_eval)
    pool = generate_style_pool(s.style_pool_size, image_size, s.world_seed + 2)
    return World(train, source_eval, targets, pool)


def autoencoder_corpus(world: World) -> torch.Tensor:
    return torch.cat([world.train.image_tensor(), world.style_pool])


def pretrain_world_autoencoder(world: World, settings: Optional[WorldSettings] = None):
    """Returns frozen ``(encoder, decoder)`` trained on the training images plus the style pool."""
    s = settings or WorldSettings()
    result = pretrain_autoencoder(autoencoder_corpus(world), s.autoencoder_config())
    return result.encoder, result.decoder


def heldout_mae(autoencoder, world: World) -> float:
    encoder, decoder = autoencoder
    return reconstruction_mae(encoder, decoder, world.source_eval.image_tensor())


def save_autoencoder(path, autoencoder, channels=None) -> Path:
    encoder, decoder = autoencoder
    return write_checkpoint(path, collect_tensors({"encoder": encoder, "decoder": decoder}),
                            {"channels": list(channels or encoder.channels)}, 0, {"kind": "autoencoder"})


def load_autoencoder(path):
    state = load_checkpoint(path)
    if not (state.has_module("encoder") and state.has_module("decoder")):
        raise IngestionError(f"{path}: no encoder/decoder weights")
    channels = tuple(state.config.get("channels", (16, 32, 64)))
    encoder = load_module(Encoder(channels), state, "encoder")
    decoder = load_module(Decoder(channels), state, "decoder")
    return freeze(encoder), freeze(decoder)


# ---------------------------------------------------------------------------
# on-disk world: train/, suite/<domain>/, style/ (images only)
# ---------------------------------------------------------------------------

def save_world(world: World, root) -> Path:
    from PIL import Image
    import numpy as np

    root = Path(root)
    save_dataset(world.train, root / "train")
    for ds in world.eval_domains:
        save_dataset(ds, root / "suite" / ds.name)
    style_dir = root / "style"
    style_dir.mkdir(parents=True, exist_ok=True)
    pool = (world.style_pool.permute(0, 2, 3, 1).numpy() * 255.0).round().astype(np.uint8)
    for i, img in enumerate(pool):
        Image.fromarray(img, mode="RGB").save(style_dir / f"{i:05d}.png")
    return root


def load_style_pool(directory) -> torch.Tensor:
    from PIL import Image
    import numpy as np

    root = Path(directory)
    if not root.is_dir():
        raise IngestionError(f"style pool directory not found: {root}")
    files = sorted(root.glob("*.png"))
    if not files:
        raise IngestionError(f"{root}: style pool holds no PNG images")
    arrays = [np.asarray(Image.open(f).convert("RGB")) for f in files]
    for f, a in zip(files, arrays):
        if a.shape != arrays[0].shape:
            raise IngestionError(f"{f.name}: size {a.shape} differs from {arrays[0].shape}")
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float().div(255.0)


def load_world(root, style_dir=None) -> World:
    """Read a directory written by :func:`save_world`.

    A plain dataset directory (one with a ``meta`` file) is accepted too; it
    then serves as the training split with no evaluation suite.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"data directory not found: {root}")
    style_path = Path(style_dir) if style_dir else root / "style"
    pool = load_style_pool(style_path) if (style_dir or style_path.is_dir()) else None
    if (root / "meta").is_file():
        train = load_dataset(root)
        return World(train, None, [], pool)
    train = load_dataset(root / "train")
    suite = root / "suite"
    domains = [load_dataset(d) for d in sorted(suite.iterdir()) if d.is_dir()] if suite.is_dir() else []
    source = next((d for d in domains if d.name == "source"), None)
    targets = [d for d in domains if d.name != "source"]
    return World(train, source, targets, pool)
