"""Procedural multi-domain segmentation world.

Every domain shares one scene layout per (seed, index): road and sky bands,
building blocks, and small object classes of decreasing frequency. Domains
differ only in palette, texture and illumination, so labels are identical
across a shift suite while the pixels move.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, EmptyDatasetError, IngestionError
from .objectives import IGNORE_INDEX

DEFAULT_CLASS_NAMES = ("background", "road", "sky", "building", "vehicle", "pole", "sign", "marker")
DEFAULT_FREQUENCY = (0.22, 0.25, 0.20, 0.18, 0.08, 0.04, 0.02, 0.01)
DEFAULT_PALETTE = (
    (0.55, 0.50, 0.42),
    (0.33, 0.33, 0.36),
    (0.55, 0.74, 0.93),
    (0.72, 0.52, 0.40),
    (0.85, 0.20, 0.22),
    (0.90, 0.84, 0.30),
    (0.20, 0.68, 0.32),
    (0.62, 0.25, 0.80),
)
# object classes cycle through these shapes, with nominal instance areas (pixels at 64x64)
_OBJECT_SHAPES = (("ellipse", 80.0), ("bar", 32.0), ("square", 25.0), ("disc", 20.0))
_MIN_INSTANCE_AREA = 6.0


@dataclass
class DomainSpec:
    name: str = "source"
    palette: tuple = DEFAULT_PALETTE
    texture_amplitude: float = 0.06
    texture_frequency: int = 6
    gain: float = 1.0
    bias: float = 0.0
    tint: tuple = (1.0, 1.0, 1.0)
    class_frequency: tuple = DEFAULT_FREQUENCY
    image_size: int = 64

    @property
    def num_classes(self) -> int:
        return len(self.class_frequency)

    def validate(self) -> "DomainSpec":
        k = self.num_classes
        if k < 2:
            raise ConfigError("a domain needs at least two classes")
        if len(self.palette) != k:
            raise ConfigError(f"palette has {len(self.palette)} colors for {k} classes")
        freq = np.asarray(self.class_frequency, dtype=np.float64)
        if (freq < 0).any() or abs(freq.sum() - 1.0) > 1e-6:
            raise ConfigError(f"class_frequency must be nonnegative and sum to 1, got {freq.sum()}")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.texture_frequency < 1:
            raise ConfigError("texture_frequency must be >= 1")
        scale = (self.image_size / 64.0) ** 2
        for c in range(4, k):
            if freq[c] * self.image_size ** 2 < _MIN_INSTANCE_AREA * max(scale, 1.0):
                raise ConfigError(
                    f"class {c} share {freq[c]:.4g} is too small for one object at {self.image_size}px"
                )
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["palette"] = [list(map(float, c)) for c in self.palette]
        d["tint"] = list(map(float, self.tint))
        d["class_frequency"] = list(map(float, self.class_frequency))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        d["tint"] = tuple(d["tint"])
        d["class_frequency"] = tuple(d["class_frequency"])
        return cls(**d)


def default_spec(name: str = "source", image_size: int = 64) -> DomainSpec:
    return DomainSpec(name=name, image_size=image_size)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    label: np.ndarray  # (H, W) uint8


@dataclass
class SegDataset:
    name: str
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N, H, W) uint8, IGNORE_INDEX = unlabeled
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._tensor = None

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], self.labels[i])

    def image_tensor(self) -> torch.Tensor:
        if self._tensor is None:
            self._tensor = torch.from_numpy(self.images).permute(0, 3, 1, 2).float().div(255.0)
        return self._tensor

    def label_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.labels.astype(np.int64))

    def subset(self, indices, name: Optional[str] = None) -> "SegDataset":
        idx = np.asarray(indices)
        return SegDataset(name or self.name, self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


def _smooth_field(rng: np.random.Generator, size: int, cells: int, channels: int = 1) -> np.ndarray:
    """Bilinear upsampling of a random (cells+1)^2 grid to size x size; values in [0, 1]."""
    grid = rng.random((channels, cells + 1, cells + 1))
    coords = np.linspace(0, cells, size)
    i0 = np.clip(np.floor(coords).astype(int), 0, cells - 1)
    t = coords - i0
    rows = grid[:, i0, :] * (1 - t)[None, :, None] + grid[:, i0 + 1, :] * t[None, :, None]
    out = rows[:, :, i0] * (1 - t)[None, None, :] + rows[:, :, i0 + 1] * t[None, None, :]
    return out


def _wavy_line(rng: np.random.Generator, size: int, mean: float, amplitude: float) -> np.ndarray:
    phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.5)
    x = np.arange(size)
    return mean + amplitude * np.sin(2 * np.pi * freq * x / size + phase)


def generate_layout(class_frequency: Sequence[float], size: int, seed: int, index: int) -> np.ndarray:
    """Label map for one scene; depends only on the frequencies, size, seed and index."""
    freq = np.asarray(class_frequency, dtype=np.float64)
    k = len(freq)
    rng = _rng(seed, index, 0)
    n = float(size * size)
    label = np.zeros((size, size), dtype=np.uint8)
    rows = np.arange(size)[:, None]

    f_sky = freq[2] if k > 2 else 0.0
    f_obj = freq[4:].sum() if k > 4 else 0.0
    # objects land below the sky and occlude the other classes proportionally
    occlusion = f_obj / max(1.0 - f_sky, 1e-9)
    boost = 1.0 / max(1.0 - occlusion, 1e-9)

    sky_bottom = np.zeros(size)
    if k > 2 and f_sky > 0:
        sky_bottom = _wavy_line(rng, size, f_sky * size, 1.5)
        label[rows < sky_bottom[None, :]] = 2
    road_top = np.full(size, float(size))
    if freq[1] > 0:
        road_top = _wavy_line(rng, size, size - freq[1] * boost * size, 1.0)
        label[rows >= road_top[None, :]] = 1

    if k > 3 and freq[3] > 0:
        target = freq[3] * boost * n
        painted = np.zeros_like(label, dtype=bool)
        lo = int(np.ceil(sky_bottom.max())) + 1
        for _ in range(200):
            if painted.sum() >= target:
                break
            w = int(rng.integers(max(3, size // 10), max(5, size // 4)))
            x0 = int(rng.integers(0, size - w + 1))
            bottom = int(np.floor(road_top[x0:x0 + w].min()))
            top = int(rng.integers(lo, max(lo + 1, bottom - 2)))
            block = np.zeros_like(painted)
            block[top:bottom, x0:x0 + w] = True
            block &= label != 1
            label[block] = 3
            painted |= block

    scale = n / 4096.0
    yy, xx = np.mgrid[0:size, 0:size]
    top_limit = int(np.ceil(sky_bottom.mean()))
    # paint frequent objects first so rare ones are never occluded
    for c in range(4, k):
        shape, nominal = _OBJECT_SHAPES[(c - 4) % len(_OBJECT_SHAPES)]
        target = freq[c] * n
        if target <= 0:
            continue
        area = nominal * scale
        count = target / area
        count = int(np.floor(count) + (rng.random() < count - np.floor(count)))
        count = max(count, 1)
        area = target / count if count == 1 else area
        for _ in range(count):
            mask = _shape_mask(shape, area, rng, size, top_limit, yy, xx)
            label[mask] = c
    return label


def _shape_mask(shape: str, area: float, rng, size: int, top_limit: int, yy, xx) -> np.ndarray:
    if shape == "ellipse":
        a = np.sqrt(area * 2.0 / np.pi)
        b = a / 2.0
        cy = rng.uniform(max(top_limit + b, size * 0.45), size - b)
        cx = rng.uniform(a, size - a)
        return ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0
    if shape == "bar":
        w = 2
        h = max(2, int(round(area / w)))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(max(top_limit, 0), max(top_limit + 1, size - h)))
        m = np.zeros((size, size), dtype=bool)
        m[y0:y0 + h, x0:x0 + w] = True
        return m
    if shape == "square":
        s = max(2, int(round(np.sqrt(area))))
        x0 = int(rng.integers(0, size - s + 1))
        y0 = int(rng.integers(max(top_limit, 0), max(top_limit + 1, size - s)))
        m = np.zeros((size, size), dtype=bool)
        m[y0:y0 + s, x0:x0 + s] = True
        return m
    r = np.sqrt(area / np.pi)
    cy = rng.uniform(max(top_limit + r, r), size - r)
    cx = rng.uniform(r, size - r)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r + 0.5


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render(spec: DomainSpec, label: np.ndarray, seed: int, index: int) -> np.ndarray:
    """Paint a label map in the domain's style; returns (H, W, 3) uint8."""
    size = label.shape[0]
    palette = np.asarray(spec.palette, dtype=np.float64)
    img = palette[np.minimum(label, len(palette) - 1)]
    rng = _rng(seed, index, 1)
    coarse = _smooth_field(rng, size, spec.texture_frequency, 3).transpose(1, 2, 0)
    fine = rng.random((size, size, 1))
    img = img + spec.texture_amplitude * (2.0 * coarse - 1.0) + 0.25 * spec.texture_amplitude * (2.0 * fine - 1.0)
    img = spec.gain * img * np.asarray(spec.tint)[None, None, :] + spec.bias
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_domain(spec: DomainSpec, n: int, seed: int, start: int = 0) -> SegDataset:
    """``n`` samples of one domain; indices ``start .. start+n-1`` fix the layouts."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    spec.validate()
    size = spec.image_size
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        labels[i] = generate_layout(spec.class_frequency, size, seed, start + i)
        images[i] = render(spec, labels[i], seed, start + i)
    return SegDataset(spec.name, images, labels, spec.num_classes,
                      {"seed": seed, "start": start, "spec": spec.to_dict()})


def _rotate_hue(rgb: np.ndarray, angle: float) -> np.ndarray:
    """Rotate colors about the gray axis (Rodrigues)."""
    k = np.ones(3) / np.sqrt(3.0)
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + s * K + (1 - c) * K @ K
    return rgb @ R.T


def shifted_spec(base: DomainSpec, t: float, seed: int, name: str) -> DomainSpec:
    """Style shift of strength ``t`` (0 = identical to ``base``)."""
    rng = np.random.default_rng([int(seed), 7919])
    k = base.num_classes
    offsets = rng.normal(size=(k, 3))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    tint_dir = rng.normal(size=3)
    tint_dir /= np.linalg.norm(tint_dir)
    palette = _rotate_hue(np.asarray(base.palette), t * np.deg2rad(150.0)) + 0.12 * t * offsets
    palette = np.clip(palette, 0.0, 1.0)
    return dataclasses.replace(
        base,
        name=name,
        palette=tuple(tuple(float(v) for v in c) for c in palette),
        texture_amplitude=base.texture_amplitude + 0.06 * t,
        texture_frequency=base.texture_frequency + int(round(4 * t)),
        gain=base.gain * (1.0 - 0.35 * t),
        bias=base.bias + 0.12 * t,
        tint=tuple(float(v) for v in np.asarray(base.tint) * (1.0 + 0.25 * t * tint_dir)),
    )


def make_shift_suite(base_spec: DomainSpec, k_targets: int, shift_magnitude: float, seed: int,
                     n: int = 40):
    """Source domain plus ``k_targets`` targets of increasing style distance.

    All domains render the same ``n`` layouts; target ``i`` (0-based) is
    shifted by ``shift_magnitude * (i + 1) / k_targets``. Draw training data
    from a different seed so evaluation scenes stay unseen.
    """
    if k_targets < 1:
        raise ConfigError("k_targets must be >= 1")
    if shift_magnitude < 0:
        raise ConfigError("shift_magnitude must be >= 0")
    source = generate_domain(base_spec, n, seed)
    targets = []
    for i in range(k_targets):
        t = shift_magnitude * (i + 1) / k_targets
        spec = shifted_spec(base_spec, t, seed, f"target{i:02d}")
        targets.append(generate_domain(spec, n, seed))
    return source, targets


def generate_style_pool(n: int, size: int = 64, seed: int = 0) -> torch.Tensor:
    """Textured color fields (stripes over smooth noise) unrelated to any domain palette; (n, 3, H, W)."""
    if n < 1:
        raise ConfigError("style pool size must be >= 1")
    out = np.empty((n, 3, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for i in range(n):
        rng = _rng(seed, i, 2)
        c0, c1 = rng.random(3), rng.random(3)
        field_ = _smooth_field(rng, size, int(rng.integers(2, 8)), 1)[0]
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 12)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        mix = np.clip(0.6 * field_ + 0.4 * stripes, 0, 1)[None]
        img = c0[:, None, None] * (1 - mix) + c1[:, None, None] * mix
        img += 0.05 * (rng.random((3, size, size)) - 0.5)
        out[i] = np.clip(img, 0, 1)
    return torch.from_numpy(out)


# ---------------------------------------------------------------------------
# disk format: images/NNNNN.png, labels/NNNNN.png, meta (key=value lines)
# ---------------------------------------------------------------------------

def save_dataset(dataset: SegDataset, directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        Image.fromarray(dataset.images[i], mode="RGB").save(root / "images" / f"{i:05d}.png")
        Image.fromarray(dataset.labels[i], mode="L").save(root / "labels" / f"{i:05d}.png")
    size = dataset.images.shape[1]
    meta = {"name": dataset.name, "num_classes": dataset.num_classes, "image_size": size,
            "count": len(dataset), "spec": json.dumps(dataset.meta.get("spec", {}), sort_keys=True)}
    (root / "meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return root


def _read_meta(path: Path) -> dict:
    if not path.is_file():
        raise IngestionError(f"missing meta file: {path}")
    meta = {}
    for line in path.read_text().splitlines():
        if line.strip() and "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    if "num_classes" not in meta:
        raise IngestionError(f"{path}: meta lacks num_classes")
    return meta


def load_dataset(directory) -> SegDataset:
    root = Path(directory)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    meta = _read_meta(root / "meta")
    k = int(meta["num_classes"])
    image_files = sorted((root / "images").glob("*.png")) if (root / "images").is_dir() else []
    label_files = sorted((root / "labels").glob("*.png")) if (root / "labels").is_dir() else []
    image_names = {p.name for p in image_files}
    label_names = {p.name for p in label_files}
    for missing in sorted(image_names ^ label_names):
        side = "label" if missing in image_names else "image"
        raise IngestionError(f"{root}: {missing} has no matching {side} file")
    if not image_files:
        raise EmptyDatasetError(f"{root}: no image/label pairs")
    images, labels = [], []
    for img_path, lbl_path in zip(image_files, label_files):
        img = np.asarray(Image.open(img_path).convert("RGB"))
        lbl_img = Image.open(lbl_path)
        if lbl_img.mode not in ("L", "P"):
            raise IngestionError(f"{lbl_path}: label must be single-channel 8-bit, got mode {lbl_img.mode}")
        lbl = np.asarray(lbl_img)
        if img.shape[:2] != lbl.shape:
            raise IngestionError(f"{img_path.name}: image {img.shape[:2]} and label {lbl.shape} sizes differ")
        bad = (lbl >= k) & (lbl != IGNORE_INDEX)
        if bad.any():
            raise IngestionError(f"{lbl_path}: label id {int(lbl[bad].max())} >= num_classes {k}")
        if images and img.shape != images[0].shape:
            raise IngestionError(f"{img_path.name}: size {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(lbl)
    spec = json.loads(meta["spec"]) if meta.get("spec") else {}
    return SegDataset(meta.get("name", root.name), np.stack(images), np.stack(labels), k, {"spec": spec})
