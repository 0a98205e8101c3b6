"""Training configuration and its flat ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    # blend proportions of content / AdaIN-merged features
    sigma1: float = 0.25
    sigma2: float = 0.75
    iter_num: int = 2000
    # source-only iterations run before the joint phase (two-phase schedule)
    warmup_iters: int = 500
    lr_g: float = 1e-2
    lr_dft: float = 1e-3
    optimizer_g: str = "sgd"
    optimizer_dft: str = "sgd"
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    enable_stylization: bool = True
    enable_orthogonal_noise: bool = True
    enable_adversarial: bool = True
    enable_alpha: bool = True
    alpha_max: float = 0.5
    uniform_w: float = 0.5
    embed_dim: int = 64
    hard_onehot: bool = False
    seg_weight: float = 1.0
    cont_weight: float = 1.0
    seg_on_stylized: bool = False
    num_classes: int = 8
    image_size: int = 64
    deterministic: bool = True

    def validate(self) -> "TrainConfig":
        if self.iter_num < 1:
            raise ConfigError(f"iter_num must be >= 1, got {self.iter_num}")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        if self.lr_g <= 0 or self.lr_dft <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigError("sigma1 and sigma2 must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.uniform_w <= 1.0:
            raise ConfigError(f"uniform_w must lie in [0, 1], got {self.uniform_w}")
        if self.alpha_max <= 0:
            raise ConfigError("alpha_max must be > 0")
        if self.optimizer_g not in _OPTIMIZERS or self.optimizer_dft not in _OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.enable_alpha and not self.enable_adversarial:
            raise ConfigError("enable_alpha requires enable_adversarial")
        if self.enable_adversarial and not self.enable_stylization:
            raise ConfigError("enable_adversarial requires enable_stylization")
        if self.enable_orthogonal_noise and not self.enable_stylization:
            raise ConfigError("enable_orthogonal_noise requires enable_stylization")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.embed_dim < 1 or self.image_size < 8:
            raise ConfigError("embed_dim must be >= 1 and image_size >= 8")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: _coerce(known[k].type, k, v) for k, v in data.items()}
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_dict(parse_kv_text(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def parse_kv_text(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    data = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in data:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        data[key] = value
    return data


def _coerce(type_name, key, value):
    if not isinstance(value, str):
        return value
    type_name = getattr(type_name, "__name__", type_name)
    try:
        if type_name == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value
