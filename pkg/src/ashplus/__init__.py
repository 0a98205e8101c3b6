"""Semantically modulated adversarial style hallucination for segmentation, at desk scale."""
from .config import TrainConfig
from .dft import DualFeatureTransform, blend, hallucinate, orthogonal_unit_noise, uniform_hallucinate
from .errors import AshPlusError, CheckpointError, ConfigError, IngestionError
from .featstats import adain, channel_stats, content_loss
from .metrics import avg_miou, iou_per_class, miou, rel_diff
from .nets import Decoder, Encoder, SegNet
from .objectives import LossBreakdown, ash_plus_loss, consistency_loss, seg_loss, style_loss
from .trainloop import ablation_suite, sigma_sweep, train_ashplus, train_source_only, train_uniform

__version__ = "0.1.0"

__all__ = [
    "TrainConfig", "DualFeatureTransform", "blend", "hallucinate", "orthogonal_unit_noise",
    "uniform_hallucinate", "AshPlusError", "CheckpointError", "ConfigError", "IngestionError",
    "adain", "channel_stats", "content_loss", "avg_miou", "iou_per_class", "miou", "rel_diff",
    "Decoder", "Encoder", "SegNet", "LossBreakdown", "ash_plus_loss", "consistency_loss",
    "seg_loss", "style_loss", "ablation_suite", "sigma_sweep", "train_ashplus",
    "train_source_only", "train_uniform", "__version__",
]
