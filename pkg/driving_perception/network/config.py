"""
Model and loss configuration for the perception network.

The JSON run configuration stores these as flat key/value sections
(``model`` and ``loss``); the sub-configs consumed by the individual
modules are derived from them.
"""
from dataclasses import dataclass, field, asdict, fields
from typing import Tuple

from driving_perception.exceptions import ConfigError

TASKS = ('detection', 'drivable', 'lane')
SEG_TASKS = ('drivable', 'lane')


def _check(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: Tuple[int, int] = (320, 320)
    channel_width: int = 128
    backbone_widths: Tuple[int, ...] = (32, 64, 128, 256)
    backbone_depths: Tuple[int, ...] = (1, 1, 2, 1)
    attention_heads: int = 8
    attention_layers: int = 1
    ffn_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        h, w = self.input_size
        _check(h > 0 and w > 0 and h % 32 == 0 and w % 32 == 0,
               f"input_size {self.input_size} must be positive multiples of 32")
        _check(self.channel_width % self.attention_heads == 0,
               f"channel_width {self.channel_width} not divisible by attention_heads {self.attention_heads}")
        # 2D sin-cos embedding splits the width into four equal parts
        _check(self.channel_width % 4 == 0, "channel_width must be divisible by 4")
        _check(len(self.backbone_widths) == 4 and len(self.backbone_depths) == 4,
               "backbone needs exactly four stages")
        _check(all(d >= 0 for d in self.backbone_depths), "backbone_depths must be >= 0")
        _check(self.attention_layers >= 1, "attention_layers must be >= 1")


@dataclass(frozen=True)
class GcaConfig:
    channels: int = 256
    reduction_ratio: int = 16
    gate_clip: Tuple[float, float] = (0.05, 0.95)

    def __post_init__(self):
        _check(self.reduction_ratio >= 1 and self.channels % self.reduction_ratio == 0,
               f"channels {self.channels} not divisible by reduction_ratio {self.reduction_ratio}")
        lo, hi = self.gate_clip
        _check(0.0 < lo < hi < 1.0, f"gate_clip {self.gate_clip} must satisfy 0 < lo < hi < 1")

    @property
    def hidden_channels(self):
        return self.channels // self.reduction_ratio


@dataclass(frozen=True)
class SegDecoderConfig:
    in_channels: int = 256
    proj_channels: int = 64
    tasks: Tuple[str, ...] = SEG_TASKS

    def __post_init__(self):
        _check(len(self.tasks) >= 1, "segmentation decoder needs at least one task")
        _check(all(t in SEG_TASKS for t in self.tasks), f"unknown segmentation task in {self.tasks}")


@dataclass(frozen=True)
class DetDecoderConfig:
    hidden_dim: int = 256
    num_queries: int = 300
    num_layers: int = 6
    num_heads: int = 8
    num_points: int = 4
    num_levels: int = 3
    num_classes: int = 1
    ffn_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        _check(self.num_queries >= 1, "num_queries must be >= 1")
        _check(self.num_layers >= 1, "num_layers must be >= 1")
        _check(self.hidden_dim % self.num_heads == 0, "hidden_dim not divisible by num_heads")
        _check(self.num_classes >= 1, "num_classes must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    input_size: Tuple[int, int] = (320, 320)
    channel_width: int = 128
    backbone_widths: Tuple[int, ...] = (32, 64, 128, 256)
    backbone_depths: Tuple[int, ...] = (1, 1, 2, 1)
    attention_heads: int = 8
    attention_layers: int = 1
    use_gca: bool = True
    gca_reduction: int = 16
    gate_clip: Tuple[float, float] = (0.05, 0.95)
    seg_channels: int = 64
    num_queries: int = 60
    decoder_layers: int = 3
    decoder_heads: int = 8
    decoder_points: int = 4
    num_classes: int = 1
    tasks: Tuple[str, ...] = TASKS

    def __post_init__(self):
        _check(len(self.tasks) >= 1, "at least one task must be enabled")
        _check(len(set(self.tasks)) == len(self.tasks), f"duplicate task in {self.tasks}")
        _check(all(t in TASKS for t in self.tasks), f"unknown task in {self.tasks}")
        # sub-configs validate their own fields
        _ = (self.encoder, self.gca, self.det)
        if self.seg_tasks:
            _ = self.seg

    @property
    def seg_tasks(self):
        return tuple(t for t in SEG_TASKS if t in self.tasks)

    @property
    def has_detection(self):
        return 'detection' in self.tasks

    @property
    def encoder(self):
        return EncoderConfig(input_size=tuple(self.input_size), channel_width=self.channel_width,
                             backbone_widths=tuple(self.backbone_widths),
                             backbone_depths=tuple(self.backbone_depths),
                             attention_heads=self.attention_heads,
                             attention_layers=self.attention_layers)

    @property
    def gca(self):
        return GcaConfig(channels=self.channel_width, reduction_ratio=self.gca_reduction,
                         gate_clip=tuple(self.gate_clip))

    @property
    def seg(self):
        return SegDecoderConfig(in_channels=self.channel_width, proj_channels=self.seg_channels,
                                tasks=self.seg_tasks)

    @property
    def det(self):
        return DetDecoderConfig(hidden_dim=self.channel_width, num_queries=self.num_queries,
                                num_layers=self.decoder_layers, num_heads=self.decoder_heads,
                                num_points=self.decoder_points, num_classes=self.num_classes)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, dikt):
        names = {f.name for f in fields(cls)}
        unknown = set(dikt) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in dikt.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 2.0
    lambda_fl: float = 24.0
    lambda_bce: float = 8.0
    lambda_tv: float = 8.0

    def __post_init__(self):
        for f in fields(self):
            _check(getattr(self, f.name) >= 0, f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    tversky_smooth: float = 1.0
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0
    dn_groups: int = 10
    dn_box_noise: float = 1.0
    dn_label_flip: float = 0.5

    def __post_init__(self):
        _check(self.dn_groups >= 0, "dn_groups must be >= 0")
        _check(0.0 <= self.dn_label_flip <= 1.0, "dn_label_flip must lie in [0, 1]")
        _check(self.dn_box_noise >= 0, "dn_box_noise must be >= 0")
        _check(self.tversky_smooth >= 0, "tversky_smooth must be >= 0")

    def to_dict(self):
        dikt = {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'weights'}
        dikt.update(asdict(self.weights))
        return dikt

    @classmethod
    def from_dict(cls, dikt):
        weight_names = {f.name for f in fields(LossWeights)}
        own_names = {f.name for f in fields(cls)} - {'weights'}
        unknown = set(dikt) - weight_names - own_names
        if unknown:
            raise ConfigError(f"unknown loss keys: {sorted(unknown)}")
        weights = LossWeights(**{k: v for k, v in dikt.items() if k in weight_names})
        return cls(weights=weights, **{k: v for k, v in dikt.items() if k in own_names})
