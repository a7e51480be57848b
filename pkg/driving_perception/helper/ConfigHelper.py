import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Optional, Tuple

from jsonschema import validate
from jsonschema.exceptions import ValidationError

from driving_perception.config import CONFIG_SCHEMA_PATH, PERCEPTION_LOG_LEVEL, LOG_FORMAT, PERCEPTION_OUTPUT_DIR
from driving_perception.exceptions import ConfigError
from driving_perception.network.config import LossConfig, ModelConfig, TASKS
from driving_perception.network.seg_decoder import validate_thresholds

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

DEFAULT_SWEEP_GRID = tuple(round(0.40 + 0.05 * i, 2) for i in range(12))

# Controlled ablation rows: single tasks, segmentation only, plain MTL and MTL with GCA
ABLATIONS = {
    'object_only': {'tasks': ['detection'], 'use_gca': False},
    'drivable_only': {'tasks': ['drivable'], 'use_gca': False},
    'lane_only': {'tasks': ['lane'], 'use_gca': False},
    'segmentation_only': {'tasks': ['drivable', 'lane'], 'use_gca': False},
    'vanilla_mtl': {'tasks': list(TASKS), 'use_gca': False},
    'mtl_gca': {'tasks': list(TASKS), 'use_gca': True},
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 0.01
    lrf: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    clip_max_norm: float = 0.1
    seed: int = 0
    max_steps: Optional[int] = None
    num_workers: int = 0
    eval_interval: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ('lr', 'lrf', 'momentum', 'warmup_momentum', 'warmup_bias_lr'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.clip_max_norm < 0:
            raise ConfigError("weight_decay, warmup_epochs and clip_max_norm must be >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    source: str = 'synthetic'
    train_size: int = 20
    val_size: int = 8
    seed: int = 0
    train_dir: Optional[str] = None
    val_dir: Optional[str] = None

    def __post_init__(self):
        if self.source not in ('synthetic', 'bdd'):
            raise ConfigError(f"unknown data source '{self.source}'")
        if self.source == 'bdd' and not self.train_dir:
            raise ConfigError("data.train_dir is required for the bdd source")
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigError("synthetic split sizes must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    da_threshold: float = 0.45
    ll_threshold: float = 0.9
    iou_threshold: float = 0.5
    score_floor: float = 0.001
    sweep_grid: Tuple[float, ...] = DEFAULT_SWEEP_GRID
    fps_frames: int = 50
    fps_warmup: int = 5

    def __post_init__(self):
        validate_thresholds((self.da_threshold, self.ll_threshold, self.iou_threshold))
        validate_thresholds(self.sweep_grid)
        if self.fps_frames < 1 or self.fps_warmup < 0:
            raise ConfigError("fps_frames must be >= 1 and fps_warmup >= 0")

    @property
    def thresholds(self):
        return self.da_threshold, self.ll_threshold


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = PERCEPTION_OUTPUT_DIR

    def to_dict(self):
        def plain(section):
            return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(section).items()}
        return {'model': self.model.to_dict(), 'loss': self.loss.to_dict(), 'train': plain(self.train),
                'data': plain(self.data), 'eval': plain(self.eval), 'output_dir': self.output_dir}

    def config_hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def default_config_dict():
    return PipelineConfig().to_dict()


def deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _section(cls, dikt):
    names = {f.name for f in fields(cls)}
    unknown = set(dikt) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in dikt.items()})


class ConfigHelper:
    logger = logging.getLogger('ConfigHelper')

    def __init__(self, schema_path=CONFIG_SCHEMA_PATH):
        self.schema_path = Path(schema_path)
        self._schema = None

    @property
    def schema(self):
        if self._schema is None:
            self._schema = json.loads(self.schema_path.read_text(encoding='utf-8'))
        return self._schema

    def validate(self, data):
        try:
            validate(instance=data, schema=self.schema)
        except ValidationError as e:
            location = '/'.join(str(p) for p in e.absolute_path) or '<root>'
            self.logger.error('JSON SCHEMA VALIDATION ERROR at %s: %s', location, e.message)
            raise ConfigError(f"invalid configuration at {location}: {e.message}")
        return data

    def from_dict(self, data):
        """Merge ``data`` over the defaults, validate and build a PipelineConfig."""
        merged = self.validate(deep_merge(default_config_dict(), data))
        return PipelineConfig(model=ModelConfig.from_dict(merged['model']),
                              loss=LossConfig.from_dict(merged['loss']),
                              train=_section(TrainConfig, merged['train']),
                              data=_section(DataConfig, merged['data']),
                              eval=_section(EvalConfig, merged['eval']),
                              output_dir=merged['output_dir'])

    def load(self, path=None, overrides=None):
        data = {}
        if path:
            try:
                data = json.loads(Path(path).read_text(encoding='utf-8'))
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found")
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e.msg} (line {e.lineno})")
            self.logger.info('Loaded configuration from %s', path)
        return self.from_dict(deep_merge(data, overrides))


def apply_ablation(config: PipelineConfig, name):
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation '{name}', expected one of {sorted(ABLATIONS)}")
    preset = ABLATIONS[name]
    model = replace(config.model, tasks=tuple(preset['tasks']), use_gca=preset['use_gca'])
    return replace(config, model=model)


def load_config(path=None, overrides=None, ablation=None):
    config = ConfigHelper().load(path, overrides)
    return apply_ablation(config, ablation) if ablation else config
