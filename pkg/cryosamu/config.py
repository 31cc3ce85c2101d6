from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Tuple, Union
import logging
import pathlib

from . import constants
from .lib import ConfigError, canonical_hash, load_yaml
from .net.unet import ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    resolution: float = constants.DEFAULT_RESOLUTION
    grid_interval: float = constants.DEFAULT_GRID_INTERVAL
    target_voxel: float = constants.DEFAULT_TARGET_VOXEL
    percentile: float = constants.DEFAULT_PERCENTILE
    percentile_include_zeros: bool = True
    embed_len: int = constants.DEFAULT_EMBED_LEN
    cube_size: int = constants.DEFAULT_CUBE_SIZE
    core_size: int = constants.DEFAULT_CORE_SIZE
    pad: int = constants.DEFAULT_PAD
    model: ModelConfig = field(default_factory=ModelConfig)
    v_atom: float = constants.DEFAULT_ATOM_VOLUME
    peak_fraction: float = constants.DEFAULT_PEAK_FRACTION
    rscc_threshold: float = constants.DEFAULT_RSCC_THRESHOLD
    rscc_min_support: int = constants.DEFAULT_RSCC_MIN_SUPPORT
    seed: int = 0
    batch_size: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    clip: float = 0.5

    def validate(self) -> "PipelineConfig":
        if not 0 < self.resolution <= constants.MAX_RESOLUTION:
            raise ConfigError(f"resolution must be in (0, {constants.MAX_RESOLUTION}]")
        for name in ("grid_interval", "target_voxel", "v_atom", "clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.percentile <= 100:
            raise ConfigError(f"percentile must be in (0, 100], got {self.percentile}")
        if self.embed_len < 1 or self.batch_size < 1:
            raise ConfigError("embed_len and batch_size must be at least 1")
        if not 0 < self.core_size <= self.cube_size or (self.cube_size - self.core_size) % 2:
            raise ConfigError(
                f"cube_size {self.cube_size} / core_size {self.core_size} must leave an even rim")
        if self.pad < (self.cube_size - self.core_size) // 2:
            raise ConfigError(f"pad {self.pad} smaller than the cube rim")
        if self.cube_size % self.model.size_multiple:
            raise ConfigError(
                f"cube_size {self.cube_size} not divisible by {self.model.size_multiple}")
        if not 0 < self.peak_fraction <= 1:
            raise ConfigError(f"peak_fraction must be in (0, 1], got {self.peak_fraction}")
        if not 0 <= self.rscc_threshold < 1:
            raise ConfigError(f"rscc_threshold must be in [0, 1), got {self.rscc_threshold}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def digest(self) -> str:
        return canonical_hash(self.to_dict())


def _merge(cfg: PipelineConfig, values: dict, source: str, sources: Dict[str, str]):
    known = {f.name for f in fields(PipelineConfig)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown configuration key '{key}' ({source})")
        if key == "model":
            if not isinstance(value, dict):
                raise ConfigError(f"'model' must be a mapping ({source})")
            merged = cfg.model.to_dict()
            merged.update(value)
            cfg.model = ModelConfig.from_dict(merged)
        else:
            setattr(cfg, key, value)
        sources[key] = source


def load_config(path: Optional[Union[str, pathlib.Path]] = None,
                overrides: Optional[dict] = None) -> Tuple[PipelineConfig, Dict[str, str]]:
    """
    Defaults, then the config file, then command line overrides (None values
    are ignored). Returns the validated config and where each
    non-default key came from.
    """
    cfg = PipelineConfig()
    sources: Dict[str, str] = {}
    if path is not None:
        _merge(cfg, load_yaml(path), f"file {path}", sources)
    if overrides:
        _merge(cfg, {k: v for k, v in overrides.items() if v is not None}, "flag", sources)
    try:
        cfg.validate()
    except TypeError as e:
        raise ConfigError(f"Invalid configuration value: {e}")
    return cfg, sources
