"""
Configuration Schemas Module

Dataclasses for every configurable part of the system. JSON files map onto them
one-to-one; unknown keys are rejected so typos fail fast.
"""
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple, Type, TypeVar
import json
import logging

from utils.error_utils import ConfigurationError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

T = TypeVar("T", bound="ConfigSchema")

NUM_CLASSES = 3
DECODERS = ("plain", "aqs")
AUX_SOURCES = ("n4", "n1")
AUX_TARGETS = ("qa", "building")


class ConfigSchema:
    """Shared JSON round-trip and validation for the configuration dataclasses."""

    @classmethod
    def from_dict(cls: Type[T], values: Dict[str, Any]) -> T:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigurationError(
                f"Unknown keys for {cls.__name__}",
                {'unknown': unknown, 'allowed': sorted(known)}
            )
        defaults = cls()
        converted = {}
        for key, value in values.items():
            # JSON has no tuples; restore them where the default is one.
            if isinstance(getattr(defaults, key), tuple) and isinstance(value, list):
                value = tuple(value)
            converted[key] = value
        config = replace(defaults, **converted)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        pass

    def updated(self: T, **changes) -> T:
        config = replace(self, **changes)
        config.validate()
        return config


def _require(condition: bool, message: str, **details) -> None:
    if not condition:
        raise ConfigurationError(message, details)


@dataclass
class ModelConfig(ConfigSchema):
    """Architecture hyperparameters plus the ablation switches."""
    pretrained_fusion: bool = True
    decoder: str = "aqs"
    aux_enabled: bool = True
    aux_source: str = "n4"
    aux_target: str = "qa"
    decoder_uses_image: bool = False
    image_size: int = 64
    resnet_widths: Tuple[int, int, int, int] = (64, 128, 256, 512)
    resnet_blocks: int = 2
    vit_embed_dim: int = 96
    vit_depth: int = 8
    vit_heads: int = 4
    vit_patch: int = 16
    vit_mlp_ratio: int = 4
    vit_taps: Optional[Tuple[int, int, int, int]] = None
    vit_weights: Optional[str] = None
    aspp_rates: Tuple[int, int, int, int] = (1, 6, 12, 18)
    csam_ratio: int = 8
    csam_kernel: int = 7
    head_channels: int = 64
    seed: int = 0

    PRESETS = ("baseline", "baseline+pif", "baseline+pif+aqsd")

    def validate(self) -> None:
        _require(self.decoder in DECODERS, "decoder must be 'plain' or 'aqs'", decoder=self.decoder)
        _require(self.aux_source in AUX_SOURCES, "aux_source must be 'n4' or 'n1'", aux_source=self.aux_source)
        _require(self.aux_target in AUX_TARGETS, "aux_target must be 'qa' or 'building'",
                 aux_target=self.aux_target)
        _require(len(self.resnet_widths) == 4 and all(w >= 1 for w in self.resnet_widths),
                 "resnet_widths needs four positive entries", resnet_widths=list(self.resnet_widths))
        _require(self.image_size >= 32 and self.image_size % 32 == 0,
                 "image_size must be a positive multiple of 32", image_size=self.image_size)
        _require(self.resnet_blocks >= 1, "resnet_blocks must be at least 1")
        _require(self.vit_heads >= 1 and self.vit_embed_dim % self.vit_heads == 0,
                 "vit_embed_dim must be divisible by vit_heads",
                 embed_dim=self.vit_embed_dim, heads=self.vit_heads)
        _require(self.vit_depth >= 4, "vit_depth must be at least 4 to provide four stages",
                 depth=self.vit_depth)
        _require(self.vit_patch == 16, "the frozen encoder works on 16 x 16 patches", patch=self.vit_patch)
        if self.vit_taps is not None:
            taps = list(self.vit_taps)
            _require(len(taps) == 4 and all(a < b for a, b in zip(taps, taps[1:]))
                     and taps[0] >= 1 and taps[-1] == self.vit_depth,
                     "vit_taps must be four strictly increasing block indices ending at vit_depth",
                     taps=taps, depth=self.vit_depth)
        _require(len(self.aspp_rates) >= 1 and all(r >= 1 for r in self.aspp_rates),
                 "aspp_rates must be positive", rates=list(self.aspp_rates))
        _require(self.csam_ratio >= 1 and self.csam_kernel % 2 == 1,
                 "csam_ratio must be positive and csam_kernel odd",
                 ratio=self.csam_ratio, kernel=self.csam_kernel)

    @property
    def ablation_name(self) -> str:
        if not self.pretrained_fusion:
            return "Baseline" if self.decoder == "plain" else "Baseline + AQSD"
        return "Baseline + PIF" if self.decoder == "plain" else "Baseline + PIF + AQSD"

    @property
    def taps(self) -> Tuple[int, int, int, int]:
        """Blocks whose outputs form the four frozen stages (default L/4, L/2, 3L/4, L)."""
        if self.vit_taps is not None:
            return tuple(self.vit_taps)
        depth = self.vit_depth
        return (depth // 4, depth // 2, (3 * depth) // 4, depth)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """
        Build one of the ablation rows.

        Args:
            name: 'baseline', 'baseline+pif' or 'baseline+pif+aqsd'
            **overrides: Further field overrides
        """
        flags = {
            'baseline': dict(pretrained_fusion=False, decoder="plain"),
            'baseline+pif': dict(pretrained_fusion=True, decoder="plain"),
            'baseline+pif+aqsd': dict(pretrained_fusion=True, decoder="aqs"),
        }
        key = name.lower().replace(" ", "")
        if key not in flags:
            raise ConfigurationError(f"Unknown ablation preset '{name}'", {'presets': list(flags)})
        return cls().updated(**{**flags[key], **overrides})

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Narrow widths for fast tests and smoke runs."""
        base = dict(resnet_widths=(8, 16, 32, 64), resnet_blocks=1, vit_embed_dim=16,
                    vit_depth=4, vit_heads=2, vit_mlp_ratio=2, csam_ratio=4, head_channels=8)
        base.update(overrides)
        return cls().updated(**base)


@dataclass
class LossConfig(ConfigSchema):
    """Weights of the combined cross-entropy + dice objective."""
    ce_weight: float = 0.5
    dice_weight: float = 0.5
    aux_weight: float = 0.4
    dice_smooth: float = 1.0

    def validate(self) -> None:
        _require(self.ce_weight >= 0 and self.dice_weight >= 0 and self.aux_weight >= 0,
                 "loss weights must be non-negative",
                 ce_weight=self.ce_weight, dice_weight=self.dice_weight, aux_weight=self.aux_weight)
        _require(self.dice_smooth >= 0, "dice_smooth must be non-negative")


@dataclass
class OptimizerConfig(ConfigSchema):
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        _require(self.lr > 0, "lr must be positive", lr=self.lr)
        _require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)",
                 beta1=self.beta1, beta2=self.beta2)
        _require(self.eps > 0, "eps must be positive")


@dataclass
class TrainConfig(ConfigSchema):
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    show_progress: bool = True

    def validate(self) -> None:
        _require(self.epochs >= 0, "epochs must be non-negative", epochs=self.epochs)
        _require(self.batch_size >= 1, "batch_size must be positive", batch_size=self.batch_size)


@dataclass
class SceneConfig(ConfigSchema):
    """
    Synthetic scene generation parameters.

    Sizes are in pixels at the configured canvas size. The minimum building area
    scales the 2,500-pixel floor of 512 x 512 tiles down to the canvas.
    """
    height: int = 64
    width: int = 64
    min_buildings: int = 1
    max_buildings: int = 8
    min_building_area: int = 40
    min_side: int = 7
    max_side: int = 16
    rotation_probability: float = 0.5
    placement_attempts: int = 200
    background_level: float = 0.35
    background_texture: float = 0.08
    noise_std: float = 0.03
    roof_range: Tuple[float, float] = (0.6, 0.95)
    satellite_fraction: float = 1006 / 3831
    test_fraction: float = 831 / 3831
    radius_range: Tuple[int, int] = (0, 2)
    erode_probability: float = 0.5
    shift_range: int = 2
    drop_probability: float = 0.1
    blob_probability: float = 0.3
    blob_radius_range: Tuple[int, int] = (2, 5)
    max_blobs: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("rotation_probability", "satellite_fraction", "test_fraction",
                     "erode_probability", "drop_probability", "blob_probability"):
            value = getattr(self, name)
            _require(0.0 <= value <= 1.0, f"{name} must lie in [0, 1]", value=value)
        _require(self.height >= 16 and self.width >= 16, "canvas must be at least 16 x 16",
                 height=self.height, width=self.width)
        _require(1 <= self.min_buildings <= self.max_buildings, "building count range is empty",
                 min_buildings=self.min_buildings, max_buildings=self.max_buildings)
        _require(1 <= self.min_side <= self.max_side <= min(self.height, self.width),
                 "building side range is empty or exceeds the canvas",
                 min_side=self.min_side, max_side=self.max_side)
        _require(self.min_building_area <= self.max_side * self.max_side,
                 "min_building_area cannot be reached with max_side",
                 min_building_area=self.min_building_area, max_side=self.max_side)
        _require(self.placement_attempts >= 1, "placement_attempts must be positive")
        for name in ("radius_range", "blob_radius_range", "roof_range"):
            low, high = getattr(self, name)
            _require(0 <= low <= high, f"{name} is empty", low=low, high=high)
        _require(self.roof_range[1] <= 1.0, "roof_range must lie in [0, 1]")
        _require(self.shift_range >= 0 and self.max_blobs >= 1, "shift_range and max_blobs are out of range")
        _require(self.noise_std >= 0 and self.background_texture >= 0, "noise parameters must be non-negative")

    def perturbations_disabled(self) -> "SceneConfig":
        """Copy of this config whose perturbations leave the mask unchanged."""
        return self.updated(radius_range=(0, 0), shift_range=0, drop_probability=0.0, blob_probability=0.0)


def load_json_config(path: str, schema: Type[T]) -> T:
    """
    Read a JSON file into a configuration dataclass.

    Raises:
        ConfigurationError: If the file is not a JSON object or holds unknown keys
    """
    try:
        with open(path, "r") as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Could not read config from {path}", {'error': str(e)})
    if not isinstance(values, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    logger.info(f"Loaded {schema.__name__} from {path}")
    return schema.from_dict(values)


def save_json_config(path: str, config: ConfigSchema) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2)
