# config.py
"""
Configuration: dataclass configs, flat KEY=value files and process environment.

Precedence is dataclass defaults < config file < explicit overrides (CLI
flags). Files use dotenv syntax and are read with python-dotenv; keys are the
field names, case-insensitive. Tuples are comma-separated, pair lists are
written `0-1,2-3`.
"""
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

logger = logging.getLogger(__name__)

C = TypeVar("C")

VARIANTS = ("baseline", "lmim", "glmim")
PHASE_SCHEDULES = ("joint", "backend-then-joint")


# -----------------------------
# ENV
# -----------------------------
def load_environment(path: Optional[str] = None) -> None:
    """Load a .env file (working directory by default) without overriding set variables."""
    load_dotenv(dotenv_path=path, override=False)


def runs_database_url() -> str:
    return (os.getenv("MIM_RUNS_DATABASE_URL") or "").strip()


def log_level() -> str:
    return (os.getenv("MIM_LOG_LEVEL") or "INFO").strip().upper()


def output_dir() -> Path:
    return Path((os.getenv("MIM_OUTPUT_DIR") or "runs").strip())


# -----------------------------
# Configs
# -----------------------------
@dataclass
class ModelConfig:
    frames: int = 12
    image_size: int = 32
    num_classes: int = 10
    frontend_channels: int = 16
    conv3d_kernel: Tuple[int, int, int] = (3, 5, 5)
    conv3d_stride: Tuple[int, int, int] = (1, 2, 2)
    conv3d_padding: Tuple[int, int, int] = (1, 2, 2)
    pool_window: int = 2
    resnet_stem: bool = False
    backbone_channels: Tuple[int, ...] = (16, 32, 32)
    backbone_strides: Tuple[int, ...] = (1, 2, 1)
    gru_hidden: int = 64
    gru_layers: int = 3
    keep_prob: float = 0.5
    frame_weights: bool = False
    weight_head_hidden: int = 64
    lmim_hidden: Optional[int] = None
    gmim_hidden: int = 256

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    @property
    def lmim_width(self) -> int:
        return self.lmim_hidden or 2 * self.feature_channels

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """The full-size layout: 88 px, 29 frames, ResNet18 block spec, 1024 recurrent units."""
        base = dict(
            frames=29,
            image_size=88,
            num_classes=500,
            frontend_channels=64,
            conv3d_kernel=(5, 7, 7),
            conv3d_stride=(1, 2, 2),
            conv3d_padding=(2, 3, 3),
            pool_window=2,
            backbone_channels=(64, 64, 128, 128, 256, 256, 512, 512),
            backbone_strides=(1, 1, 2, 1, 2, 1, 2, 1),
            gru_hidden=1024,
            weight_head_hidden=1024,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "ModelConfig":
        kt, st, pt = self.conv3d_kernel[0], self.conv3d_stride[0], self.conv3d_padding[0]
        if st != 1:
            raise ConfigError(f"conv3d_stride: temporal stride must be 1, got {st}")
        if 2 * pt != kt - 1:
            raise ConfigError(f"conv3d_padding: temporal padding {pt} does not preserve T for kernel {kt}")
        if len(self.backbone_channels) != len(self.backbone_strides) or not self.backbone_channels:
            raise ConfigError("backbone_channels and backbone_strides must be non-empty and of equal length")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        for name in ("frames", "image_size", "num_classes", "gru_hidden", "gru_layers", "pool_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self


@dataclass
class TrainConfig:
    variant: str = "baseline"
    phase_schedule: str = "joint"
    phase1_epochs: int = 2
    epochs: int = 8
    lr_start: float = 1e-4
    lr_floor: float = 1e-5
    patience: int = 3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    head_lr_scale: float = 10.0
    record_wallclock: bool = False

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got '{self.variant}'")
        if self.phase_schedule not in PHASE_SCHEDULES:
            raise ConfigError(f"phase_schedule must be one of {', '.join(PHASE_SCHEDULES)}, got '{self.phase_schedule}'")
        if self.lr_floor > self.lr_start:
            raise ConfigError(f"lr_floor {self.lr_floor} exceeds lr_start {self.lr_start}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (unpaired sampling)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.head_lr_scale <= 0:
            raise ConfigError(f"head_lr_scale must be positive, got {self.head_lr_scale}")
        return self


@dataclass
class SynthSpec:
    num_classes: int = 10
    frames: int = 12
    image_size: int = 32
    window_min: int = 4
    window_max: int = 7
    confusable_pairs: Tuple[Tuple[int, int], ...] = ((0, 1), (2, 3), (4, 5))
    brightness_jitter: float = 0.2
    translation: int = 2
    speed_warp: Tuple[float, float] = (0.7, 1.4)
    noise_std: float = 0.03
    train_per_class: int = 200
    test_per_class: int = 50
    distractor_pool: int = 8
    glyph_distractors: bool = True
    distractor_gain: float = 0.5
    seed: int = 0
    test_index_offset: int = 1_000_000

    def validate(self) -> "SynthSpec":
        if self.window_min < 2:
            raise ConfigError(f"window_min must be >= 2, got {self.window_min}")
        if self.window_max > self.frames or self.window_max < self.window_min:
            raise ConfigError(f"window_max must lie in [window_min, frames], got {self.window_max}")
        if self.num_classes < 1 or self.image_size < 8:
            raise ConfigError("num_classes must be >= 1 and image_size >= 8")
        seen = set()
        for a, b in self.confusable_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ConfigError(f"confusable pair {a}-{b} does not reference two valid classes")
            if a in seen or b in seen:
                raise ConfigError(f"class in pair {a}-{b} already belongs to another confusable pair")
            seen.update((a, b))
        lo, hi = self.speed_warp
        if not 0 < lo <= hi:
            raise ConfigError(f"speed_warp must satisfy 0 < lo <= hi, got {self.speed_warp}")
        if not 0.0 <= self.distractor_gain <= 1.0:
            raise ConfigError(f"distractor_gain must lie in [0, 1], got {self.distractor_gain}")
        if self.distractor_pool < 0:
            raise ConfigError(f"distractor_pool must be >= 0, got {self.distractor_pool}")
        return self


# -----------------------------
# Coercion and files
# -----------------------------
def _coerce(tp: Any, raw: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:
            if text.lower() in ("", "none", "null"):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _coerce(inner, text, key)
        if tp is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp in (int, float, str):
            return tp(text)
        if origin is tuple:
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                elem = args[0]
                if typing.get_origin(elem) is tuple:
                    return tuple(tuple(int(v) for v in p.split("-")) for p in parts)
                return tuple(_coerce(elem, p, key) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(_coerce(a, p, key) for a, p in zip(args, parts))
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse '{raw}' ({e})") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def build_config(cls: Type[C], values: Mapping[str, Any], base: Optional[C] = None) -> C:
    """Apply `values` (strings or typed) on top of `base` (or defaults); unknown keys are an error."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    updates: Dict[str, Any] = {}
    for raw_key, raw in values.items():
        if raw is None:
            continue
        key = raw_key.strip().lower().replace("-", "_")
        if key not in names:
            raise ConfigError(f"unknown {cls.__name__} key '{raw_key}'")
        updates[key] = _coerce(hints[key], raw, key)
    start = base if base is not None else cls()
    return dataclasses.replace(start, **updates)


def read_config_file(path: str) -> Dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(p)
    return {k: v for k, v in values.items() if v is not None}


def split_sections(values: Mapping[str, str], *classes: type) -> Tuple[Dict[str, str], ...]:
    """Route the keys of one flat file to the config classes that own them."""
    owned = [{f.name for f in dataclasses.fields(cls)} for cls in classes]
    out: Tuple[Dict[str, str], ...] = tuple({} for _ in classes)
    for raw_key, v in values.items():
        key = raw_key.strip().lower().replace("-", "_")
        hits = [i for i, names in enumerate(owned) if key in names]
        if not hits:
            raise ConfigError(f"unknown config key '{raw_key}'")
        for i in hits:
            out[i][key] = v
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("-".join(str(v) for v in pair) for pair in value)
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def to_text(cfg: Any) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def from_text(cls: Type[C], text: str) -> C:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key] = value
    return build_config(cls, values)
