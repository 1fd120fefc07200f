# config.py

import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .services.errors import ConfigError
from .services.shared_config import (
    ADADELTA_EPS,
    ADADELTA_RHO,
    DEFAULT_INPUT_HEIGHT,
    DEFAULT_MAX_RENDER_WIDTH,
    DEFAULT_PUNCTUATION,
)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class RuntimeSettings(BaseSettings):
    """
    Process-wide settings read from the environment (CTCT_NUMERIC, CTCT_THREADS, ...).
    Command-line flags override these per run.
    """

    numeric: Literal["f32", "f64"] = "f32"
    threads: int = Field(1, ge=1)
    log_level: str = "INFO"
    checked: bool = True

    model_config = SettingsConfigDict(env_prefix="CTCT_", env_file_encoding="utf-8", extra="ignore")


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


# ---------------- Flat key = value files ----------------
def load_flat_config(path: Path) -> Dict[str, str]:
    """Parse a UTF-8 `key = value` file. Blank lines and `#` comment lines are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_flat_config(text, source=str(path))


def parse_flat_config(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def dump_flat_config(values: Dict[str, object]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = ""
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _split_values(value):
    if isinstance(value, str):
        return [v for v in value.replace(",", " ").split() if v]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------- Rendering ----------------
class RenderRanges(_Section):
    """Uniform sampling ranges (min, max) for every rendering parameter."""

    glyph_scale: Tuple[float, float] = (0.9, 1.1)
    stroke_intensity: Tuple[float, float] = (0.85, 1.0)
    stroke_thickness: Tuple[int, int] = (0, 1)
    kerning: Tuple[float, float] = (-1.0, 1.5)
    skew_deg: Tuple[float, float] = (-8.0, 8.0)
    rotation_deg: Tuple[float, float] = (-3.0, 3.0)
    corner_jitter: Tuple[float, float] = (-1.5, 1.5)
    foreground_color: Tuple[float, float] = (0.0, 0.35)
    background_color: Tuple[float, float] = (0.65, 1.0)
    blend_alpha: Tuple[float, float] = (0.8, 1.0)
    texture_strength: Tuple[float, float] = (0.0, 0.5)
    noise_sigma: Tuple[float, float] = (0.0, 0.04)

    @field_validator("*", mode="before")
    @classmethod
    def _parse_range(cls, value):
        return _split_values(value)

    @model_validator(mode="after")
    def _check_order(self):
        for name in type(self).model_fields:
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"inverted range for {name}: {low} > {high}")
        for name in ("stroke_intensity", "foreground_color", "background_color", "blend_alpha", "texture_strength"):
            low, high = getattr(self, name)
            if low < 0.0 or high > 1.0:
                raise ValueError(f"{name} must lie within [0, 1]")
        if self.glyph_scale[0] <= 0.0:
            raise ValueError("glyph_scale must be positive")
        if self.stroke_thickness[0] < 0 or self.noise_sigma[0] < 0.0:
            raise ValueError("stroke_thickness and noise_sigma must be non-negative")
        return self

    @classmethod
    def fixed(cls, **values) -> "RenderRanges":
        """Degenerate ranges (min == max) for every field; unspecified fields use the identity rendering."""
        identity = dict(
            glyph_scale=1.0, stroke_intensity=1.0, stroke_thickness=0, kerning=0.0, skew_deg=0.0,
            rotation_deg=0.0, corner_jitter=0.0, foreground_color=0.0, background_color=1.0,
            blend_alpha=1.0, texture_strength=0.0, noise_sigma=0.0,
        )
        identity.update(values)
        return cls(**{k: (v, v) for k, v in identity.items()})


class RenderSettings(_Section):
    vocabulary: Optional[Path] = None
    atlas: Optional[Path] = None
    backgrounds: Optional[Path] = None
    punctuation: str = DEFAULT_PUNCTUATION
    max_width: int = Field(DEFAULT_MAX_RENDER_WIDTH, ge=1)
    padding: int = Field(4, ge=0)
    background_crop_probability: float = Field(0.5, ge=0.0, le=1.0)
    fg_texture_probability: float = Field(0.3, ge=0.0, le=1.0)
    count: Optional[int] = None
    seed: Optional[int] = None


# ---------------- Model ----------------
def parse_pool(window: str) -> Optional[Tuple[int, int]]:
    window = window.strip().lower()
    if window in ("", "none", "-"):
        return None
    try:
        wh, ww = (int(v) for v in window.split("x"))
    except ValueError:
        raise ValueError(f"pool window must look like '2x1' or 'none', got {window!r}")
    if wh < 1 or ww < 1:
        raise ValueError(f"pool window must be positive, got {window!r}")
    return wh, ww


class ModelConfig(_Section):
    """
    Network shape. The default stack maps a height-32 input to a height-1 feature map:
    seven 3x3/pad-1 convolutions (last one 2x2 valid), square pools after conv 1-2,
    2-high x 1-wide pools after conv 4-5, batch norm after conv 3-4, then two BLSTM layers.
    """

    input_height: int = Field(DEFAULT_INPUT_HEIGHT, ge=1)
    variant: Literal["hybrid", "rnn-only"] = "hybrid"
    conv_channels: List[int] = [64, 128, 256, 256, 512, 512, 512]
    conv_kernels: List[int] = [3, 3, 3, 3, 3, 3, 2]
    conv_pads: List[int] = [1, 1, 1, 1, 1, 1, 0]
    pool_windows: List[str] = ["2x2", "2x2", "none", "2x1", "2x1", "none", "none"]
    batchnorm_after: List[int] = [3, 4]
    blstm_layers: int = Field(2, ge=1)
    blstm_size: int = Field(512, ge=1)
    blstm_size_per_direction: bool = False
    num_classes: int = Field(0, ge=0)

    @field_validator("conv_channels", "conv_kernels", "conv_pads", "batchnorm_after", "pool_windows", mode="before")
    @classmethod
    def _parse_list(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            return []
        return _split_values(value)

    @model_validator(mode="after")
    def _check_shapes(self):
        n = len(self.conv_channels)
        if not (len(self.conv_kernels) == len(self.conv_pads) == len(self.pool_windows) == n):
            raise ValueError("conv_channels, conv_kernels, conv_pads and pool_windows must have equal length")
        if self.variant == "hybrid" and n == 0:
            raise ValueError("the hybrid variant needs at least one convolution")
        for index in self.batchnorm_after:
            if not 1 <= index <= n:
                raise ValueError(f"batchnorm_after refers to missing conv layer {index}")
        if not self.blstm_size_per_direction and self.blstm_size % 2:
            raise ValueError("a concatenated blstm_size must be even")
        pools = [parse_pool(p) for p in self.pool_windows]

        if self.variant == "hybrid":
            height = self.input_height
            for i, (k, p, pool) in enumerate(zip(self.conv_kernels, self.conv_pads, pools), 1):
                height = height + 2 * p - k + 1
                if height < 1:
                    raise ValueError(f"conv{i} leaves no rows")
                if pool is not None:
                    if height % pool[0]:
                        raise ValueError(f"pool{i} height {pool[0]} does not divide {height}")
                    height //= pool[0]
            if height != 1:
                raise ValueError(f"conv stack maps height {self.input_height} to {height}, expected 1")
            last_pool = max((i for i, pool in enumerate(pools) if pool is not None and pool[1] > 1), default=-1)
            for i in range(last_pool + 1):
                if 2 * self.conv_pads[i] != self.conv_kernels[i] - 1:
                    raise ValueError(f"conv{i + 1} changes the width before a pooling layer")
        return self

    @property
    def pools(self) -> List[Optional[Tuple[int, int]]]:
        return [parse_pool(p) for p in self.pool_windows]

    @property
    def hidden_size(self) -> int:
        return self.blstm_size if self.blstm_size_per_direction else self.blstm_size // 2

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1] if self.variant == "hybrid" else self.input_height

    @property
    def width_multiple(self) -> int:
        if self.variant != "hybrid":
            return 1
        multiple = 1
        for pool in self.pools:
            if pool is not None:
                multiple *= pool[1]
        return multiple

    def aligned_width(self, width: int) -> int:
        m = self.width_multiple
        return -(-width // m) * m

    def timesteps(self, width: int) -> int:
        """Number of output frames for an input of the given width (0 if too narrow)."""
        if self.variant != "hybrid":
            return width
        w = self.aligned_width(width)
        for k, p, pool in zip(self.conv_kernels, self.conv_pads, self.pools):
            w = w + 2 * p - k + 1
            if w < 1:
                return 0
            if pool is not None:
                w //= pool[1]
        return max(w, 0)

    @property
    def min_width(self) -> int:
        width = 1
        while self.timesteps(width) < 1:
            width += 1
        return width


# ---------------- Training ----------------
class TrainConfig(_Section):
    manifest: Optional[Path] = None
    labels: Optional[Path] = None
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=1)
    seed: Optional[int] = None
    checkpoint_dir: Path = Path("checkpoints")
    checkpoint_every: int = Field(0, ge=0, description="Batches between checkpoints; 0 checkpoints once per epoch.")
    rho: float = Field(ADADELTA_RHO, gt=0.0, lt=1.0)
    eps: float = Field(ADADELTA_EPS, gt=0.0)
    max_batches: int = Field(0, ge=0, description="Stop after this many batches in total; 0 means no limit.")
    numeric: Optional[Literal["f32", "f64"]] = None
    threads: Optional[int] = Field(None, ge=1)


_PATH_KEYS = ("vocabulary", "atlas", "backgrounds", "manifest", "labels", "checkpoint_dir")


class PipelineConfig(BaseModel):
    """All configuration sections of one run, built from a flat file plus CLI overrides."""

    model_config = ConfigDict(frozen=True)

    render: RenderSettings = RenderSettings()
    ranges: RenderRanges = RenderRanges()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    @classmethod
    def sections(cls) -> Dict[str, type]:
        return {"render": RenderSettings, "ranges": RenderRanges, "model": ModelConfig, "train": TrainConfig}

    @classmethod
    def from_values(cls, values: Dict[str, object]) -> "PipelineConfig":
        routed: Dict[str, Dict[str, object]] = {name: {} for name in cls.sections()}
        for key, value in values.items():
            owners = [name for name, model in cls.sections().items() if key in model.model_fields]
            if not owners:
                raise ConfigError(f"unknown config key {key!r}")
            for owner in owners:
                routed[owner][key] = value
        try:
            return cls(**{name: model(**routed[name]) for name, model in cls.sections().items()})
        except ValidationError as e:
            raise ConfigError(str(e))

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Optional[Dict[str, object]] = None) -> "PipelineConfig":
        """Precedence: override (flag) > file > default. File paths resolve against the file's directory."""
        values: Dict[str, object] = {}
        if path is not None:
            values.update(load_flat_config(path))
            base = Path(path).resolve().parent
            for key in _PATH_KEYS:
                if values.get(key):
                    candidate = Path(str(values[key]))
                    values[key] = candidate if candidate.is_absolute() else base / candidate
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_values(values)


def model_config_to_values(config: ModelConfig) -> Dict[str, object]:
    return {f"model.{k}": v for k, v in config.model_dump().items()}


def model_config_from_values(values: Dict[str, str]) -> ModelConfig:
    fields = {k[len("model."):]: v for k, v in values.items() if k.startswith("model.")}
    try:
        return ModelConfig(**fields)
    except ValidationError as e:
        raise ConfigError(str(e))
