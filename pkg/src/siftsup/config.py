"""Configuration loading and merge utilities for siftsup."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from siftsup.errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python 3.10
    import tomli as tomllib

CONFIG_FILENAME = "siftsup.toml"
# Attention resolutions (grid_h, grid_w) for 512x384 inputs: latent at 1/8, then successive halvings.
DEFAULT_RESOLUTIONS: tuple[tuple[int, int], ...] = ((64, 48), (32, 24), (16, 12), (8, 6))


@dataclass
class SiftParams:
    scales_per_octave: int = 3
    sigma: float = 1.6
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    peak_ratio: float = 0.8
    max_orientations: int = 4
    min_octave_size: int = 16
    border: int = 5
    upsample: bool = False
    ratio: float = 0.75

    def validate(self) -> None:
        if self.scales_per_octave < 1:
            raise ConfigError("sift.scales_per_octave must be >= 1")
        if self.sigma <= 0 or self.assumed_blur < 0:
            raise ConfigError("sift.sigma must be > 0 and sift.assumed_blur >= 0")
        if self.contrast_threshold < 0 or self.edge_threshold <= 1:
            raise ConfigError("sift.contrast_threshold must be >= 0 and sift.edge_threshold > 1")
        if not 0 < self.peak_ratio <= 1 or self.max_orientations < 1:
            raise ConfigError("sift.peak_ratio must be in (0, 1] and sift.max_orientations >= 1")
        if self.min_octave_size < 8 or self.border < 1:
            raise ConfigError("sift.min_octave_size must be >= 8 and sift.border >= 1")
        if not 0 < self.ratio < 1:
            raise ConfigError("sift.ratio must be in (0, 1)")


@dataclass
class FilterConfig:
    angle_max_deg: float = 45.0
    scale_ratio_min: float = 0.44
    scale_ratio_max: float = 2.25
    ransac_reproj_px: float = 3.0
    ransac_iters: int = 2000
    ransac_seed: int = 0
    min_matches_for_ransac: int = 4

    def validate(self) -> None:
        if not 0 < self.angle_max_deg <= 180:
            raise ConfigError("filter.angle_max_deg must be in (0, 180]")
        if not 0 < self.scale_ratio_min <= self.scale_ratio_max:
            raise ConfigError("filter scale ratio bounds must satisfy 0 < min <= max")
        if self.ransac_reproj_px <= 0:
            raise ConfigError("filter.ransac_reproj_px must be > 0")
        if self.ransac_iters < 1:
            raise ConfigError("filter.ransac_iters must be >= 1")
        if self.min_matches_for_ransac < 4:
            raise ConfigError("filter.min_matches_for_ransac must be >= 4")


def constant_weight(t: int) -> float:
    return 1.0


@dataclass
class LossConfig:
    lambda_sift: float = 0.0005
    eta: int = 500
    epsilon_floor: float = 1e-12
    max_timestep: int = 1000
    omega: Callable[[int], float] = constant_weight

    def validate(self) -> None:
        if self.lambda_sift < 0:
            raise ConfigError("loss.lambda_sift must be >= 0")
        if not 0 <= self.eta <= self.max_timestep:
            raise ConfigError(f"loss.eta must be in [0, {self.max_timestep}]")
        if self.epsilon_floor <= 0:
            raise ConfigError("loss.epsilon_floor must be > 0")


@dataclass
class FeatureSpec:
    """Synthetic query/key features: random Fourier positional encodings plus seeded noise."""

    dim: int = 32
    frequency_scale: float = 6.0
    noise: float = 0.1

    def validate(self) -> None:
        if self.dim < 2 or self.dim % 2:
            raise ConfigError("toy feature dim must be an even number >= 2")
        if self.frequency_scale <= 0 or self.noise < 0:
            raise ConfigError("toy frequency_scale must be > 0 and noise >= 0")


@dataclass
class ToyTrainConfig:
    learning_rate: float = 0.1
    steps: int = 500
    seed: int = 0
    lambda_sift: float = 1.0
    eta: int = 500
    timestep_range: tuple[int, int] = (0, 500)
    heads: int = 2
    layers: int = 1
    init_scale: float = 1.0
    features: FeatureSpec = field(default_factory=FeatureSpec)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("toy.learning_rate must be > 0")
        if self.steps < 1:
            raise ConfigError("toy.steps must be >= 1")
        if self.lambda_sift < 0:
            raise ConfigError("toy.lambda_sift must be >= 0")
        lo, hi = self.timestep_range
        if not 0 <= lo <= hi:
            raise ConfigError("toy.timestep_range must satisfy 0 <= lo <= hi")
        if self.heads < 1 or self.layers < 1:
            raise ConfigError("toy.heads and toy.layers must be >= 1")
        self.features.validate()
        if self.features.dim % self.heads:
            raise ConfigError(f"toy feature dim {self.features.dim} is not divisible by heads {self.heads}")


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    resolutions: tuple[tuple[int, int], ...] = DEFAULT_RESOLUTIONS
    resize: tuple[int, int] | None = None  # (height, width)
    cloth_dir: str = "cloth"
    image_dir: str = "image"
    mask_dir: str | None = None

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("pipeline.workers must be >= 1")
        for gh, gw in self.resolutions:
            if gh < 1 or gw < 1:
                raise ConfigError(f"invalid resolution {gh}x{gw}")
        if self.resize is not None and min(self.resize) < 16:
            raise ConfigError("pipeline.resize must be at least 16x16")


@dataclass
class SiftSupConfig:
    sift: SiftParams = field(default_factory=SiftParams)
    filter: FilterConfig = field(default_factory=FilterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    toy: ToyTrainConfig = field(default_factory=ToyTrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    source_path: Path | None = None

    def validate(self) -> None:
        self.sift.validate()
        self.filter.validate()
        self.loss.validate()
        self.toy.validate()
        self.pipeline.validate()


def discover_config_path(explicit_path: str | None) -> Path | None:
    """Find config path using precedence: explicit > $SIFTSUP_CONFIG > cwd > ~/.config."""
    if explicit_path:
        return Path(explicit_path).expanduser()

    env_path = os.environ.get("SIFTSUP_CONFIG")
    if env_path:
        return Path(env_path).expanduser()

    cwd_path = Path.cwd() / CONFIG_FILENAME
    if cwd_path.exists():
        return cwd_path

    user_path = Path(f"~/.config/siftsup/{CONFIG_FILENAME}").expanduser()
    if user_path.exists():
        return user_path
    return None


def parse_size(raw: str) -> tuple[int, int]:
    """Parse 'HxW' (or 'H,W') into an int pair, first dimension first."""
    parts = raw.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected a size like 512x384, got {raw!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as e:
        raise ConfigError(f"expected a size like 512x384, got {raw!r}") from e


def _pair_list(raw: object, key: str) -> tuple[tuple[int, int], ...]:
    if isinstance(raw, str):
        return tuple(parse_size(part) for part in raw.split(";") if part.strip())
    if isinstance(raw, list) and all(isinstance(p, (list, tuple)) and len(p) == 2 for p in raw):
        return tuple((int(a), int(b)) for a, b in raw)
    raise ConfigError(f"{key} must be a list of [h, w] pairs or a 'HxW;HxW' string")


def _coerce(target: object, name: str, value: object, key: str) -> object:
    current = getattr(target, name)
    if name in ("resolutions",):
        return _pair_list(value, key)
    if name in ("timestep_range", "resize"):
        if isinstance(value, str):
            return parse_size(value)
        if isinstance(value, list) and len(value) == 2:
            return int(value[0]), int(value[1])
        raise ConfigError(f"{key} must be a two-element list or 'AxB' string")
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def _apply_section(target: object, values: dict, prefix: str, strict: bool = True) -> set[str]:
    """Set dataclass fields from *values*; returns the keys consumed."""
    names = {f.name for f in dataclasses.fields(target) if f.name not in ("omega", "features")}
    used = set()
    for key, value in values.items():
        if key not in names:
            if strict:
                raise ConfigError(f"Unknown config key: {prefix}.{key}")
            continue
        setattr(target, key, _coerce(target, key, value, f"{prefix}.{key}"))
        used.add(key)
    return used


def load_config(path: Path | None) -> SiftSupConfig:
    """Load and validate a TOML config file. Returns defaults when path is None.

    A flat ``key = value`` file is accepted: each top-level key is assigned to every
    section that declares it.
    """
    cfg = SiftSupConfig()
    if path is None:
        return cfg

    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid config file {path}: {e}") from e

    sections = {
        "sift": cfg.sift,
        "filter": cfg.filter,
        "loss": cfg.loss,
        "toy": cfg.toy,
        "pipeline": cfg.pipeline,
    }

    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    consumed: set[str] = set()
    for name, target in sections.items():
        consumed |= _apply_section(target, flat, name, strict=False)
    unknown = set(flat) - consumed
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")

    for name, target in sections.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        if name == "toy" and isinstance(section.get("features"), dict):
            section = dict(section)
            _apply_section(cfg.toy.features, section.pop("features"), "toy.features")
        _apply_section(target, section, name)

    extra_tables = [k for k, v in data.items() if isinstance(v, dict) and k not in sections]
    if extra_tables:
        raise ConfigError(f"Unknown config sections: {', '.join(sorted(extra_tables))}")

    # pipeline.seed seeds RANSAC and the toy trainer unless their sections set their own
    if "seed" in flat or "seed" in data.get("pipeline", {}):
        if "ransac_seed" not in data.get("filter", {}):
            cfg.filter.ransac_seed = cfg.pipeline.seed
        if "seed" not in data.get("toy", {}):
            cfg.toy.seed = cfg.pipeline.seed

    cfg.validate()
    cfg.source_path = path
    return cfg
