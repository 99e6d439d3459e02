"""Experiment configuration and the flat key-value config file format.

Config files are plain text: one ``key = value`` pair per line, ``#``
comments, blank lines ignored. Keys mirror :class:`ExperimentConfig`
fields; ``alpha_grid`` takes a comma-separated list, booleans accept
true/false/1/0. The seed is mandatory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict
from pathlib import Path

__all__ = ["ConfigError", "ExperimentConfig", "parse_config_file", "build_config", "config_echo"]

PIPELINES = ("baseline", "smooth", "rotate", "smoothrot")
CALIB_SOURCES = ("synthetic", "random-tokens", "archive")
ROTATION_SOURCES = ("hadamard", "archive")


class ConfigError(ValueError):
    """Invalid or missing experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run needs, seeded and reproducible."""

    seed: int
    pipeline: str = "smoothrot"
    alpha: float = 0.5
    alpha_grid: tuple[float, ...] | None = None

    # model
    vocab_size: int = 256
    hidden_dim: int = 64
    intermediate_dim: int = 256
    n_layers: int = 2
    n_heads: int = 4

    # outlier injection
    inject_outliers: bool = True
    outlier_channels: int = 4
    spike_magnitude: float = 1400.0
    outlier_token_fraction: float = 0.02
    outlier_base_scale: float = 0.02

    # quantization
    act_bits: int = 4
    act_clip: float = 0.9
    kv_bits: int = 4
    kv_clip: float = 0.95
    kv_group: int = 128
    weight_bits: int = 4
    weight_method: str = "rtn"
    gptq_damping: float = 0.01
    gptq_block_size: int = 128
    gptq_sequences: int = 8
    gptq_seq_len: int = 128
    quantize_activations: bool = True
    quantize_kv: bool = True
    quantize_weights: bool = True

    # calibration
    calib_sequences: int = 512
    calib_seq_len: int = 512
    calib_source: str = "synthetic"
    calib_archive: str | None = None

    # evaluation
    eval_sequences: int = 2
    eval_seq_len: int = 512

    # rotation
    rotation_source: str = "hadamard"
    rotation_archive: str | None = None

    output_dir: str | None = None

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.alpha_grid is not None:
            for a in self.alpha_grid:
                if not 0.0 <= a <= 1.0:
                    raise ConfigError(f"alpha_grid entry {a} outside [0, 1]")
        if self.calib_source not in CALIB_SOURCES:
            raise ConfigError(
                f"calib_source must be one of {CALIB_SOURCES}, got {self.calib_source!r}"
            )
        if self.calib_source == "archive" and not self.calib_archive:
            raise ConfigError("calib_source=archive requires calib_archive")
        if self.rotation_source not in ROTATION_SOURCES:
            raise ConfigError(
                f"rotation_source must be one of {ROTATION_SOURCES}, got {self.rotation_source!r}"
            )
        if self.rotation_source == "archive" and not self.rotation_archive:
            raise ConfigError("rotation_source=archive requires rotation_archive")
        if self.weight_method not in ("rtn", "gptq"):
            raise ConfigError(f"weight_method must be rtn or gptq, got {self.weight_method!r}")
        for name in ("calib_sequences", "calib_seq_len", "eval_sequences", "eval_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def smoothing_enabled(self) -> bool:
        return self.pipeline in ("smooth", "smoothrot")

    @property
    def rotation_enabled(self) -> bool:
        return self.pipeline in ("rotate", "smoothrot")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_BOOL_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "bool"}
_INT_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "int"}
_FLOAT_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "float"}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key == "alpha_grid":
        if raw.lower() in ("", "none"):
            return None
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"alpha_grid: cannot parse {raw!r}") from exc
    if key in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if key in _FLOAT_FIELDS:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    if raw.lower() == "none":
        return None
    return raw


def parse_config_file(path) -> dict:
    """Parse ``key = value`` lines into a raw override mapping."""
    overrides: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        overrides[key] = _coerce(key, raw)
    return overrides


def build_config(overrides: dict) -> ExperimentConfig:
    """Build a validated config from override values (seed is mandatory)."""
    unknown = set(overrides) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in overrides or overrides["seed"] is None:
        raise ConfigError("seed is mandatory")
    try:
        return ExperimentConfig(**overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_echo(cfg: ExperimentConfig) -> dict:
    """JSON-ready copy of the config for report embedding."""
    echo = asdict(cfg)
    if echo["alpha_grid"] is not None:
        echo["alpha_grid"] = list(echo["alpha_grid"])
    return echo
