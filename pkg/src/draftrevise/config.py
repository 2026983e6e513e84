"""Flat key=value run configuration with strict unknown-key rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config_text"]


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad value, or bad type."""


@dataclass
class RunConfig:
    """Every tunable of the pipeline; a run is a pure function of (config, seed)."""

    seed: int = 0
    precision: str = "float32"            # float32 | float64
    out_dir: str = "out"

    # data
    data_source: str = "sprites"          # sprites | synthetic
    dataset_size: int = 2048              # synthetic: 0 streams fresh samples per step
    eval_size: int = 256
    image_size: int = 16
    channels: int = 3
    downsample_f: int = 4
    n_classes: int = 8
    synthetic_positions: int = 2
    synthetic_depth: int = 2
    synthetic_codebook: int = 3
    structure_seed: int = 0

    # quantizer / autoencoder
    codebook_size: int = 64
    depth: int = 4
    n_z: int = 16
    ae_hidden: int = 64
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    laplace_eps: float = 1e-5
    zero_code: bool = True
    reseed_threshold: float = 0.1
    reseed_warmup: int = 200
    reseed_every: int = 50

    # sequence model
    d_model: int = 128
    n_heads: int = 2
    n_spatial_blocks: int = 4
    n_depth_blocks: int = 2
    d_embed: int = 16
    freeze_code_embed: bool = False
    cond_dropout: float = 0.1

    # training
    batch_size: int = 32
    steps: int = 2000
    lr_init: float = 1e-3
    lr_final: float = 0.0
    weight_decay: float = 0.0001
    log_every: int = 50
    save_every: int = 0
    resume_from: str = ""

    # decoding plan
    t_draft: int = 16
    t_revise: int = 2
    revise_iters: int = 2
    temperature: float = 1.0
    guidance: float = 1.0
    strategy: str = "random"
    n_samples: int = 16
    sample_batch: int = 64
    class_id: int = -1
    dump_stages: bool = False

    # artifacts
    rqvae_checkpoint: str = ""
    transformer_checkpoint: str = ""

    def validate(self) -> "RunConfig":
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.data_source not in ("sprites", "synthetic"):
            raise ConfigError("data_source must be sprites or synthetic")
        if self.strategy not in ("random", "topc", "topc50"):
            raise ConfigError("strategy must be random, topc, or topc50")
        if self.image_size % self.downsample_f:
            raise ConfigError("image_size must be divisible by downsample_f")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.guidance < 0:
            raise ConfigError("guidance must be non-negative")
        for key in ("batch_size", "steps", "depth", "codebook_size", "n_samples", "sample_batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        return self

    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == "float64" else np.float32

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key=value`` lines (# comments allowed); overrides win."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    if overrides:
        for key, value in overrides.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown override key {key!r}")
            if value is not None:
                values[key] = value
    return RunConfig(**values).validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    text = "" if path is None else Path(path).read_text()
    return parse_config_text(text, overrides)
