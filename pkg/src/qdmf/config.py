"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .quant import SUPPORTED_BITS


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    # data
    dataset: str = ""
    data_points: int = 10000
    data_modes: int = 8
    data_radius: float = 2.0
    data_std: float = 0.15
    # schedule and model
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.1
    hidden: int = 128
    depth: int = 4
    emb_dim: int = 32
    # teacher training
    epochs: int = 150
    teacher_lr: float = 1e-3
    teacher_batch: int = 256
    # quantization
    bits_w: int = 4
    bits_a: int = 4
    rank: int = 4
    calib_batch: int = 64
    talsq: bool = True
    # fine-tuning
    iterations: int = 2000
    batch: int = 64
    lr: float = 5e-4
    lr_weight_scale: float = 5e-5
    lr_act_scale: float = 5e-3
    scale_aware: bool = True
    # sampling and evaluation
    steps: int = 100
    n_samples: int = 1000
    n_trajectories: int = 256
    # bench
    bench_shapes: str = "64x128x128,256x128x128,256x512x512"
    bench_bits: str = "2,4,8"
    bench_repetitions: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("bits_w", "bits_a"):
            if getattr(self, name) not in SUPPORTED_BITS:
                raise ConfigurationError(f"{name} must be one of {SUPPORTED_BITS}, got {getattr(self, name)}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        positive = ("T", "hidden", "depth", "emb_dim", "epochs", "teacher_batch", "calib_batch",
                    "batch", "steps", "n_samples", "n_trajectories", "bench_repetitions",
                    "data_points", "data_modes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("teacher_lr", "lr", "lr_weight_scale", "lr_act_scale"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rank < 0 or self.iterations < 0 or self.seed < 0:
            raise ConfigurationError("rank, iterations and seed must be non-negative")
        if self.steps > self.T:
            raise ConfigurationError(f"steps {self.steps} exceed T {self.T}")
        if self.emb_dim % 2:
            raise ConfigurationError("emb_dim must be even")
        self.shapes()
        self.bits_list()

    def shapes(self) -> list[tuple[int, int, int]]:
        try:
            out = [tuple(int(v) for v in s.split("x")) for s in self.bench_shapes.split(",") if s.strip()]
        except ValueError:
            raise ConfigurationError(f"bad bench_shapes {self.bench_shapes!r}") from None
        if not out or any(len(s) != 3 or min(s) < 1 for s in out):
            raise ConfigurationError(f"bench_shapes must be m x k x n triples, got {self.bench_shapes!r}")
        return out

    def bits_list(self) -> list[int]:
        try:
            out = [int(v) for v in self.bench_bits.split(",") if v.strip()]
        except ValueError:
            raise ConfigurationError(f"bad bench_bits {self.bench_bits!r}") from None
        if not out or any(b not in (2, 4, 8) for b in out):
            raise ConfigurationError(f"bench_bits must be drawn from 2, 4, 8, got {self.bench_bits!r}")
        return out

    def replace(self, **changes) -> "RunConfig":
        _check_keys(changes)
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def _check_keys(keys) -> None:
    known = _field_types()
    unknown = sorted(set(keys) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")


def _coerce(key: str, raw: str):
    kind = _field_types()[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        _check_keys([key])
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    """Config from ``path`` (if any) with ``overrides`` applied on top; ``None`` overrides are ignored."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        values = parse_config(path.read_text())
    overrides = {k: v for k, v in overrides.items() if v is not None}
    _check_keys(overrides)
    values.update(overrides)
    return RunConfig(**values)
