"""Run configuration as a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .pipeline import SplitSpec, TrainConfig
from .stgcn import STGCNConfig


@dataclass(frozen=True)
class RunConfig:
    # data
    trips_csv: str = ""
    out_dir: str = "artifacts"
    date_start: str = ""          # empty: midnight before the first ride start
    date_end: str = ""            # empty: midnight after the last ride start
    top_stations: int = 0         # 0 keeps every station
    # graph
    sigma_sq: str = "auto"        # "auto": variance of off-diagonal distances (km^2)
    epsilon: float = 0.5
    # model
    history_steps: int = 12
    horizon_steps: int = 1
    temporal_kernel: int = 3
    channels: str = "1,32,16,32"
    n_blocks: int = 1
    spatial_order: int = 1        # 1: single renormalised operator; K > 1: K Chebyshev terms
    # training
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    precision: str = "float64"
    test_days: int = 3
    val_days: int = 3
    # reporting
    hist_bin_width: float = 0.25

    def __post_init__(self) -> None:
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        try:
            self.channel_tuple
        except ValueError:
            raise ConfigError(f"channels must be four comma-separated ints, got {self.channels!r}") from None
        if self.sigma_sq != "auto":
            try:
                float(self.sigma_sq)
            except ValueError:
                raise ConfigError(f"sigma_sq must be 'auto' or a number, got {self.sigma_sq!r}") from None
        for name in ("batch_size", "max_epochs", "patience", "history_steps", "horizon_steps",
                     "temporal_kernel", "n_blocks", "spatial_order", "test_days", "val_days"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.top_stations < 0:
            raise ConfigError("top_stations must be >= 0")

    @property
    def channel_tuple(self) -> tuple[int, int, int, int]:
        parts = tuple(int(c) for c in self.channels.split(","))
        if len(parts) != 4:
            raise ValueError(self.channels)
        return parts  # type: ignore[return-value]

    @property
    def sigma_sq_value(self) -> float | None:
        return None if self.sigma_sq == "auto" else float(self.sigma_sq)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def model_config(self, n_nodes: int) -> STGCNConfig:
        return STGCNConfig(n_nodes=n_nodes, history_steps=self.history_steps,
                           horizon_steps=self.horizon_steps, temporal_kernel=self.temporal_kernel,
                           channels=self.channel_tuple, n_blocks=self.n_blocks,
                           spatial_order=self.spatial_order)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(test_days=self.test_days, val_days=self.val_days)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def serialize(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def digest(self) -> str:
        """Hash of every setting except ``out_dir``, which only says where results go."""
        text = "".join(line for line in self.serialize().splitlines(keepends=True)
                       if not line.startswith("out_dir ="))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def parse_assignments(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    unknown = sorted(set(pairs) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in pairs.items()}
    return (base or RunConfig()).replace(**values)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return parse_assignments(pairs, base)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
