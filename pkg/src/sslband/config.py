"""Run configuration: everything needed to re-create a run from its directory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SplitSpec
from .errors import ConfigError
from .model import ModelConfig
from .optimizer import PruneSchedule
from .train import TrainConfig

LAMBDA_GRID = (10.0, 1.0, 0.1, 0.01, 0.001)
RUN_CONFIG_NAME = "run_config.json"
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ArchSpec:
    """Model settings that do not depend on the data (bands, classes and size do)."""

    conv_blocks: list[tuple[int, int]] = field(default_factory=lambda: [(16, 2), (32, 2)])
    kernel_size: int = 3
    head: str = "gap"
    head_dim: int | None = None
    use_batchnorm: bool = True

    def model_config(self, input_bands: int, num_classes: int, input_size) -> ModelConfig:
        return ModelConfig(
            input_bands=input_bands,
            num_classes=num_classes,
            input_size=tuple(input_size),
            conv_blocks=list(self.conv_blocks),
            kernel_size=self.kernel_size,
            head=self.head,
            head_dim=self.head_dim,
            use_batchnorm=self.use_batchnorm,
        )


@dataclass
class SyntheticSpec:
    num_subjects: int = 10
    cubes_per_subject: int = 6
    num_bands: int = 8
    height: int = 16
    width: int = 16
    informative: list[int] = field(default_factory=lambda: [1, 4, 6])
    snr: float = 10.0
    seed: int = 0


@dataclass
class RunConfig:
    data: str | None = None  # manifest path
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    lambda_grid: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    metric: str = "euclidean"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if any(not np.isfinite(v) or v < 0 for v in self.lambda_grid):
            raise ConfigError("lambda grid values must be finite and >= 0")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"]["conv_blocks"] = [list(b) for b in self.arch.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            if "arch" in d:
                d["arch"] = ArchSpec(**d["arch"])
            if "train" in d:
                t = dict(d["train"])
                if t.get("prune") is not None:
                    t["prune"] = PruneSchedule(**t["prune"])
                d["train"] = TrainConfig(**t)
            if "split" in d:
                d["split"] = SplitSpec(**d["split"])
            if "synthetic" in d:
                d["synthetic"] = SyntheticSpec(**d["synthetic"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from None

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)
