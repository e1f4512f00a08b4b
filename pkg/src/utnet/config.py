"""Run configuration: one JSON document covering model, training and data.

```json
{
  "spec_version": 1,
  "model": {"base_channels": 8, "attention_levels": "1234", "attention": {"reduced_size": 8}},
  "train": {"epochs": 30, "seed": 0},
  "data":  {"size": 64, "n_train": 150, "n_val": 20, "n_test": 200}
}
```

Missing keys take the defaults of the owning dataclass; unknown keys at
any level are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import synthdata
from .errors import ConfigError
from .model import UTNetConfig
from .train import TrainConfig

SPEC_VERSION = 1
TOP_LEVEL_KEYS = {"spec_version", "model", "train", "data", "out_dir"}


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None  # path to an existing manifest; generated from the fields below otherwise
    size: int = 64
    n_train: int = 150
    n_val: int = 20
    n_test: int = 200
    train_vendors: tuple[str, ...] = ("A", "B")
    test_vendors: tuple[str, ...] = synthdata.VENDORS

    def __post_init__(self):
        object.__setattr__(self, "train_vendors", tuple(self.train_vendors))
        object.__setattr__(self, "test_vendors", tuple(self.test_vendors))
        if self.size % 16 or self.size < 16:
            raise ConfigError(f"data.size must be a positive multiple of 16, got {self.size}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be >= 0")

    def make_manifest(self) -> dict:
        if self.manifest is not None:
            return synthdata.load_manifest(self.manifest)
        return synthdata.make_splits(
            n_train=self.n_train, n_test=self.n_test, n_val=self.n_val,
            train_vendors=self.train_vendors, test_vendors=self.test_vendors, size=self.size,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_vendors"], d["test_vendors"] = list(self.train_vendors), list(self.test_vendors)
        return d


@dataclass(frozen=True)
class RunConfig:
    model: UTNetConfig = field(default_factory=UTNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "spec_version": SPEC_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "out_dir": self.out_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "spec_version" not in d:
            raise ConfigError("config is missing 'spec_version'")
        if d["spec_version"] != SPEC_VERSION:
            raise ConfigError(f"unsupported spec_version {d['spec_version']!r}; this build reads {SPEC_VERSION}")
        data = d.get("data") or {}
        bad = set(data) - {f.name for f in fields(DataConfig)}
        if bad:
            raise ConfigError(f"unknown data keys: {sorted(bad)}")
        try:
            return cls(
                model=UTNetConfig.from_dict(d.get("model") or {}),
                train=TrainConfig.from_dict(d.get("train") or {}),
                data=DataConfig(**data),
                out_dir=d.get("out_dir"),
            )
        except TypeError as e:
            raise ConfigError(f"invalid config value: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(doc)


def desk_config(seed: int = 0, baseline: bool = False, epochs: int = 30) -> RunConfig:
    """The CPU-sized setup used by the training acceptance runs."""
    model = UTNetConfig(base_channels=8, attention_levels="1234", baseline_mode=baseline)
    return RunConfig(model=model, train=TrainConfig(epochs=epochs, seed=seed), data=DataConfig())


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
