"""Run configuration shared by every CLI command."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .nn import TrainConfig

OUTPUT_DIR_ENV = "RELHALLU_OUTPUT_DIR"


def default_output_dir():
    return os.environ.get(OUTPUT_DIR_ENV, "runs")


@dataclass
class RunConfig:
    # dataset
    dataset: str = "rwth"
    source: str = ""
    columns: list = field(default_factory=list)
    timestamp_col: str | None = None
    scales: list | None = None
    window_len: int = 24
    stride: int | None = None
    split_ratio: list = field(default_factory=lambda: [5, 1, 1])
    n_points: int = 500
    noise_std: float = 0.05
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    # network and training
    hidden: list = field(default_factory=lambda: [512] * 5)
    time_dim: int = 64
    batch_size: int = 1024
    max_epochs: int = 8000
    patience: int = 100
    val_interval: int = 1
    val_draws: int = 1
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    save_interval: int = 10
    # evaluation
    max_eval_windows: int | None = None
    max_calib_windows: int | None = None
    mitigation_prompts: int = 20
    mitigation_samples: int = 10
    n_bins: int = 50
    trajectory_metrics: bool = False
    ce_draws: int = 0
    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigError("window_len must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if len(self.split_ratio) != 3 or min(self.split_ratio) < 1:
            raise ConfigError("split_ratio needs three positive integers")
        if self.mitigation_samples < 1:
            raise ConfigError("mitigation_samples must be >= 1")

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            val_interval=self.val_interval,
            val_draws=self.val_draws,
            seed=self.seed,
            max_lr=self.max_lr,
            pct_start=self.pct_start,
            div_factor=self.div_factor,
            final_div_factor=self.final_div_factor,
            hidden=tuple(self.hidden),
            time_dim=self.time_dim,
        )

    def to_dict(self):
        return asdict(self)

    def hash_payload(self):
        """Everything that influences numeric output (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data
