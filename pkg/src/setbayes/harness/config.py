"""Experiment configuration: named presets, overrides and JSON round-trip."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError, IoError

__all__ = ["EXPERIMENTS", "PRESETS", "ExperimentConfig", "load_config"]

EXPERIMENTS = ("ggp-step", "ggp-trig", "ennf-l63", "ennf-l96")

_GGP_NET = {
    "rank": 8,
    "hidden": [64, 64],
    "self_width": 32,
    "int_width": 32,
    "data_width": 32,
    "batch_size": 64,
    "low_rank_init_scale": 0.1,
}
_GP_OPT = {"gp_starts": 5, "gp_iterations": 500, "gp_lr": 0.05}
_ENNF_NET = {
    "hidden": [64, 64],
    "self_width": 32,
    "int_width": 32,
    "batch_size": 32,
    "lr": 1e-3,
    "residual": True,
    "cosine_decay": True,
    "anomaly_features": True,
}

_STEP = {
    **_GGP_NET,
    **_GP_OPT,
    "n_obs": 30,
    "m_prime": 20,
    "noise_sd": 0.01,
    "n_test": 1000,
    "lr": 3e-4,
}
_TRIG = {
    **_GGP_NET,
    **_GP_OPT,
    "per_axis": 32,
    "m_prime": 32,
    "noise_sd": 0.01,
    "n_slice": 1000,
    "lr": 1e-3,
}
_L63 = {
    **_ENNF_NET,
    "gen_ensemble": 50,
    "train_windows": 150,
    "extra_windows": 50,
    "eval_seeds": 5,
    "fine_tune_epochs": 0,
}
_L96 = {
    **_ENNF_NET,
    "gen_ensemble": 100,
    "train_windows": 150,
    "extra_windows": 50,
    "eval_seeds": 5,
}

PRESETS = {
    "ggp-step": {
        "paper": {**_STEP, "n_tasks": 20000, "epochs": 10, "covariance_epochs": 2, "replicates": 1},
        "desk": {**_STEP, "n_tasks": 2000, "epochs": 80, "covariance_epochs": 20, "replicates": 5},
    },
    "ggp-trig": {
        "paper": {**_TRIG, "n_tasks": 50000, "epochs": 60, "covariance_epochs": 5, "replicates": 1},
        "desk": {**_TRIG, "n_tasks": 5000, "epochs": 300, "covariance_epochs": 10, "replicates": 1},
    },
    "ennf-l63": {
        "paper": {**_L63, "gen_runs": 10, "gen_time": 75.0, "epochs": 2000, "eval_sizes": [2, 4, 6, 8, 10, 12, 14, 16]},
        "desk": {**_L63, "gen_runs": 3, "gen_time": 25.0, "epochs": 300, "eval_sizes": [2, 4, 8, 16]},
    },
    "ennf-l96": {
        "paper": {
            **_L96,
            "gen_runs": 30,
            "gen_time": 30.0,
            "epochs": 2000,
            "fine_tune_epochs": 300,
            "eval_sizes": [2, 4, 8, 16, 24, 32, 48, 64],
        },
        "desk": {**_L96, "gen_runs": 5, "gen_time": 10.0, "epochs": 150, "fine_tune_epochs": 60, "eval_sizes": [8]},
    },
}


@dataclass
class ExperimentConfig:
    """A fully resolved run description.

    ``settings`` always contains every key of the chosen preset, so the
    archived JSON alone is enough to replay the run.
    """

    name: str
    seed: int = 0
    preset: str = "desk"
    out_dir: str = "runs"
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ConfigError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.preset not in PRESETS[self.name]:
            raise ConfigError(f"unknown preset {self.preset!r}; choose paper or desk")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        base = copy.deepcopy(PRESETS[self.name][self.preset])
        unknown = set(self.settings) - set(base)
        if unknown:
            raise ConfigError(f"unknown settings for {self.name}: {sorted(unknown)}")
        for key, value in self.settings.items():
            if type(base[key]) is not type(value) and not (isinstance(base[key], float) and isinstance(value, int)):
                raise ConfigError(f"setting {key!r} expects {type(base[key]).__name__}")
        base.update(self.settings)
        self.settings = base

    def __getitem__(self, key):
        return self.settings[key]

    def with_settings(self, **overrides) -> "ExperimentConfig":
        return ExperimentConfig(self.name, self.seed, self.preset, self.out_dir, {**self.settings, **overrides})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "preset": self.preset,
            "out_dir": self.out_dir,
            "settings": copy.deepcopy(self.settings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict) or "name" not in doc:
            raise ConfigError("config must be a JSON object with a 'name'")
        extra = set(doc) - {"name", "seed", "preset", "out_dir", "settings"}
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        return cls(
            doc["name"],
            doc.get("seed", 0),
            doc.get("preset", "desk"),
            doc.get("out_dir", "runs"),
            dict(doc.get("settings", {})),
        )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)
