"""YAML experiment and grid configs, validated with key-path error messages."""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .losses import LossSpec, LossSpecError
from .operators import DCT_RATES
from .train import TrainConfig
from .unrolled import ALGORITHMS

DEFAULTS: dict[str, Any] = {
    "dataset": {"dir": None, "k": 50, "n_test": 2500, "n_train": 18000, "n_val": 4500, "cache": None, "max_images": None},
    "operator": {"kind": "gaussian", "rate": 0.1, "m": None, "seed": 0},
    "noise": {"sigma": 0.0, "seed": 0},
    "plan": {
        "algorithm": "demun",
        "T": 5,
        "residual": True,
        "depth_L": 5,
        "channels": 64,
        "kernel": 3,
        "tie_weights": False,
        "amp_probe_eps": 1e-3,
        "amp_backprop_divergence": False,
    },
    "loss": "iw:1.0",
    "train": {"epochs": 300, "batch_size": 32, "lr": 1e-4, "seed": 0, "clip_norm": None},
    "output": {"dir": None},
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for key in keys[:-1]:
        d = d.setdefault(key, {})
    d[keys[-1]] = value


def get_path(d: dict, dotted: str):
    for key in dotted.split("."):
        d = d[key]
    return d


def _check_keys(raw: dict, defaults: dict, prefix: str = "") -> None:
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a mapping")
            _check_keys(value, defaults[key], path + ".")


def _typed(cfg: dict, path: str, kind, minimum=None, optional=False):
    value = get_path(cfg, path)
    if value is None and optional:
        return None
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(path, f"expected true/false, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a mapping")
        _check_keys(data, DEFAULTS)
        cfg = cls(deep_merge(DEFAULTS, data), Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data, path.parent)

    def validate(self) -> None:
        r = self.raw
        if not r["dataset"]["dir"] and not r["dataset"]["cache"]:
            raise ConfigError("dataset.dir", "an image directory (or dataset.cache) is required")
        _typed(r, "dataset.k", int, 1)
        for key in ("n_test", "n_train", "n_val"):
            _typed(r, f"dataset.{key}", int, 0)
        if r["dataset"]["n_train"] < 1:
            raise ConfigError("dataset.n_train", "must be >= 1")
        _typed(r, "dataset.max_images", int, 1, optional=True)
        if r["operator"]["kind"] not in ("gaussian", "dct"):
            raise ConfigError("operator.kind", f"expected 'gaussian' or 'dct', got {r['operator']['kind']!r}")
        m = _typed(r, "operator.m", int, 1, optional=True)
        if m is None:
            rate = _typed(r, "operator.rate", float)
            if not any(abs(rate - q) < 1e-12 for q in DCT_RATES):
                raise ConfigError("operator.rate", f"must be one of {list(DCT_RATES)} (or give operator.m), got {rate}")
        elif m > r["dataset"]["k"] ** 2:
            raise ConfigError("operator.m", f"must be <= n = k^2 = {r['dataset']['k'] ** 2}")
        _typed(r, "operator.seed", int, 0)
        _typed(r, "noise.sigma", float, 0.0)
        _typed(r, "noise.seed", int, 0)
        if r["plan"]["algorithm"] not in ALGORITHMS:
            raise ConfigError("plan.algorithm", f"expected one of {list(ALGORITHMS)}, got {r['plan']['algorithm']!r}")
        T = _typed(r, "plan.T", int, 1)
        _typed(r, "plan.residual", bool)
        _typed(r, "plan.depth_L", int, 0)
        _typed(r, "plan.channels", int, 1)
        kernel = _typed(r, "plan.kernel", int, 1)
        if kernel % 2 == 0:
            raise ConfigError("plan.kernel", f"must be odd, got {kernel}")
        _typed(r, "plan.tie_weights", bool)
        _typed(r, "plan.amp_probe_eps", float)
        _typed(r, "plan.amp_backprop_divergence", bool)
        try:
            LossSpec.parse(r["loss"]).validate(T)
        except LossSpecError as exc:
            raise ConfigError("loss", str(exc)) from None
        _typed(r, "train.epochs", int, 1)
        _typed(r, "train.batch_size", int, 1)
        _typed(r, "train.lr", float, 0.0)
        _typed(r, "train.seed", int, 0)
        _typed(r, "train.clip_norm", float, 0.0, optional=True)

    def resolve(self, value) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def train_config(self) -> TrainConfig:
        r = self.raw
        op, plan, train = r["operator"], r["plan"], r["train"]
        return TrainConfig(
            algorithm=plan["algorithm"],
            T=plan["T"],
            residual=plan["residual"],
            depth_L=plan["depth_L"],
            channels=plan["channels"],
            kernel=plan["kernel"],
            tie_weights=plan["tie_weights"],
            amp_probe_eps=float(plan["amp_probe_eps"]),
            amp_backprop_divergence=plan["amp_backprop_divergence"],
            loss=LossSpec.parse(r["loss"]).ident,
            operator=op["kind"],
            rate=None if op["m"] is not None else float(op["rate"]),
            m=op["m"],
            operator_seed=op["seed"],
            sigma=float(r["noise"]["sigma"]),
            noise_seed=r["noise"]["seed"],
            epochs=train["epochs"],
            batch_size=train["batch_size"],
            lr=float(train["lr"]),
            seed=train["seed"],
            clip_norm=None if train["clip_norm"] is None else float(train["clip_norm"]),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


@dataclass
class GridSpec:
    base: dict
    axes: dict[str, list]
    seed_mode: str = "shared"  # "shared": every cell uses the base seed; "offset": seed + cell index
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path) -> "GridSpec":
        path = Path(path)
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data, path.parent)

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "GridSpec":
        base_dir = Path(base_dir) if base_dir else Path.cwd()
        if "base_config" in data:
            with open(base_dir / data["base_config"]) as fh:
                base = yaml.safe_load(fh) or {}
        else:
            base = data.get("base", {})
        axes = data.get("axes") or {}
        if not isinstance(axes, dict) or not axes:
            raise ConfigError("axes", "a non-empty mapping of dotted key -> list of values is required")
        for key, values in axes.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"axes.{key}", "expected a non-empty list")
        seed_mode = data.get("seed_mode", "shared")
        if seed_mode not in ("shared", "offset"):
            raise ConfigError("seed_mode", f"expected 'shared' or 'offset', got {seed_mode!r}")
        return cls(base, dict(axes), seed_mode, base_dir)

    def __len__(self) -> int:
        n = 1
        for values in self.axes.values():
            n *= len(values)
        return n

    def cells(self) -> list[tuple[dict, dict]]:
        """(axis assignment, full raw config) per cell, in cartesian order."""
        keys = list(self.axes)
        out = []
        for i, combo in enumerate(itertools.product(*(self.axes[k] for k in keys))):
            raw = copy.deepcopy(self.base)
            assignment = dict(zip(keys, combo))
            for key, value in assignment.items():
                set_path(raw, key, value)
            if self.seed_mode == "offset" and "train.seed" not in assignment:
                seed = raw.get("train", {}).get("seed", DEFAULTS["train"]["seed"])
                set_path(raw, "train.seed", seed + i)
            out.append((assignment, raw))
        return out
