"""Sectioned key=value run configuration.

Example::

    [run]
    seed = 7
    out = runs/desk
    horizon = 500

    [grid]
    n_per_cell = 12
    n_train = 2

    [stgcn]
    blocks = 1-8-16, 16-8-16
    epochs = 10

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .grid import PowerGraph, default_network, read_edge_list
from .koopman import LAMBDA1, DeepDMDConfig
from .simulator import MAGNITUDE_CLASSES
from .stgcn import StgcnConfig

# samples skipped at the start of each training series: the 0.25 s forcing pulse at 50/s
TRAIN_START = 13


@dataclass
class GridSpec:
    cases: tuple[int, ...] = (1, 2, 3, 4, 5)
    classes: tuple[str, ...] = tuple(MAGNITUDE_CLASSES)
    n_per_cell: int = 12
    n_train: int = 2


@dataclass
class SweepSpec:
    windows: tuple[int, ...] = (50, 100, 150, 200)
    axis: str = "activation"
    values: tuple = ("tanh", "relu", "sigmoid")


@dataclass
class RunConfig:
    seed: int
    out: Path
    network: Optional[Path] = None
    dataset: Optional[Path] = None
    snr_db: Optional[float] = 85.0
    sample_rate: float = 50.0
    duration: float = 14.0
    horizon: int = 500
    origin: Optional[int] = None
    grid: GridSpec = field(default_factory=GridSpec)
    lambda1: float = LAMBDA1
    train_start: int = TRAIN_START
    deep_dmd: DeepDMDConfig = field(default_factory=DeepDMDConfig)
    stgcn: StgcnConfig = field(default_factory=lambda: StgcnConfig(train_start=TRAIN_START))
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        if self.network is not None and not Path(self.network).exists():
            raise ConfigError(f"network file {self.network} does not exist")

    @property
    def dataset_dir(self) -> Path:
        return self.dataset if self.dataset is not None else self.out / "dataset"

    @property
    def models_dir(self) -> Path:
        return self.out / "models"

    def graph(self) -> PowerGraph:
        return default_network() if self.network is None else read_edge_list(self.network)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _optional(conv):
    def f(s: str):
        return None if s.strip().lower() in ("", "none") else conv(s)
    return f


def _blocks(s: str) -> tuple:
    return tuple(tuple(int(c) for c in b.strip().split("-")) for b in s.split(",") if b.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_DEEP = {
    "q": _optional(int), "hidden": _optional(_ints), "activation": str, "lambda1": float, "lambda2": float,
    "epochs": int, "steps_per_epoch": int, "learning_rate": float, "clip_norm": _optional(float),
    "optimizer": str, "batch_size": _optional(int), "seed": int, "zero_last_layer": _bool,
    "normalize": str, "affine": _bool,
}
_STGCN = {
    "m": ("M", int), "kt": ("Kt", int), "blocks": ("blocks", _blocks), "out_channels": ("out_channels", _optional(int)),
    "learning_rate": ("learning_rate", float), "optimizer": ("optimizer", str), "epochs": ("epochs", int),
    "batch_size": ("batch_size", int), "batches_per_epoch": ("batches_per_epoch", _optional(int)),
    "seed": ("seed", int), "clip_norm": ("clip_norm", _optional(float)), "train_start": ("train_start", int),
}


def _section(cp, name: str, spec: dict, where: str) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp.items(name):
        if key not in spec:
            raise ConfigError(f"{where}: unknown key {key!r} in [{name}]")
        target, conv = spec[key] if isinstance(spec[key], tuple) else (key, spec[key])
        try:
            out[target] = conv(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: [{name}] {key}: {e}") from None
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    known = {"run", "grid", "robust_dmd", "deep_dmd", "stgcn", "sweep"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    base = path.parent
    resolve = lambda s: (base / s).resolve() if not Path(s).is_absolute() else Path(s)
    run = _section(cp, "run", {
        "seed": int, "out": resolve, "network": _optional(resolve), "dataset": _optional(resolve),
        "snr_db": _optional(float), "sample_rate": float, "duration": float, "horizon": int,
        "origin": _optional(int),
    }, str(path))
    if "seed" not in run:
        raise ConfigError(f"{path}: [run] seed is required")
    if "out" not in run:
        raise ConfigError(f"{path}: [run] out is required")
    grid = GridSpec(**_section(cp, "grid", {"cases": _ints, "classes": _strs, "n_per_cell": int, "n_train": int},
                               str(path)))
    bad = [c for c in grid.classes if c not in MAGNITUDE_CLASSES]
    if bad:
        raise ConfigError(f"{path}: unknown magnitude classes {bad}")
    robust = _section(cp, "robust_dmd", {"lambda1": float, "train_start": int}, str(path))
    deep = DeepDMDConfig(**_section(cp, "deep_dmd", _DEEP, str(path)))
    st = _section(cp, "stgcn", _STGCN, str(path))
    st.setdefault("train_start", robust.get("train_start", TRAIN_START))
    try:
        stgcn = StgcnConfig(**st)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    sweep_d = _section(cp, "sweep", {"windows": _ints, "axis": str, "values": _strs}, str(path))
    sweep = SweepSpec(**sweep_d)
    return RunConfig(**run, grid=grid, lambda1=robust.get("lambda1", LAMBDA1),
                     train_start=robust.get("train_start", TRAIN_START), deep_dmd=deep, stgcn=stgcn, sweep=sweep)


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, out=None, horizon: Optional[int] = None) -> RunConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = Path(out).resolve()
    if horizon is not None:
        changes["horizon"] = horizon
    return replace(cfg, **changes) if changes else cfg


__all__ = ["GridSpec", "RunConfig", "SweepSpec", "TRAIN_START", "load_config", "with_overrides"]
