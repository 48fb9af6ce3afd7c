"""Desk-scale reproduction of the scenario-grid experiment.

Shared by ``scripts/`` and the acceptance suite so both run exactly the same
protocol: simulate a (case x magnitude) grid, train on the first scenarios of
every cell, evaluate all models from a common origin against the noisy
held-out series.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .config import TRAIN_START
from .evaluate import HORIZON, GridReport, PersistencePredictor, as_predictor, evaluate_predictors
from .grid import PowerGraph, default_network
from .koopman import LAMBDA1, DeepDMDConfig, build_snapshot_matrices, fit_deep_dmd, fit_robust_dmd
from .simulator import MAGNITUDE_CLASSES, MeasurementSeries, Scenario, default_params, generate_grid, simulate_scenarios
from .stgcn import StgcnConfig, train_stgcn

log = logging.getLogger(__name__)

# narrower channels than the library default keep a CPU training run near a minute
DESK_STGCN = StgcnConfig(blocks=((1, 8, 16), (16, 8, 16)), optimizer="adam", learning_rate=1e-3,
                         epochs=10, batches_per_epoch=50, train_start=TRAIN_START)


@dataclass
class DeskData:
    graph: PowerGraph
    train: list[MeasurementSeries]
    test: list[MeasurementSeries]
    test_scenarios: list[Scenario]


def simulate_desk_data(g: Optional[PowerGraph] = None, seed: int = 7, n_train: int = 2, n_test: int = 10,
                       duration: float = 14.0, snr_db: Optional[float] = 85.0,
                       cases: Sequence[int] = (1, 2, 3, 4, 5),
                       classes: Sequence[str] = tuple(MAGNITUDE_CLASSES)) -> DeskData:
    g = default_network() if g is None else g
    params = default_params(g)
    scen = generate_grid(g, n_train + n_test, seed, n_train, snr_db, params, cases, classes)
    series = simulate_scenarios(g, params, scen, duration)
    train = [s for sc, s in zip(scen, series) if sc.split == "train"]
    test = [(sc, s) for sc, s in zip(scen, series) if sc.split == "test"]
    return DeskData(g, train, [s for _, s in test], [sc for sc, _ in test])


@dataclass
class FittedModels:
    models: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)


def fit_desk_models(data: DeskData, lambda1: float = LAMBDA1, deep: DeepDMDConfig = DeepDMDConfig(),
                    stgcn: StgcnConfig = DESK_STGCN, train_start: int = TRAIN_START,
                    methods: Sequence[str] = ("robust_dmd", "deep_dmd", "stgcn")) -> FittedModels:
    out = FittedModels()
    labels = data.train[0].channel_labels
    pair = build_snapshot_matrices(data.train, skip=train_start)
    for m in methods:
        t = time.perf_counter()
        if m == "robust_dmd":
            model = fit_robust_dmd(pair, lambda1, channel_labels=labels)
        elif m == "deep_dmd":
            model = fit_deep_dmd(pair, deep, channel_labels=labels)
        elif m == "stgcn":
            model = train_stgcn(data.train, stgcn, data.graph)
        else:
            raise ValueError(f"unknown method {m!r}")
        out.models[m] = model
        out.seconds[m] = time.perf_counter() - t
        log.info("fitted %s in %.1f s", m, out.seconds[m])
    return out


def evaluate_desk(data: DeskData, fitted: FittedModels, origin: Optional[int] = None,
                  horizon: int = HORIZON) -> GridReport:
    predictors = [PersistencePredictor()] + [as_predictor(m, name) for name, m in fitted.models.items()]
    return GridReport.from_records(evaluate_predictors(data.test, predictors, data.test_scenarios, origin, horizon))
