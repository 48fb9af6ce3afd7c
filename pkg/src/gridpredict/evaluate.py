"""Prediction metrics, error-distribution summaries, the (case x magnitude)
scenario-grid runner and the sweep drivers."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyClass,
    IncompatibleModel,
    SeriesTooShort,
    ShapeMismatch,
    TooFewSamples,
    ValidationError,
    ZeroActual,
)
from .grid import PowerGraph
from .koopman import DeepDMDConfig, KoopmanModel, SnapshotPair, fit_deep_dmd
from .simulator import MAGNITUDE_CLASSES, MeasurementSeries, Scenario, SwingParams, default_params, generate_grid, simulate_scenarios
from .stgcn import StgcnConfig, StgcnModel, incremental_predict, stream_predict, train_stgcn

log = logging.getLogger(__name__)

HORIZON = 500  # 10 s at 50 samples/s
MODE_BINS = 101
CONFIDENCE = 0.90
JUMP_FACTOR = 5.0


# ------------------------------------------------------------------ metrics


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.shape != p.shape:
        raise ShapeMismatch(f"actual {a.shape} vs predicted {p.shape}")
    if a.ndim == 1:
        a, p = a[:, None], p[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ShapeMismatch(f"expected (H, n) with H >= 1, got {a.shape}")
    return a, p


def rmse_per_bus(actual, predicted) -> np.ndarray:
    a, p = _pair(actual, predicted)
    return np.sqrt(np.mean((a - p) ** 2, axis=0))


def mape_per_bus(actual, predicted) -> np.ndarray:
    """Mean absolute error relative to the actual value (a fraction, not a
    percentage)."""
    a, p = _pair(actual, predicted)
    if np.any(a == 0):
        raise ZeroActual("MAPE undefined where the actual value is zero")
    return np.mean(np.abs((a - p) / a), axis=0)


def worst_case(metrics) -> float:
    m = np.asarray(metrics, dtype=np.float64).ravel()
    if m.size == 0:
        raise ValidationError("worst_case of an empty metric vector")
    return float(m.max())


def mode_and_ci(samples, confidence: float = CONFIDENCE, bins: int = MODE_BINS) -> tuple[float, tuple[float, float]]:
    """Histogram mode and central empirical percentile band.

    The mode is the centre of the fullest of ``bins`` equal-width bins spanning
    ``[min, max]``; ties go to the bin whose centre is closest to zero.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 10:
        raise TooFewSamples(f"need at least 10 samples, got {x.size}")
    if not 0 < confidence < 1 or bins < 1:
        raise ValidationError("confidence must lie in (0, 1) and bins must be positive")
    tail = 50.0 * (1.0 - confidence)
    lo, hi = np.percentile(x, [tail, 100.0 - tail])
    xmin, xmax = float(x.min()), float(x.max())
    if xmin == xmax:
        return xmin, (xmin, xmin)
    counts, edges = np.histogram(x, bins=bins, range=(xmin, xmax))
    centers = 0.5 * (edges[:-1] + edges[1:])
    top = np.flatnonzero(counts == counts.max())
    best = top[np.argmin(np.abs(centers[top]))]
    return float(centers[best]), (float(lo), float(hi))


# --------------------------------------------------------------- predictors


def frequency_columns(series: MeasurementSeries) -> np.ndarray:
    return np.array([i for i, c in enumerate(series.channel_labels) if c.startswith("freq_")])


class Predictor:
    """Common interface: ``predict(series, origin, H)`` returns frequency
    predictions ``(R, H, n)`` for samples ``origin+1 .. origin+H`` of each
    series, using data up to and including ``origin`` only."""

    name: str = "predictor"
    window: int = 1

    def predict(self, series: Sequence[MeasurementSeries], origin: int, H: int) -> np.ndarray:
        raise NotImplementedError


@dataclass
class PersistencePredictor(Predictor):
    name: str = "persistence"
    window: int = 1

    def predict(self, series, origin, H):
        last = np.stack([s.frequencies[origin] for s in series])
        return np.repeat(last[:, None, :], H, axis=1)


@dataclass
class KoopmanPredictor(Predictor):
    """Lifts the single snapshot at the origin and iterates the operator."""

    model: KoopmanModel = None
    name: str = "koopman"
    window: int = 1

    def predict(self, series, origin, H):
        labels = self.model.channel_labels
        for s in series:
            if s.values.shape[1] != self.model.measurement_dim or (labels and tuple(labels) != tuple(s.channel_labels)):
                raise IncompatibleModel(f"{self.name}: model channels do not match series channels")
        X0 = np.stack([s.values[origin] for s in series])
        P = self.model.predict(X0, H)  # (H, R, C)
        return P[..., frequency_columns(series[0])].transpose(1, 0, 2)


@dataclass
class StgcnPredictor(Predictor):
    """Autoregressive rollout from the last ``M`` frequency samples."""

    model: StgcnModel = None
    name: str = "stgcn"
    streaming: bool = True

    @property
    def window(self) -> int:
        return self.model.config.M

    def predict(self, series, origin, H):
        M = self.model.config.M
        if origin < M - 1:
            raise SeriesTooShort(f"origin {origin} leaves fewer than M={M} samples of history")
        for s in series:
            if s.frequencies.shape[1] != self.model.n:
                raise IncompatibleModel(f"{self.name}: model has {self.model.n} buses, series {s.frequencies.shape[1]}")
        W = np.stack([s.frequencies[origin - M + 1:origin + 1] for s in series])
        roll = stream_predict if self.streaming else incremental_predict
        return roll(self.model, W, H).transpose(1, 0, 2)


def as_predictor(model, name: Optional[str] = None) -> Predictor:
    if isinstance(model, Predictor):
        return model
    if isinstance(model, KoopmanModel):
        return KoopmanPredictor(model=model, name=name or model.kind)
    if isinstance(model, StgcnModel):
        return StgcnPredictor(model=model, name=name or "stgcn")
    raise ValidationError(f"cannot evaluate object of type {type(model).__name__}")


# ------------------------------------------------------------------ records


@dataclass
class PredictionRecord:
    scenario_id: str
    model_id: str
    bus_errors: np.ndarray  # (H, n): actual - predicted, Hz
    horizon: int
    sample_rate: float
    rmse: np.ndarray
    mape: np.ndarray
    case_index: Optional[int] = None
    magnitude_class: Optional[str] = None
    first_step_jump: bool = False

    def __post_init__(self):
        if self.bus_errors.shape[0] != self.horizon or not np.all(np.isfinite(self.bus_errors)):
            raise ValidationError(f"{self.scenario_id}/{self.model_id}: bad error matrix")

    @property
    def worst_rmse(self) -> float:
        return worst_case(self.rmse)

    @property
    def worst_mape(self) -> float:
        return worst_case(self.mape)


def default_origin(predictors: Sequence[Predictor]) -> int:
    return max(p.window for p in predictors) - 1


def evaluate_predictors(
    series: Sequence[MeasurementSeries],
    predictors: Sequence,
    scenarios: Optional[Sequence[Scenario]] = None,
    origin: Optional[int] = None,
    horizon: int = HORIZON,
) -> list[PredictionRecord]:
    """Run every predictor on every series from a shared origin.

    The origin defaults to the largest observation window minus one, so the
    window-based and snapshot-based predictors forecast the same samples.
    Errors are taken against the measured (noisy) series.
    """
    preds = [as_predictor(p) for p in predictors]
    if not series:
        raise ValidationError("no series to evaluate")
    if not preds:
        raise ValidationError("no models to evaluate")
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    o = default_origin(preds) if origin is None else int(origin)
    T = min(len(s) for s in series)
    if o < 0 or o + horizon >= T:
        raise SeriesTooShort(f"origin {o} + horizon {horizon} exceeds series length {T}")
    if scenarios is not None and len(scenarios) != len(series):
        raise ValidationError("one scenario per series required")
    actual = np.stack([s.frequencies[o + 1:o + 1 + horizon] for s in series])  # (R, H, n)
    hist_std = np.stack([s.frequencies[:o + 1].std(axis=0) for s in series])
    last = np.stack([s.frequencies[o] for s in series])
    records = []
    for p in preds:
        P = p.predict(series, o, horizon)
        jump = np.abs(P[:, 0] - last) > JUMP_FACTOR * np.maximum(hist_std, 1e-12)
        for r, s in enumerate(series):
            sc = scenarios[r] if scenarios is not None else None
            records.append(PredictionRecord(
                scenario_id=sc.name if sc is not None else f"series_{r:03d}",
                model_id=p.name,
                bus_errors=actual[r] - P[r],
                horizon=horizon,
                sample_rate=s.sample_rate,
                rmse=rmse_per_bus(actual[r], P[r]),
                mape=mape_per_bus(actual[r], P[r]),
                case_index=None if sc is None else sc.case_index,
                magnitude_class=None if sc is None else sc.magnitude_class,
                first_step_jump=bool(jump[r].any()),
            ))
    return records


# ------------------------------------------------------------------- report


def _summary(arr: np.ndarray, axis: int, confidence: float, bins: int) -> dict:
    """Mode/CI of ``arr`` pooled over every axis except ``axis``."""
    moved = np.moveaxis(arr, axis, 0).reshape(arr.shape[axis], -1)
    out = {"mode": [], "lo": [], "hi": []}
    for row in moved:
        try:
            m, (lo, hi) = mode_and_ci(row, confidence, bins)
        except TooFewSamples:
            m = lo = hi = None  # too few pooled errors for a histogram
        out["mode"].append(m)
        out["lo"].append(lo)
        out["hi"].append(hi)
    return out


@dataclass
class GridReport:
    rows: list[dict]
    distributions: dict = field(default_factory=dict)
    scenarios: list[dict] = field(default_factory=list)

    CSV_FIELDS = ("model", "case_index", "magnitude_class", "n_scenarios", "rmse_worst_mean", "mape_worst_mean",
                  "rmse_worst_median", "mape_worst_median", "first_step_jumps")

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord], confidence: float = CONFIDENCE,
                     bins: int = MODE_BINS) -> "GridReport":
        if not records:
            raise ValidationError("no prediction records")
        models = list(dict.fromkeys(r.model_id for r in records))
        cells = {}
        for r in records:
            cells.setdefault((r.model_id, r.case_index, r.magnitude_class), []).append(r)
        order = {m: i for i, m in enumerate(models)}
        mag_order = {m: i for i, m in enumerate(MAGNITUDE_CLASSES)}
        keys = sorted(cells, key=lambda k: (order[k[0]], -1 if k[1] is None else k[1],
                                            mag_order.get(k[2], len(mag_order)), str(k[2])))
        rows = []
        for k in keys:
            rs = cells[k]
            w_rmse = np.array([r.worst_rmse for r in rs])
            w_mape = np.array([r.worst_mape for r in rs])
            rows.append({
                "model": k[0], "case_index": k[1], "magnitude_class": k[2], "n_scenarios": len(rs),
                "rmse_worst_mean": float(w_rmse.mean()), "mape_worst_mean": float(w_mape.mean()),
                "rmse_worst_median": float(np.median(w_rmse)), "mape_worst_median": float(np.median(w_mape)),
                "first_step_jumps": int(sum(r.first_step_jump for r in rs)),
            })
        dist = {}
        for m in models:
            E = np.stack([r.bus_errors for r in records if r.model_id == m])  # (R, H, n)
            dist[m] = {
                "temporal": _summary(E, 1, confidence, bins),
                "spatial": _summary(E, 2, confidence, bins),
            }
        scen = [{
            "scenario": r.scenario_id, "model": r.model_id, "case_index": r.case_index,
            "magnitude_class": r.magnitude_class, "rmse_worst": r.worst_rmse, "mape_worst": r.worst_mape,
            "rmse_per_bus": r.rmse.tolist(), "first_step_jump": r.first_step_jump,
        } for r in records]
        return cls(rows, dist, scen)

    def cell(self, model: str, case_index, magnitude_class) -> dict:
        for r in self.rows:
            if (r["model"], r["case_index"], r["magnitude_class"]) == (model, case_index, magnitude_class):
                return r
        raise KeyError((model, case_index, magnitude_class))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.rows:
            w.writerow([repr(r[f]) if isinstance(r[f], float) else ("" if r[f] is None else r[f])
                        for f in self.CSV_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "distributions": self.distributions, "scenarios": self.scenarios},
                          sort_keys=True, indent=1)


def evaluate_records(records, confidence: float = CONFIDENCE, bins: int = MODE_BINS) -> GridReport:
    return GridReport.from_records(records, confidence, bins)


def run_scenario_grid(
    g: PowerGraph,
    models: Sequence,
    n_test: int,
    seed: int,
    n_train: int = 0,
    params: Optional[SwingParams] = None,
    snr_db: Optional[float] = 85.0,
    duration: float = 14.0,
    horizon: int = HORIZON,
    origin: Optional[int] = None,
    cases: Sequence[int] = (1, 2, 3, 4, 5),
    classes: Sequence[str] = tuple(MAGNITUDE_CLASSES),
) -> GridReport:
    """Simulate ``n_test`` held-out scenarios per (case, magnitude) cell and
    score every model on them.

    Scenarios are drawn from the same per-cell LHS design as training data
    generated with ``generate_grid(g, n_train + n_test, seed, n_train)``; only
    the ``test`` part is simulated here, so the two never overlap.
    """
    if n_test < 1:
        raise ValidationError("n_test must be at least 1")
    params = default_params(g) if params is None else params
    scen = [s for s in generate_grid(g, n_train + n_test, seed, n_train, snr_db, params, cases, classes)
            if s.split == "test"]
    if not scen:
        raise EmptyClass("grid produced no test scenarios")
    series = simulate_scenarios(g, params, scen, duration)
    return GridReport.from_records(evaluate_predictors(series, models, scen, origin, horizon))


# ------------------------------------------------------------------- sweeps


def _median_worst_rmse(P: np.ndarray, series, origin: int, H: int) -> tuple[float, float]:
    w = [worst_case(rmse_per_bus(s.frequencies[origin + 1:origin + 1 + H], P[r])) for r, s in enumerate(series)]
    return float(np.median(w)), float(np.mean(w))


def observation_window_sweep(
    train: Sequence[MeasurementSeries],
    test: Sequence[MeasurementSeries],
    windows: Sequence[int],
    config: StgcnConfig,
    graph: PowerGraph,
    horizon: int = HORIZON,
) -> list[dict]:
    """One STGCN per window length ``M`` (same data and seed); each predicts
    from origin ``M - 1``, i.e. right after its observation window closes."""
    if not windows:
        raise ValidationError("no window lengths given")
    rows = []
    for M in windows:
        cfg = replace(config, M=int(M))
        model = train_stgcn(train, cfg, graph)
        o = cfg.M - 1
        P = StgcnPredictor(model=model).predict(test, o, horizon)
        med, mean = _median_worst_rmse(P, test, o, horizon)
        rows.append({"M": cfg.M, "seconds": cfg.M / test[0].sample_rate, "rmse_worst_median": med,
                     "rmse_worst_mean": mean, "final_loss": model.training_meta["final_loss"]})
        log.info("window sweep M=%d rmse %.4g", cfg.M, med)
    return rows


SWEEP_AXES = ("layers", "width", "activation", "batch")


def _sweep_config(base: DeepDMDConfig, axis: str, value, n: int) -> DeepDMDConfig:
    hidden = base.hidden or (2 * n,) * 3
    if axis == "layers":
        return replace(base, hidden=(hidden[0],) * int(value))
    if axis == "width":
        return replace(base, hidden=(int(value),) * len(hidden))
    if axis == "activation":
        return replace(base, activation=str(value))
    if axis == "batch":
        return replace(base, batch_size=None if value in (None, "full") else int(value))
    raise ValidationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def hyperparameter_sweep(
    pair: SnapshotPair,
    axis: str,
    values: Sequence,
    test: Sequence[MeasurementSeries],
    base: DeepDMDConfig = DeepDMDConfig(),
    origin: int = 199,
    horizon: int = HORIZON,
) -> list[dict]:
    """Train one deepDMD per value of ``axis`` on shared data and seed and
    report the held-out median worst-case frequency RMSE."""
    if not values:
        raise ValidationError("no sweep values given")
    rows = []
    for v in values:
        cfg = _sweep_config(base, axis, v, pair.n)
        model = fit_deep_dmd(pair, cfg, channel_labels=test[0].channel_labels)
        P = KoopmanPredictor(model=model).predict(test, origin, horizon)
        med, mean = _median_worst_rmse(P, test, origin, horizon)
        rows.append({"axis": axis, "value": v, "rmse_worst_median": med, "rmse_worst_mean": mean,
                     "final_loss": model.training_meta["final_loss"]})
        log.info("sweep %s=%s rmse %.4g", axis, v, med)
    return rows


def records_to_dicts(records: Sequence[PredictionRecord]) -> list[dict]:
    out = []
    for r in records:
        d = asdict(r)
        for k in ("bus_errors", "rmse", "mape"):
            d[k] = np.asarray(d[k]).tolist()
        out.append(d)
    return out
