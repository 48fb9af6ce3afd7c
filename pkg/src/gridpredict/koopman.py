"""Koopman-operator predictors: Robust DMD and deepDMD with
measurement-inclusive observables."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import neural as nn
from .errors import ConfigError, DimensionMismatch, NonFiniteLoss, SeriesTooShort, ValidationError
from .numerics import iterate_operator, ridge_lstsq
from .simulator import MeasurementSeries

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LAMBDA1 = 0.01
LAMBDA2 = 0.005


@dataclass(frozen=True)
class SnapshotPair:
    Yp: np.ndarray
    Yf: np.ndarray

    def __post_init__(self):
        if self.Yp.shape != self.Yf.shape or self.Yp.ndim != 2 or self.Yp.shape[1] < 1:
            raise DimensionMismatch(f"snapshot matrices must share shape (n, N>=1), got {self.Yp.shape}, {self.Yf.shape}")

    @property
    def n(self) -> int:
        return self.Yp.shape[0]

    @property
    def N(self) -> int:
        return self.Yp.shape[1]

    def permuted(self, perm) -> "SnapshotPair":
        return SnapshotPair(self.Yp[:, perm], self.Yf[:, perm])


SeriesLike = Union[MeasurementSeries, np.ndarray]


def _as_rows(s: SeriesLike) -> np.ndarray:
    return np.asarray(s.values if isinstance(s, MeasurementSeries) else s, dtype=np.float64)


def build_snapshot_matrices(series: Union[SeriesLike, Sequence[SeriesLike]], skip: int = 0) -> SnapshotPair:
    """Stack one-step-shifted snapshots of one or more ``(T, n)`` series.

    Pairs never straddle two series. The first ``skip`` samples of each
    series are dropped (e.g. the interval during which the disturbance is
    still being applied, which is not autonomous dynamics).
    """
    if skip < 0:
        raise ValidationError("skip must be non-negative")
    if isinstance(series, (MeasurementSeries, np.ndarray)):
        series = [series]
    Yp, Yf = [], []
    for s in series:
        X = _as_rows(s)[skip:]
        if X.ndim != 2 or X.shape[0] < 2:
            raise SeriesTooShort(f"each series needs at least 2 samples, got shape {X.shape}")
        Yp.append(X[:-1].T)
        Yf.append(X[1:].T)
    if not Yp:
        raise SeriesTooShort("no series supplied")
    if len({y.shape[0] for y in Yp}) != 1:
        raise DimensionMismatch("all series must have the same channel count")
    return SnapshotPair(np.hstack(Yp), np.hstack(Yf))


# ------------------------------------------------------------ observables


@dataclass
class ObservableNet:
    """Dense network ``psi: R^n -> R^q``; tanh (or other) hidden layers and a
    linear output layer."""

    widths: list[int]
    activations: list[str]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.widths) - 1 or len(self.activations) != len(self.widths) - 2:
            raise ValidationError("widths, activations and weights are inconsistent")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ValidationError(f"layer {i} has shapes {W.shape}, {b.shape}")

    @classmethod
    def init(cls, n: int, q: int, hidden: Sequence[int], activation: str, seed: int,
             zero_last_layer: bool = False) -> "ObservableNet":
        widths = [n, *hidden, q]
        rng = np.random.default_rng(seed)
        W, b = [], []
        for i in range(len(widths) - 1):
            W.append(nn.glorot_uniform(rng, (widths[i], widths[i + 1]), widths[i], widths[i + 1]))
            b.append(np.zeros(widths[i + 1]))
        if zero_last_layer:
            W[-1] = np.zeros_like(W[-1])
        return cls(widths, [activation] * len(hidden), W, b)

    @property
    def n(self) -> int:
        return self.widths[0]

    @property
    def q(self) -> int:
        return self.widths[-1]

    def params(self) -> nn.Params:
        p = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            p[f"W{i}"] = W
            p[f"b{i}"] = b
        return p

    def with_params(self, p: nn.Params) -> "ObservableNet":
        k = len(self.weights)
        return ObservableNet(list(self.widths), list(self.activations),
                             [p[f"W{i}"] for i in range(k)], [p[f"b{i}"] for i in range(k)])

    def forward(self, X: np.ndarray, tape: Optional[nn.GradientTape] = None, params: Optional[nn.Params] = None):
        """``X`` is ``(N, n)``; returns ``(N, q)``."""
        p = self.params() if params is None else params
        h = X
        for i in range(len(self.weights)):
            h = nn.dense(h, p[f"W{i}"], p[f"b{i}"], tape, names=(f"W{i}", f"b{i}"))
            if i < len(self.activations):
                h = nn.activation(h, self.activations[i], tape)
        return h

    def l1(self) -> float:
        return float(sum(np.abs(W).sum() + np.abs(b).sum() for W, b in zip(self.weights, self.biases)))


def lift(x, net: Optional[ObservableNet]) -> np.ndarray:
    """Measurement-inclusive observable ``[x; psi(x)]``; ``net=None`` is the
    identity lifting. ``x`` may be a vector or an ``(N, n)`` batch."""
    x = np.asarray(x, dtype=np.float64)
    if net is None:
        return x.copy()
    if x.shape[-1] != net.n:
        raise DimensionMismatch(f"expected {net.n} measurements, got {x.shape[-1]}")
    psi = net.forward(np.atleast_2d(x))
    out = np.concatenate([np.atleast_2d(x), psi], axis=-1)
    return out[0] if x.ndim == 1 else out


# ------------------------------------------------------------------ model


@dataclass
class Normalization:
    """Per-channel affine scaling. The operator acts on ``(x - shift) / std``;
    the observable network always sees fully standardised inputs."""

    means: np.ndarray
    stds: np.ndarray
    center: bool = True

    @classmethod
    def fit(cls, X: np.ndarray, center: bool = True) -> "Normalization":
        """``X`` is ``(n, N)`` with channels on rows."""
        m = X.mean(axis=1)
        s = X.std(axis=1)
        s = np.where(s > 1e-12 * np.maximum(np.abs(m), 1.0), s, 1.0)
        return cls(m, s, center)

    @classmethod
    def identity(cls, n: int) -> "Normalization":
        return cls(np.zeros(n), np.ones(n), False)

    @property
    def shift(self) -> np.ndarray:
        return self.means if self.center else np.zeros_like(self.means)

    def apply(self, X):
        return (X - self.shift) / self.stds

    def invert(self, Z):
        return Z * self.stds + self.shift

    def standardize(self, X):
        return (X - self.means) / self.stds


@dataclass
class KoopmanModel:
    kind: str
    operator: np.ndarray
    lifting: Optional[ObservableNet]
    measurement_dim: int
    normalization: Normalization
    training_meta: dict = field(default_factory=dict)
    channel_labels: Optional[list[str]] = None
    affine: bool = False  # append a constant observable so K can hold a non-zero fixed point

    def __post_init__(self):
        q = 0 if self.lifting is None else self.lifting.q
        size = self.measurement_dim + q + int(self.affine)
        if self.operator.shape != (size, size):
            raise ValidationError(f"operator must be {size}x{size}, got {self.operator.shape}")

    @property
    def q(self) -> int:
        return 0 if self.lifting is None else self.lifting.q

    def observables(self, X: np.ndarray) -> np.ndarray:
        """Lifted coordinates of raw measurements ``X`` (B, n) -> (B, n+q[+1])."""
        parts = [self.normalization.apply(X)]
        if self.lifting is not None:
            parts.append(self.lifting.forward(self.normalization.standardize(X)))
        if self.affine:
            parts.append(np.ones(X.shape[:-1] + (1,)))
        return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]

    def predict(self, x0, H: int) -> np.ndarray:
        """``H`` predictions after ``x0``: ``(H, n)`` for a vector ``x0`` or
        ``(H, B, n)`` for a batch ``(B, n)``."""
        x0 = np.asarray(x0, dtype=np.float64)
        single = x0.ndim == 1
        X = np.atleast_2d(x0)
        if X.shape[-1] != self.measurement_dim:
            raise DimensionMismatch(f"model expects {self.measurement_dim} measurements, got {X.shape[-1]}")
        if H < 0:
            raise ValidationError("horizon must be non-negative")
        Psi = self.observables(X)  # (B, n+q)
        traj = iterate_operator(self.operator, Psi.T, H)  # (H, n+q, B)
        Z = traj[:, : self.measurement_dim, :].transpose(0, 2, 1)
        out = self.normalization.invert(Z)
        return out[:, 0, :] if single else out

    # ------------------------------------------------------------ json

    def to_dict(self) -> dict:
        lift_d = None
        if self.lifting is not None:
            lift_d = {
                "widths": list(self.lifting.widths),
                "activations": list(self.lifting.activations),
                "weights": [w.tolist() for w in self.lifting.weights],
                "biases": [b.tolist() for b in self.lifting.biases],
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "type": self.kind,
            "n": self.measurement_dim,
            "q": self.q,
            "affine": self.affine,
            "operator": self.operator.reshape(-1).tolist(),
            "lifting": lift_d,
            "normalization": {
                "means": self.normalization.means.tolist(),
                "stds": self.normalization.stds.tolist(),
                "center": self.normalization.center,
            },
            "training_meta": self.training_meta,
            "channel_labels": self.channel_labels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        if d.get("type") not in ("robust_dmd", "deep_dmd"):
            raise ValidationError(f"not a Koopman model: {d.get('type')!r}")
        n, q = int(d["n"]), int(d["q"])
        size = n + q + int(bool(d.get("affine", False)))
        lifting = None
        if d.get("lifting"):
            L = d["lifting"]
            lifting = ObservableNet(list(L["widths"]), list(L["activations"]),
                                    [np.array(w, dtype=float) for w in L["weights"]],
                                    [np.array(b, dtype=float) for b in L["biases"]])
        nd = d["normalization"]
        return cls(
            kind=d["type"],
            operator=np.array(d["operator"], dtype=float).reshape(size, size),
            lifting=lifting,
            measurement_dim=n,
            normalization=Normalization(np.array(nd["means"], dtype=float), np.array(nd["stds"], dtype=float),
                                        bool(nd.get("center", True))),
            training_meta=d.get("training_meta", {}),
            channel_labels=d.get("channel_labels"),
            affine=bool(d.get("affine", False)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def predict_multistep(model: KoopmanModel, x0, H: int) -> np.ndarray:
    return model.predict(x0, H)


# ------------------------------------------------------------ Robust DMD


def _normalization(pair: SnapshotPair, normalize: str) -> Normalization:
    if normalize == "none":
        return Normalization.identity(pair.n)
    if normalize not in ("standard", "scale"):
        raise ConfigError(f"normalize must be standard, scale or none, got {normalize!r}")
    X = np.hstack([pair.Yp, pair.Yf[:, -1:]])
    return Normalization.fit(X, center=normalize == "standard")


def _with_ones(Z: np.ndarray, affine: bool) -> np.ndarray:
    return np.vstack([Z, np.ones((1, Z.shape[1]))]) if affine else Z


def fit_robust_dmd(pair: SnapshotPair, lambda1: float = LAMBDA1, normalize: str = "standard",
                   channel_labels=None, affine: bool = True) -> KoopmanModel:
    """Closed-form ridge-regularised DMD on the identity observables (plus a
    constant when ``affine``)."""
    norm = _normalization(pair, normalize)
    Zp = _with_ones(norm.apply(pair.Yp.T).T, affine)
    Zf = _with_ones(norm.apply(pair.Yf.T).T, affine)
    sol = ridge_lstsq(Zf, Zp, lambda1)
    meta = {
        "lambda1": lambda1,
        "objective": sol.objective_value,
        "residual_gradient_norm": sol.residual_gradient_norm,
        "n_snapshots": pair.N,
        "normalize": normalize,
    }
    return KoopmanModel("robust_dmd", sol.coefficients, None, pair.n, norm, meta,
                        None if channel_labels is None else list(channel_labels), affine)


# --------------------------------------------------------------- deepDMD


@dataclass
class DeepDMDConfig:
    q: Optional[int] = None  # default: n
    hidden: Optional[tuple[int, ...]] = None  # default: three layers of width 2n
    activation: str = "tanh"
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    epochs: int = 50
    steps_per_epoch: int = 10
    learning_rate: float = 1e-3
    clip_norm: Optional[float] = 10.0
    optimizer: str = "sgd"
    batch_size: Optional[int] = None
    seed: int = 0
    zero_last_layer: bool = False
    normalize: str = "standard"
    affine: bool = True

    def resolved(self, n: int) -> "DeepDMDConfig":
        q = n if self.q is None else int(self.q)
        hidden = (2 * n, 2 * n, 2 * n) if self.hidden is None else tuple(int(h) for h in self.hidden)
        if q < 1:
            raise ConfigError("deepDMD needs q >= 1; use fit_robust_dmd for identity observables")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ConfigError("epochs and steps_per_epoch must be non-negative")
        return DeepDMDConfig(**{**asdict(self), "q": q, "hidden": hidden})


class DeepDMDObjective:
    """``||Psi(Yf) - K Psi(Yp)||_F^2 + l1 ||K||_F^2 + l2 ||Theta||_1`` on a
    fixed, already normalised snapshot pair."""

    def __init__(self, net: ObservableNet, norm: Normalization, pair: SnapshotPair, lambda1: float, lambda2: float,
                 affine: bool = False):
        self.net = net
        self.affine = affine
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.n = pair.n
        self.Zp = norm.apply(pair.Yp.T)  # (N, n), operator coordinates
        self.Zf = norm.apply(pair.Yf.T)
        self.Sp = norm.standardize(pair.Yp.T)  # network inputs
        self.Sf = norm.standardize(pair.Yf.T)

    def lifted(self, params: nn.Params, cols=None, tape=None):
        Sp, Sf, Zp, Zf = self.Sp, self.Sf, self.Zp, self.Zf
        if cols is not None:
            Sp, Sf, Zp, Zf = Sp[cols], Sf[cols], Zp[cols], Zf[cols]
        N = Sp.shape[0]
        psi = self.net.forward(np.vstack([Sp, Sf]), tape, params)
        Psi_p = _with_ones(np.hstack([Zp, psi[:N]]).T, self.affine)
        Psi_f = _with_ones(np.hstack([Zf, psi[N:]]).T, self.affine)
        return Psi_p, Psi_f

    def l1(self, params: nn.Params) -> float:
        return float(sum(np.abs(v).sum() for v in params.values()))

    def value(self, K: np.ndarray, params: nn.Params, cols=None) -> float:
        Psi_p, Psi_f = self.lifted(params, cols)
        R = Psi_f - K @ Psi_p
        return float(np.sum(R * R) + self.lambda1 * np.sum(K * K) + self.lambda2 * self.l1(params))

    def gradient(self, K: np.ndarray, params: nn.Params, cols=None) -> tuple[float, nn.Params]:
        """Objective and its gradient w.r.t. the network parameters with K held
        fixed. The L1 subgradient at zero is taken as zero."""
        tape = nn.GradientTape()
        Psi_p, Psi_f = self.lifted(params, cols, tape)
        R = Psi_f - K @ Psi_p
        loss = float(np.sum(R * R) + self.lambda1 * np.sum(K * K) + self.lambda2 * self.l1(params))
        n, q = self.n, self.net.q
        d_p = (-2.0 * K.T @ R)[n:n + q]
        d_f = (2.0 * R)[n:n + q]
        grads = tape.backward(np.vstack([d_p.T, d_f.T]))
        grads = {k: grads[k] + self.lambda2 * np.sign(params[k]) for k in params}
        return loss, grads

    def solve_operator(self, params: nn.Params) -> np.ndarray:
        Psi_p, Psi_f = self.lifted(params)
        return ridge_lstsq(Psi_f, Psi_p, self.lambda1).coefficients


def fit_deep_dmd(pair: SnapshotPair, config: DeepDMDConfig = DeepDMDConfig(), channel_labels=None,
                 wrong_sign_hook: bool = False) -> KoopmanModel:
    """Alternating minimisation: exact ridge solve for K, then a fixed number
    of gradient steps on the network with K frozen.

    Raises
    ------
    NonFiniteLoss
        If the objective becomes NaN/inf; lower the learning rate.
    """
    cfg = config.resolved(pair.n)
    norm = _normalization(pair, cfg.normalize)
    net = ObservableNet.init(pair.n, cfg.q, cfg.hidden, cfg.activation, cfg.seed, cfg.zero_last_layer)
    obj = DeepDMDObjective(net, norm, pair, cfg.lambda1, cfg.lambda2, cfg.affine)
    params = {k: v.copy() for k, v in net.params().items()}
    rng = np.random.default_rng(cfg.seed + 1)
    adam = nn.AdamState()
    N = pair.N
    K = obj.solve_operator(params)
    history = [obj.value(K, params)]
    k_step_increase = 0.0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            cols = None
            if cfg.batch_size is not None and cfg.batch_size < N:
                cols = np.sort(rng.choice(N, size=cfg.batch_size, replace=False))
            _, grads = obj.gradient(K, params, cols)
            if cols is not None:
                grads = {k: g * (N / len(cols)) for k, g in grads.items()}
            if wrong_sign_hook:
                grads = {k: -g for k, g in grads.items()}
            grads = nn.clip_by_global_norm(grads, cfg.clip_norm)
            if cfg.optimizer == "adam":
                params, adam = nn.adam_step(params, grads, adam, cfg.learning_rate)
            else:
                params = nn.sgd_step(params, grads, cfg.learning_rate)
        before = obj.value(K, params)
        if not np.isfinite(before):
            raise NonFiniteLoss(f"deepDMD objective diverged at epoch {epoch}; lower the learning rate")
        K = obj.solve_operator(params)
        after = obj.value(K, params)
        k_step_increase = max(k_step_increase, after - before)
        history.append(after)
        log.debug("deepDMD epoch %d loss %.6g", epoch, after)
    meta = {
        "lambda1": cfg.lambda1,
        "lambda2": cfg.lambda2,
        "epochs": cfg.epochs,
        "final_loss": history[-1],
        "initial_loss": history[0],
        "loss_history": history,
        "max_k_step_increase": k_step_increase,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
    }
    return KoopmanModel("deep_dmd", K, net.with_params(params), pair.n, norm, meta,
                        None if channel_labels is None else list(channel_labels), cfg.affine)


def load_model_dict(d: dict):
    """Dispatch a model JSON document to the right class."""
    if d.get("type") == "stgcn":
        from .stgcn import StgcnModel

        return StgcnModel.from_dict(d)
    return KoopmanModel.from_dict(d)
