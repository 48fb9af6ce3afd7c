"""Spatio-temporal graph convolutional predictor with incremental
(autoregressive) inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import neural as nn
from .errors import ConfigError, DimensionMismatch, IncompatibleModel, InputTooShort, InsufficientData, NonFiniteLoss
from .grid import PowerGraph, normalized_adjacency
from .simulator import MeasurementSeries

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WINDOW = 200  # 4 s at 50 samples/s


@dataclass
class StgcnConfig:
    M: int = WINDOW
    Kt: int = 3
    # (c_in, c_spatial, c_out) for each of the two ST-blocks
    blocks: tuple = ((1, 32, 64), (64, 32, 64))
    out_channels: Optional[int] = None  # default: c_out of the last block
    learning_rate: float = 1e-3
    optimizer: str = "sgd"
    epochs: int = 20
    batch_size: int = 16
    batches_per_epoch: Optional[int] = None  # None: one pass over all windows
    seed: int = 0
    clip_norm: Optional[float] = None
    train_start: int = 0  # first usable target index within each series

    def __post_init__(self):
        self.blocks = tuple(tuple(int(c) for c in b) for b in self.blocks)
        if self.Kt < 2:
            raise ConfigError("Kt must be at least 2")
        if self.M <= 4 * (self.Kt - 1):
            raise ConfigError(f"M={self.M} leaves no time step after two ST-blocks with Kt={self.Kt}")
        if len(self.blocks) != 2 or any(len(b) != 3 for b in self.blocks):
            raise ConfigError("exactly two ST-blocks of (c_in, c_spatial, c_out) are required")
        if self.blocks[0][0] != 1 or self.blocks[1][0] != self.blocks[0][2]:
            raise ConfigError("block channels must chain: 1 -> ... -> c_out(1) -> ...")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def c_out(self) -> int:
        return self.out_channels or self.blocks[-1][2]

    def time_lengths(self) -> list[int]:
        """Time length after each stage: input, block 1, block 2, output."""
        s = 2 * (self.Kt - 1)
        return [self.M, self.M - s, self.M - 2 * s, 1]

    @property
    def output_kernel(self) -> int:
        return self.time_lengths()[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d


def init_params(config: StgcnConfig, seed: Optional[int] = None) -> nn.Params:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    Kt = config.Kt
    p = {}
    for i, (ci, cs, co) in enumerate(config.blocks, 1):
        p[f"b{i}_t1_W"] = nn.glorot_uniform(rng, (Kt, ci, 2 * cs), Kt * ci, 2 * cs)
        p[f"b{i}_t1_b"] = np.zeros(2 * cs)
        p[f"b{i}_gc"] = nn.glorot_uniform(rng, (cs, cs), cs, cs)
        p[f"b{i}_t2_W"] = nn.glorot_uniform(rng, (Kt, cs, 2 * co), Kt * cs, 2 * co)
        p[f"b{i}_t2_b"] = np.zeros(2 * co)
    Ko, c_last, cz = config.output_kernel, config.blocks[-1][2], config.c_out
    p["out_t_W"] = nn.glorot_uniform(rng, (Ko, c_last, 2 * cz), Ko * c_last, 2 * cz)
    p["out_t_b"] = np.zeros(2 * cz)
    p["out_fc_W"] = nn.glorot_uniform(rng, (cz, 1), cz, 1)
    p["out_fc_b"] = np.zeros(1)
    return p


def st_block_forward(x, params: nn.Params, Ahat, prefix: str, tape: Optional[nn.GradientTape] = None,
                     trace: Optional[list] = None):
    """Gated temporal conv -> first-order graph conv + ReLU -> gated temporal
    conv. Shrinks time by ``2 (Kt - 1)``.

    ``trace`` (if given) collects the input of each temporal conv."""
    Kt = params[f"{prefix}_t1_W"].shape[0]
    if x.shape[1] < 2 * (Kt - 1) + 1:
        raise InputTooShort(f"ST-block needs at least {2 * (Kt - 1) + 1} time steps, got {x.shape[1]}")
    if trace is not None:
        trace.append(x)
    h = nn.causal_temporal_conv(x, params[f"{prefix}_t1_W"], params[f"{prefix}_t1_b"], tape,
                                names=(f"{prefix}_t1_W", f"{prefix}_t1_b"))
    h = nn.graph_conv_forward(h, params[f"{prefix}_gc"], Ahat, tape, name=f"{prefix}_gc")
    h = nn.activation(h, "relu", tape)
    if trace is not None:
        trace.append(h)
    return nn.causal_temporal_conv(h, params[f"{prefix}_t2_W"], params[f"{prefix}_t2_b"], tape,
                                   names=(f"{prefix}_t2_W", f"{prefix}_t2_b"))


def network_forward(x, params: nn.Params, Ahat, tape: Optional[nn.GradientTape] = None,
                    trace: Optional[list] = None) -> np.ndarray:
    """Normalised windows ``(B, M, n)`` -> normalised next step ``(B, n)``."""
    h = x[..., None]
    h = st_block_forward(h, params, Ahat, "b1", tape, trace)
    h = st_block_forward(h, params, Ahat, "b2", tape, trace)
    if trace is not None:
        trace.append(h)
    return _output_block(h, params, tape)


def _output_block(h, params, tape=None):
    h = nn.causal_temporal_conv(h, params["out_t_W"], params["out_t_b"], tape, names=("out_t_W", "out_t_b"))
    if h.shape[1] != 1:
        raise DimensionMismatch(f"output block left {h.shape[1]} time steps; window length must equal M")
    y = nn.dense(h, params["out_fc_W"], params["out_fc_b"], tape, names=("out_fc_W", "out_fc_b"))
    B, n = y.shape[0], y.shape[2]
    if tape is not None:
        tape.record(lambda dy: dy.reshape(B, 1, n, 1))
    return y.reshape(B, n)


@dataclass
class StgcnModel:
    config: StgcnConfig
    graph: PowerGraph
    params: nn.Params
    mean: float = 0.0
    std: float = 1.0
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Ahat = normalized_adjacency(self.graph)
        lengths = self.config.time_lengths()
        if lengths[2] < 1 or lengths[2] != self.config.M - 4 * (self.config.Kt - 1):
            raise ConfigError(f"inconsistent time bookkeeping {lengths}")

    @property
    def n(self) -> int:
        return self.graph.n

    def forward(self, window) -> np.ndarray:
        """One-step prediction in measurement units; ``window`` is ``(M, n)``
        or a batch ``(B, M, n)``."""
        w = np.asarray(window, dtype=np.float64)
        single = w.ndim == 2
        w = w[None] if single else w
        if w.shape[1:] != (self.config.M, self.n):
            raise DimensionMismatch(f"window must be ({self.config.M}, {self.n}), got {w.shape[1:]}")
        y = network_forward((w - self.mean) / self.std, self.params, self.Ahat)
        y = y * self.std + self.mean
        return y[0] if single else y

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "stgcn",
            "config": self.config.to_dict(),
            "graph_fingerprint": self.graph.fingerprint(),
            "graph": {"buses": [list(b) for b in self.graph.buses], "edges": [list(e) for e in sorted(self.graph.edges)]},
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in sorted(self.params.items())},
            "normalization": {"mean": self.mean, "std": self.std},
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StgcnModel":
        if d.get("type") != "stgcn":
            raise IncompatibleModel(f"not an STGCN model: {d.get('type')!r}")
        g = PowerGraph.from_lists(d["graph"]["buses"], d["graph"]["edges"])
        if g.fingerprint() != d["graph_fingerprint"]:
            raise IncompatibleModel("graph fingerprint does not match stored topology")
        cfg = StgcnConfig(**d["config"])
        params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        norm = d["normalization"]
        return cls(cfg, g, params, float(norm["mean"]), float(norm["std"]), d.get("training_meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def stgcn_forward(model: StgcnModel, window) -> np.ndarray:
    return model.forward(window)


def incremental_predict(model: StgcnModel, history, H: int) -> np.ndarray:
    """Roll the one-step model forward ``H`` times, feeding each prediction
    back into the window and dropping the oldest sample.

    ``history`` is ``(M, n)`` -> ``(H, n)``, or ``(B, M, n)`` -> ``(H, B, n)``.
    """
    w = np.asarray(history, dtype=np.float64)
    single = w.ndim == 2
    w = w[None] if single else w
    if w.shape[1:] != (model.config.M, model.n):
        raise DimensionMismatch(f"history must be ({model.config.M}, {model.n}), got {w.shape[1:]}")
    out = np.empty((H,) + (w.shape[0], model.n))
    for h in range(H):
        y = model.forward(w)
        out[h] = y
        w = np.concatenate([w[:, 1:], y[:, None, :]], axis=1)
    return out[:, 0] if single else out


def stream_predict(model: StgcnModel, history, H: int) -> np.ndarray:
    """Same rollout as :func:`incremental_predict`, but each layer keeps a
    buffer of its most recent inputs and only the newest time column is
    recomputed per step. Matches the exact rollout up to floating-point
    rounding at a fraction of the cost; used for bulk evaluation."""
    w = np.asarray(history, dtype=np.float64)
    single = w.ndim == 2
    w = w[None] if single else w
    if w.shape[1:] != (model.config.M, model.n):
        raise DimensionMismatch(f"history must be ({model.config.M}, {model.n}), got {w.shape[1:]}")
    p, A, Kt = model.params, model.Ahat, model.config.Kt
    trace: list = []
    y = network_forward((w - model.mean) / model.std, p, A, trace=trace)
    # temporal-conv inputs: b1_t1, b1_t2, b2_t1, b2_t2 keep Kt columns; output block keeps Ko
    bufs = [t[:, -Kt:].copy() for t in trace[:4]] + [trace[4].copy()]
    names = [("b1_t1_W", "b1_t1_b"), ("b1_t2_W", "b1_t2_b"), ("b2_t1_W", "b2_t1_b"), ("b2_t2_W", "b2_t2_b")]
    out = np.empty((H, w.shape[0], model.n))
    for h in range(H):
        y_raw = y * model.std + model.mean
        out[h] = y_raw
        if h == H - 1:
            break
        col = ((y_raw - model.mean) / model.std)[:, None, :, None]
        for i, (nw, nb) in enumerate(names):
            bufs[i] = np.concatenate([bufs[i][:, 1:], col], axis=1)
            col = nn.causal_temporal_conv(bufs[i], p[nw], p[nb])
            if i % 2 == 0:
                col = nn.activation(nn.graph_conv_forward(col, p[nw[:2] + "_gc"], A), "relu")
        bufs[4] = np.concatenate([bufs[4][:, 1:], col], axis=1)
        y = _output_block(bufs[4], p)
    return out[:, 0] if single else out


# ----------------------------------------------------------------- training


def _frequency_rows(s) -> np.ndarray:
    return s.frequencies if isinstance(s, MeasurementSeries) else np.asarray(s, dtype=np.float64)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, M, n)
    targets: np.ndarray  # (B, n)


class WindowIndex:
    """All (series, t) pairs with a full window ``X[t-M+1..t]`` and a target
    ``X[t+1]`` inside the same series."""

    def __init__(self, data: Sequence[np.ndarray], M: int, first_target: int = 0):
        self.data = data
        self.M = M
        idx = []
        for k, X in enumerate(data):
            lo = max(M - 1, first_target - 1)
            for t in range(lo, X.shape[0] - 1):
                idx.append((k, t))
        self.index = np.array(idx, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.index.shape[0]

    def batch(self, rows) -> WindowBatch:
        sel = self.index[rows]
        x = np.stack([self.data[k][t - self.M + 1:t + 1] for k, t in sel])
        y = np.stack([self.data[k][t + 1] for k, t in sel])
        return WindowBatch(x, y)


def stgcn_loss(params: nn.Params, Ahat, batch: WindowBatch, reduction: str = "sum", tape=None) -> float:
    pred = network_forward(batch.inputs, params, Ahat, tape)
    return nn.squared_loss(pred, batch.targets, tape, reduction)


def train_stgcn(dataset: Sequence, config: StgcnConfig, graph: PowerGraph, wrong_sign_hook: bool = False) -> StgcnModel:
    """Mini-batch training of the one-step predictor on frequency channels.

    ``dataset`` holds :class:`MeasurementSeries` (frequency columns are used)
    or raw ``(T, n)`` arrays.
    """
    data = [_frequency_rows(s) for s in dataset]
    if not data:
        raise InsufficientData("empty dataset")
    for X in data:
        if X.ndim != 2 or X.shape[1] != graph.n:
            raise DimensionMismatch(f"series has shape {X.shape}, graph has {graph.n} buses")
    data = [X for X in data if X.shape[0] > config.M + 1]
    if not data:
        raise InsufficientData(f"every series must be longer than M+1={config.M + 1}")
    allv = np.concatenate([X.reshape(-1) for X in data])
    mean = float(allv.mean())
    std = float(allv.std())
    if not std > 1e-12 * max(abs(mean), 1.0):
        std = 1.0
    norm = [(X - mean) / std for X in data]
    windows = WindowIndex(norm, config.M, config.train_start)
    if len(windows) == 0:
        raise InsufficientData("no training windows")
    model = StgcnModel(config, graph, init_params(config), mean, std)
    Ahat = model.Ahat
    params = model.params
    rng = np.random.default_rng(config.seed + 1)
    monitor_rows = rng.choice(len(windows), size=min(len(windows), 256), replace=False)
    monitor = windows.batch(np.sort(monitor_rows))
    initial = stgcn_loss(params, Ahat, monitor, "mean")
    adam = nn.AdamState()
    history = []
    n_batches = config.batches_per_epoch or int(np.ceil(len(windows) / config.batch_size))
    for epoch in range(config.epochs):
        order = rng.permutation(len(windows))
        total = 0.0
        for b in range(n_batches):
            start = (b * config.batch_size) % len(windows)
            rows = order[start:start + config.batch_size]
            tape = nn.GradientTape()
            loss = stgcn_loss(params, Ahat, windows.batch(rows), "mean", tape)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"STGCN loss diverged at epoch {epoch}; lower the learning rate")
            grads = tape.backward(1.0)
            if wrong_sign_hook:
                grads = {k: -g for k, g in grads.items()}
            grads = nn.clip_by_global_norm(grads, config.clip_norm)
            if config.optimizer == "adam":
                params, adam = nn.adam_step(params, grads, adam, config.learning_rate)
            else:
                params = nn.sgd_step(params, grads, config.learning_rate)
            total += loss
        history.append(total / n_batches)
        log.debug("stgcn epoch %d loss %.6g", epoch, history[-1])
    final = stgcn_loss(params, Ahat, monitor, "mean")
    if not np.isfinite(final):
        raise NonFiniteLoss("STGCN loss is not finite after training")
    model.params = params
    model.training_meta = {
        "initial_loss": initial,
        "final_loss": final,
        "loss_history": history,
        "n_windows": len(windows),
    }
    return model
