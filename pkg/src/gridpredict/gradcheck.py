"""Finite-difference verification of every hand-written backward pass.

Each suite builds a micro problem, computes analytic gradients through the
tape (including the gradient w.r.t. the layer input where there is one) and
compares them with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import neural as nn
from .grid import PowerGraph, normalized_adjacency, normalized_laplacian
from .koopman import DeepDMDObjective, Normalization, ObservableNet, SnapshotPair
from .stgcn import StgcnConfig, WindowBatch, init_params, st_block_forward, stgcn_loss

TOLERANCE = 1e-4
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _micro_graph() -> PowerGraph:
    return PowerGraph.from_lists([(1, "G"), (2, "L"), (3, "L")], [(1, 2), (2, 3), (1, 3)])


def _layer_check(forward: Callable, params: nn.Params, x: np.ndarray, seed: int, wrong_sign: bool) -> float:
    """Check ``sum(c * forward(x, params, tape))`` for a random ``c``."""
    rng = np.random.default_rng(seed + 1000)
    y0 = forward(x, params, None)
    c = rng.normal(size=y0.shape)
    allp = {**params, "__x": x}

    def f(p):
        return float(np.sum(c * forward(p["__x"], {k: v for k, v in p.items() if k != "__x"}, None)))

    tape = nn.GradientTape()
    forward(x, params, tape)
    grads = dict(tape.backward(c))
    grads["__x"] = tape.input_grad
    num = nn.numerical_gradient(f, allp)
    sign = -1.0 if wrong_sign else 1.0
    return max(nn.relative_error(sign * grads[k], num[k]) for k in allp)


def _suite_dense(seed, wrong):
    rng = np.random.default_rng(seed)
    p = {"W": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    return _layer_check(lambda x, q, t: nn.dense(x, q["W"], q["b"], t), p, rng.normal(size=(5, 4)), seed, wrong)


def _suite_activation(kind):
    def run(seed, wrong):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 3))
        x[np.abs(x) < 1e-3] = 0.5  # keep clear of the ReLU kink
        return _layer_check(lambda z, q, t: nn.activation(z, kind, t), {}, x, seed, wrong)
    return run


def _suite_glu(seed, wrong):
    rng = np.random.default_rng(seed)
    p = {k: rng.normal(size=s) for k, s in (("Wp", (4, 3)), ("bp", (3,)), ("Wq", (4, 3)), ("bq", (3,)))}
    return _layer_check(lambda x, q, t: nn.glu_forward(x, q["Wp"], q["bp"], q["Wq"], q["bq"], t),
                        p, rng.normal(size=(5, 4)), seed, wrong)


def _suite_temporal(T, Kt):
    def run(seed, wrong):
        rng = np.random.default_rng(seed)
        p = {"W": rng.normal(size=(Kt, 2, 6)), "b": rng.normal(size=6)}
        return _layer_check(lambda x, q, t: nn.causal_temporal_conv(x, q["W"], q["b"], t),
                            p, rng.normal(size=(2, T, 3, 2)), seed, wrong)
    return run


def _suite_graph_conv(seed, wrong):
    rng = np.random.default_rng(seed)
    A = normalized_adjacency(_micro_graph())
    p = {"theta": rng.normal(size=(2, 3))}
    return _layer_check(lambda x, q, t: nn.graph_conv_forward(x, q["theta"], A, t),
                        p, rng.normal(size=(2, 4, 3, 2)), seed, wrong)


def _suite_chebyshev(seed, wrong):
    rng = np.random.default_rng(seed)
    L = normalized_laplacian(_micro_graph())
    p = {"thetas": rng.normal(size=(3, 2, 2))}
    return _layer_check(lambda x, q, t: nn.chebyshev_graph_conv(x, q["thetas"], L, 2.0, t),
                        p, rng.normal(size=(2, 4, 3, 2)), seed, wrong)


def _micro_stgcn_config(seed=0) -> StgcnConfig:
    return StgcnConfig(M=8, Kt=2, blocks=((1, 2, 2), (2, 2, 2)), seed=seed)


def _suite_st_block(seed, wrong):
    rng = np.random.default_rng(seed)
    g = _micro_graph()
    A = normalized_adjacency(g)
    p = {k: v for k, v in init_params(_micro_stgcn_config(seed)).items() if k.startswith("b1_")}
    p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
    return _layer_check(lambda x, q, t: st_block_forward(x, q, A, "b1", t), p, rng.normal(size=(2, 8, 3, 1)),
                        seed, wrong)


def _suite_stgcn_loss(seed, wrong):
    rng = np.random.default_rng(seed)
    A = normalized_adjacency(_micro_graph())
    p = init_params(_micro_stgcn_config(seed))
    p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
    batch = WindowBatch(rng.normal(size=(3, 8, 3)), rng.normal(size=(3, 3)))
    tape = nn.GradientTape()
    stgcn_loss(p, A, batch, "sum", tape)
    grads = tape.backward(1.0)
    num = nn.numerical_gradient(lambda q: stgcn_loss(q, A, batch, "sum"), p)
    sign = -1.0 if wrong else 1.0
    return max(nn.relative_error(sign * grads[k], num[k]) for k in p)


def _suite_deepdmd(seed, wrong):
    rng = np.random.default_rng(seed)
    n, N = 3, 12
    X = rng.normal(size=(n, N + 1))
    pair = SnapshotPair(X[:, :-1], X[:, 1:])
    net = ObservableNet.init(n, 3, (6, 6), "tanh", seed)
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in net.params().items()}
    obj = DeepDMDObjective(net, Normalization.fit(X), pair, 0.01, 0.005, affine=True)
    K = rng.normal(size=(n + 3 + 1, n + 3 + 1)) * 0.3
    _, grads = obj.gradient(K, params)
    num = nn.numerical_gradient(lambda q: obj.value(K, q), params)
    sign = -1.0 if wrong else 1.0
    return max(nn.relative_error(sign * grads[k], num[k]) for k in params)


SUITES: dict[str, Callable[[int, bool], float]] = {
    "dense": _suite_dense,
    "tanh": _suite_activation("tanh"),
    "relu": _suite_activation("relu"),
    "sigmoid": _suite_activation("sigmoid"),
    "glu": _suite_glu,
    "temporal_conv_short_kernel": _suite_temporal(6, 2),
    "temporal_conv_long_kernel": _suite_temporal(6, 5),
    "graph_conv": _suite_graph_conv,
    "chebyshev_conv": _suite_chebyshev,
    "st_block": _suite_st_block,
    "stgcn_loss": _suite_stgcn_loss,
    "deepdmd_loss": _suite_deepdmd,
}


def run_gradchecks(seeds=SEEDS, tolerance: float = TOLERANCE, wrong_sign_hook: bool = False,
                   only=None) -> list[GradCheckResult]:
    """Run every suite over ``seeds``; ``wrong_sign_hook`` negates all analytic
    gradients so the harness itself can be shown to fail."""
    out = []
    for name, suite in SUITES.items():
        if only is not None and name not in only:
            continue
        err = max(suite(s, wrong_sign_hook) for s in seeds)
        out.append(GradCheckResult(name, err, bool(err <= tolerance)))
    return out
