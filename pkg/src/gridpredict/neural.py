"""Reverse-mode differentiable layer kit for the fixed architectures used here.

Every layer is a plain function ``layer(x, ..., tape=None)``. When a
:class:`GradientTape` is passed the layer records a closure that maps the
upstream gradient to the input gradient and accumulates parameter gradients
on the tape under the parameter names supplied by the caller. Tapes are
strictly sequential: each recorded op consumes the output of the previous one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, InputTooShort, TapeConsumed

Params = dict[str, np.ndarray]


class GradientTape:
    """Records backward closures for one forward pass."""

    def __init__(self):
        self._ops: list[Callable[[np.ndarray], np.ndarray]] = []
        self.grads: Params = {}
        self._consumed = False

    def record(self, backward: Callable[[np.ndarray], np.ndarray]) -> None:
        if self._consumed:
            raise TapeConsumed("cannot record on a consumed tape")
        self._ops.append(backward)

    def accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def backward(self, seed: np.ndarray) -> Params:
        """Propagate ``seed`` (gradient of the scalar loss w.r.t. the last
        recorded output) back through the tape. Returns parameter gradients;
        the input gradient is kept in ``input_grad``."""
        if self._consumed:
            raise TapeConsumed("tape already used for a backward pass")
        self._consumed = True
        g = np.asarray(seed, dtype=np.float64)
        for op in reversed(self._ops):
            g = op(g)
        self.input_grad = g
        return self.grads


def backward(tape: GradientTape, loss_grad) -> Params:
    return tape.backward(loss_grad)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- dense / act


def dense(x, W, b, tape: Optional[GradientTape] = None, names=("W", "b")):
    """Affine map on the last axis: ``x @ W + b``."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionMismatch(f"dense: input {x.shape} incompatible with W {W.shape}, b {b.shape}")
    y = x @ W + b
    if tape is not None:
        def back(dy):
            x2 = x.reshape(-1, x.shape[-1])
            dy2 = dy.reshape(-1, dy.shape[-1])
            tape.accumulate(names[0], x2.T @ dy2)
            tape.accumulate(names[1], dy2.sum(axis=0))
            return dy @ W.T
        tape.record(back)
    return y


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS = ("tanh", "relu", "sigmoid", "linear")


def activation(x, kind: str, tape: Optional[GradientTape] = None):
    if kind == "tanh":
        y = np.tanh(x)
        d = lambda dy: dy * (1.0 - y * y)
    elif kind == "relu":
        y = np.maximum(x, 0.0)
        d = lambda dy: dy * (x > 0)
    elif kind == "sigmoid":
        y = sigmoid(x)
        d = lambda dy: dy * y * (1.0 - y)
    elif kind == "linear":
        y = x
        d = lambda dy: dy
    else:
        raise ValueError(f"unknown activation {kind!r}")
    if tape is not None:
        tape.record(d)
    return y


def _glu_split(z, tape, co):
    p, q = z[..., :co], z[..., co:]
    s = sigmoid(q)
    y = p * s
    if tape is not None:
        def back(dy):
            return np.concatenate([dy * s, dy * p * s * (1.0 - s)], axis=-1)
        tape.record(back)
    return y


def glu_forward(x, Wp, bp, Wq, bq, tape: Optional[GradientTape] = None, names=("Wp", "bp", "Wq", "bq")):
    """Gated linear unit ``(x Wp + bp) * sigmoid(x Wq + bq)``."""
    if Wp.shape != Wq.shape or x.shape[-1] != Wp.shape[0] or bp.shape != (Wp.shape[1],) or bq.shape != bp.shape:
        raise DimensionMismatch(f"GLU: input {x.shape}, Wp {Wp.shape}, Wq {Wq.shape}")
    p = x @ Wp + bp
    s = sigmoid(x @ Wq + bq)
    y = p * s
    if tape is not None:
        def back(dy):
            dp = dy * s
            dq = dy * p * s * (1.0 - s)
            x2 = x.reshape(-1, x.shape[-1])
            for (nw, nb), d in (((names[0], names[1]), dp), ((names[2], names[3]), dq)):
                d2 = d.reshape(-1, d.shape[-1])
                tape.accumulate(nw, x2.T @ d2)
                tape.accumulate(nb, d2.sum(axis=0))
            return dp @ Wp.T + dq @ Wq.T
        tape.record(back)
    return y


# ---------------------------------------------------------- temporal conv


def _tconv_taps(x, W, b, tape, names):
    # short kernel: one GEMM per tap over the whole time axis, then shifted sums
    Kt, ci, c2 = W.shape
    B, T, n, _ = x.shape
    To = T - Kt + 1
    x2 = x.reshape(-1, ci)
    z = (x2 @ W[0]).reshape(B, T, n, c2)[:, :To] + b
    for k in range(1, Kt):
        z += (x2 @ W[k]).reshape(B, T, n, c2)[:, k:k + To]
    if tape is not None:
        def back(dz):
            dz2 = np.ascontiguousarray(dz).reshape(-1, c2)
            dW = np.empty_like(W)
            dx = np.zeros_like(x)
            for k in range(Kt):
                dW[k] = np.ascontiguousarray(x[:, k:k + To]).reshape(-1, ci).T @ dz2
                dx[:, k:k + To] += (dz2 @ W[k].T).reshape(B, To, n, ci)
            tape.accumulate(names[0], dW)
            tape.accumulate(names[1], dz2.sum(axis=0))
            return dx
        tape.record(back)
    return z


def _tconv_unfold(x, W, b, tape, names):
    # long kernel, few outputs: unfold windows (kernel index outermost)
    Kt, ci, c2 = W.shape
    B, T, n, _ = x.shape
    To = T - Kt + 1
    U = sliding_window_view(x, Kt, axis=1).transpose(0, 1, 2, 4, 3).reshape(B, To, n, Kt * ci)
    Wf = W.reshape(Kt * ci, c2)
    z = U @ Wf + b
    if tape is not None:
        def back(dz):
            dz2 = dz.reshape(-1, c2)
            tape.accumulate(names[0], (U.reshape(-1, Kt * ci).T @ dz2).reshape(W.shape))
            tape.accumulate(names[1], dz2.sum(axis=0))
            dU = (dz @ Wf.T).reshape(B, To, n, Kt, ci)
            dx = np.zeros_like(x)
            for k in range(Kt):
                dx[:, k:k + To] += dU[:, :, :, k]
            return dx
        tape.record(back)
    return z


def causal_temporal_conv(x, W, b, tape: Optional[GradientTape] = None, names=("W", "b")):
    """Gated causal convolution along time.

    ``x`` is ``(B, T, n, Ci)``, ``W`` is ``(Kt, Ci, 2*Co)`` and ``b`` is
    ``(2*Co,)``. Output ``(B, T-Kt+1, n, Co)``; output step ``t`` sees inputs
    ``t .. t+Kt-1`` of the same node only. The first ``Co`` kernel channels
    form the linear path and the last ``Co`` the sigmoid gate.
    """
    if x.ndim != 4:
        raise DimensionMismatch(f"temporal conv expects (B, T, n, C), got {x.shape}")
    Kt, ci, c2 = W.shape
    if x.shape[-1] != ci or c2 % 2 or b.shape != (c2,):
        raise DimensionMismatch(f"temporal conv: input {x.shape}, kernel {W.shape}, bias {b.shape}")
    B, T, n, _ = x.shape
    if T < Kt:
        raise InputTooShort(f"time length {T} shorter than kernel width {Kt}")
    To = T - Kt + 1
    if Kt <= To:
        z = _tconv_taps(x, W, b, tape, names)
    else:
        z = _tconv_unfold(x, W, b, tape, names)
    return _glu_split(z, tape, c2 // 2)


# ------------------------------------------------------------- graph conv


def _node_mix(A, x):
    """``A`` applied along the node axis (second to last) of ``x``."""
    return np.moveaxis(np.tensordot(A, x, axes=([1], [x.ndim - 2])), 0, -2)


def graph_conv_forward(x, theta, Ahat, tape: Optional[GradientTape] = None, name="theta"):
    """First-order graph convolution ``Ahat . x_t . theta`` for every time
    slice of ``x`` with shape ``(B, T, n, Ci)``; no activation."""
    n = Ahat.shape[0]
    if Ahat.shape != (n, n) or x.shape[-2] != n or x.shape[-1] != theta.shape[0]:
        raise DimensionMismatch(f"graph conv: x {x.shape}, Ahat {Ahat.shape}, theta {theta.shape}")
    xa = _node_mix(Ahat, x)
    y = xa @ theta
    if tape is not None:
        def back(dy):
            tape.accumulate(name, xa.reshape(-1, xa.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))
            return _node_mix(Ahat.T, dy @ theta.T)
        tape.record(back)
    return y


def chebyshev_basis(L, lambda_max: float, K: int) -> np.ndarray:
    """``T_0 .. T_{K-1}`` of the rescaled operator ``2 L / lambda_max - I``."""
    n = L.shape[0]
    Lt = 2.0 * L / lambda_max - np.eye(n)
    T = [np.eye(n)]
    if K > 1:
        T.append(Lt)
    for _ in range(2, K):
        T.append(2.0 * Lt @ T[-1] - T[-2])
    return np.stack(T[:K])


def chebyshev_graph_conv(x, thetas, L, lambda_max: float, tape: Optional[GradientTape] = None, name="thetas"):
    """``sum_k T_k(L~) x theta_k`` with ``thetas`` of shape ``(K, Ci, Co)``.

    Scalar filters are accepted as a length-K vector (``Ci = Co = 1`` weights
    broadcast over channels).
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    scalar = thetas.ndim == 1
    if scalar:
        thetas = thetas[:, None, None] * np.eye(x.shape[-1])[None]
    K = thetas.shape[0]
    if K < 1 or L.shape != (x.shape[-2], x.shape[-2]) or thetas.shape[1] != x.shape[-1]:
        raise DimensionMismatch(f"chebyshev conv: x {x.shape}, L {L.shape}, thetas {thetas.shape}")
    T = chebyshev_basis(L, lambda_max, K)
    TX = np.einsum("kij,...jc->k...ic", T, x)
    y = sum(TX[k] @ thetas[k] for k in range(K))
    if tape is not None and not scalar:
        def back(dy):
            g = np.stack([TX[k].reshape(-1, TX.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]) for k in range(K)])
            tape.accumulate(name, g)
            return sum(np.einsum("ji,...jc->...ic", T[k], dy @ thetas[k].T) for k in range(K))
        tape.record(back)
    return y


# ------------------------------------------------------------------ losses


def squared_loss(pred, target, tape: Optional[GradientTape] = None, reduction: str = "sum"):
    """Sum (or mean) of squared errors; records the gradient w.r.t. ``pred``
    so ``tape.backward(1.0)`` starts from the scalar loss."""
    if pred.shape != target.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs target {target.shape}")
    r = pred - target
    scale = 1.0 if reduction == "sum" else 1.0 / r.size
    loss = float(np.sum(r * r) * scale)
    if tape is not None:
        tape.record(lambda dl: 2.0 * scale * np.asarray(dl) * r)
    return loss


# -------------------------------------------------------------- optimizers


def _check(params: Params, grads: Params):
    for k, g in grads.items():
        if k in params and np.shape(params[k]) != np.shape(g):
            raise DimensionMismatch(f"gradient for {k} has shape {np.shape(g)}, parameter {np.shape(params[k])}")


def clip_by_global_norm(grads: Params, max_norm: Optional[float]) -> Params:
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    f = max_norm / total
    return {k: g * f for k, g in grads.items()}


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    _check(params, grads)
    return {k: (v - lr * grads[k]) if k in grads else v for k, v in params.items()}


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0


def adam_step(params: Params, grads: Params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[Params, AdamState]:
    _check(params, grads)
    t = state.t + 1
    m, v, out = {}, {}, {}
    for k, p in params.items():
        if k not in grads:
            out[k] = p
            continue
        g = grads[k]
        m[k] = beta1 * state.m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v[k] = beta2 * state.v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1**t)
        vhat = v[k] / (1 - beta2**t)
        out[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out, AdamState(m, v, t)


# ----------------------------------------------------------- grad checking


def numerical_gradient(f: Callable[[Params], float], params: Params, eps: float = 1e-5) -> Params:
    """Central finite differences of scalar ``f`` w.r.t. every parameter entry."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f(params)
            flat[i] = old - eps
            fm = f(params)
            flat[i] = old
            gf[i] = (fp - fm) / (2 * eps)
        out[k] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entry difference relative to the larger of the two gradients'
    max magnitudes."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)
