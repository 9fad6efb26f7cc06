"""Dense float64 kernels, a small reverse-mode tape, Adam, and a gradient checker.

Matrices are plain ``numpy`` arrays. Kernels accept 2-D arrays or stacks of
matrices with one leading batch axis (shape ``(B, rows, cols)``); weights are
always 2-D and their gradients are summed over the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NumericError, ShapeError

PROB_EPS = 1e-12


def as_matrix(x, dtype=np.float64) -> np.ndarray:
    """Coerce to a float64 array with at least two dimensions."""
    a = np.asarray(x, dtype=dtype)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoes numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(grad_out, a, b):
    """Returns ``(grad_a, grad_b)`` for ``out = a @ b``."""
    grad_a = _unbroadcast(grad_out @ _swap(b), a.shape)
    grad_b = _unbroadcast(_swap(a) @ grad_out, b.shape)
    return grad_a, grad_b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by the row max."""
    _check_finite(m, "softmax_rows")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(grad_out, y):
    # J^T g for y = softmax(x): y * (g - <g, y>)
    return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


def relu(x):
    return np.maximum(x, 0.0)


def cross_entropy(prob_true_class, eps: float = PROB_EPS):
    """``-ln p`` of the ground-truth class; arrays are averaged over samples."""
    p = np.asarray(prob_true_class, dtype=np.float64)
    if np.any(np.isnan(p)):
        raise NumericError("cross_entropy: NaN probability")
    p = np.clip(p, eps, 1.0 - eps)
    if np.any((p < 0.0) | (p > 1.0)):
        raise NumericError("cross_entropy: probability outside [0, 1]")
    loss = -np.log(p)
    return float(loss) if loss.ndim == 0 else float(loss.mean())


def row_norm(x, eps: float = 1e-5):
    """Zero-mean, unit-variance normalization of each row (no affine terms)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Records primitive ops on integer node ids and replays them backward.

    Single-owner: do not share an instance across threads while recording.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[_Record] = []
        self.grads: list[np.ndarray | None] = []

    # -- nodes --------------------------------------------------------------

    def _push(self, value: np.ndarray) -> int:
        self.values.append(value)
        self.grads.append(None)
        return len(self.values) - 1

    def _record(self, kind, inputs, value, backward) -> int:
        out = self._push(value)
        self.records.append(_Record(kind, tuple(inputs), out, backward))
        return out

    def leaf(self, value) -> int:
        return self._push(np.asarray(value, dtype=np.float64))

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def grad(self, node: int) -> np.ndarray:
        g = self.grads[node]
        return np.zeros_like(self.values[node]) if g is None else g

    # -- ops ----------------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.values[a], self.values[b]
        return self._record("matmul", (a, b), matmul(va, vb), lambda g: matmul_backward(g, va, vb))

    def add(self, a: int, b: int) -> int:
        va, vb = self.values[a], self.values[b]
        try:
            out = va + vb
        except ValueError as exc:
            raise ShapeError(f"add shape mismatch: {va.shape} + {vb.shape}") from exc
        return self._record(
            "add", (a, b), out, lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape))
        )

    def scale(self, a: int, c: float) -> int:
        return self._record("scale", (a,), self.values[a] * c, lambda g: (g * c,))

    def concat(self, nodes: list[int], axis: int = -2) -> int:
        vals = [self.values[n] for n in nodes]
        try:
            out = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat shape mismatch: {[v.shape for v in vals]}") from exc
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._record("concat", nodes, out, backward)

    def take(self, a: int, start: int, stop: int, axis: int = -2) -> int:
        va = self.values[a]
        index = [slice(None)] * va.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)

        def backward(g):
            full = np.zeros_like(va)
            full[index] = g
            return (full,)

        return self._record("take", (a,), va[index], backward)

    def softmax_rows(self, a: int) -> int:
        y = softmax_rows(self.values[a])
        return self._record("softmax_rows", (a,), y, lambda g: (softmax_rows_backward(g, y),))

    def relu(self, a: int) -> int:
        va = self.values[a]
        mask = va > 0.0
        return self._record("relu", (a,), relu(va), lambda g: (g * mask,))

    def transpose(self, a: int) -> int:
        return self._record("transpose", (a,), _swap(self.values[a]), lambda g: (_swap(g),))

    def mean_rows(self, a: int) -> int:
        """Mean over the row axis (-2), keeping it as a length-1 axis."""
        va = self.values[a]
        n = va.shape[-2]
        return self._record(
            "mean", (a,), va.mean(axis=-2, keepdims=True), lambda g: (np.broadcast_to(g / n, va.shape).copy(),)
        )

    def row_norm(self, a: int, eps: float = 1e-5) -> int:
        y, inv = row_norm(self.values[a], eps)

        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gy),)

        return self._record("row_norm", (a,), y, backward)

    def nll(self, probs: int, labels, eps: float = PROB_EPS) -> int:
        """Mean cross-entropy of ``probs`` (shape ``(..., C)``) against integer labels."""
        vp = self.values[probs]
        flat = vp.reshape(-1, vp.shape[-1])
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != flat.shape[0]:
            raise ShapeError(f"nll: {flat.shape[0]} rows vs {labels.shape[0]} labels")
        rows = np.arange(flat.shape[0])
        p = flat[rows, labels]
        loss = cross_entropy(p, eps)
        clamped = (p < eps) | (p > 1.0 - eps)

        def backward(g):
            gp = np.zeros_like(flat)
            gp[rows, labels] = np.where(clamped, 0.0, -1.0 / (np.clip(p, eps, 1.0) * flat.shape[0]))
            return ((gp * g).reshape(vp.shape),)

        return self._record("nll", (probs,), np.asarray(loss), backward)

    # -- reverse pass -------------------------------------------------------

    def backward(self, root: int, grad_out=None) -> None:
        """Accumulate d(root)/d(node) into ``self.grads`` for every node.

        ``grad_out`` seeds the gradient of ``root`` (default: ones), which
        gives vector-Jacobian products for non-scalar roots.
        """
        self.grads = [None] * len(self.values)
        seed = np.ones_like(self.values[root]) if grad_out is None else np.asarray(grad_out, dtype=np.float64)
        if seed.shape != self.values[root].shape:
            raise ShapeError(f"backward seed {seed.shape} vs root {self.values[root].shape}")
        self.grads[root] = seed
        for rec in reversed(self.records):
            g = self.grads[rec.output]
            if g is None:
                continue
            for node, contrib in zip(rec.inputs, rec.backward(g)):
                if contrib is None:
                    continue
                prev = self.grads[node]
                self.grads[node] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-1
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    Inputs are not mutated.
    """
    if state.step < 0:
        raise ValueError("AdamState.step must be >= 0")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_step: moment {m.shape} vs param {p.shape} for {name!r}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_params[name] = p - state.lr * update - state.lr * state.weight_decay * p
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(
        lr=state.lr,
        beta1=b1,
        beta2=b2,
        weight_decay=state.weight_decay,
        epsilon=state.epsilon,
        step=t,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def grad_check(f, params, h: float = 1e-5, value_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` with ``grads`` shaped like
    ``params``; ``params`` is an array or a mapping of name to array. The
    error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``value_fn``, when
    given, is a cheaper value-only ``f`` used for the perturbed evaluations.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(params, np.ndarray)
    named = {"x": params} if single else dict(params)
    named = {k: np.array(v, dtype=np.float64) for k, v in named.items()}

    def call(p):
        value, grads = f(p["x"] if single else p)
        value = float(value)
        if not math.isfinite(value):
            raise NumericError("grad_check: f returned a non-finite value")
        return value, ({"x": grads} if single else grads)

    def value(p):
        if value_fn is None:
            return call(p)[0]
        v = float(value_fn(p["x"] if single else p))
        if not math.isfinite(v):
            raise NumericError("grad_check: f returned a non-finite value")
        return v

    _, analytic = call(named)
    worst = 0.0
    for name, arr in named.items():
        a_grad = np.asarray(analytic[name], dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = value(named)
            flat[i] = orig - h
            f_minus = value(named)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(a_grad.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
