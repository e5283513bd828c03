"""Minimal reverse-mode differentiation over numpy arrays.

Every op takes and returns :class:`DiffValue` objects. A value produced by an
op keeps references to its inputs and a closure that maps the output gradient
to input gradients; :func:`backward` walks that record in reverse topological
order. All arithmetic is float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DiffValue:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}{label})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    @classmethod
    def from_op(cls, value, parents: Sequence["DiffValue"], backward_fn: Callable):
        """Wrap an op result; ``backward_fn(dout)`` returns one gradient (or None) per parent."""
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("op produced non-finite values")
        out = cls(value)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    def __add__(self, other):
        return add(self, as_value(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, as_value(other))

    __rmul__ = __mul__


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def parameter(value, name=None) -> DiffValue:
    return DiffValue(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: DiffValue) -> list[DiffValue]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffValue, params: Iterable[DiffValue] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Gradients add onto whatever is already stored; callers zero them between
    steps. Leaves listed in ``params`` get a zero gradient even when the loss
    does not depend on them.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        if p.grad is None:
            p.zero_grad()
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.value)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return DiffValue.from_op(a.value + b.value, (a, b), bw)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return DiffValue.from_op(av * bv, (a, b), bw)


def sum_all(x: DiffValue) -> DiffValue:
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return DiffValue.from_op(x.value.sum(), (x,), bw)


def relu(x: DiffValue) -> DiffValue:
    mask = x.value > 0

    def bw(g):
        return (g * mask,)

    return DiffValue.from_op(np.where(mask, x.value, 0.0), (x,), bw)


def sigmoid(x: DiffValue) -> DiffValue:
    # two-branch form avoids overflow in exp for large |x|
    v = x.value
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * s * (1.0 - s),)

    return DiffValue.from_op(s, (x,), bw)


def pointwise(x: DiffValue, kind: str) -> DiffValue:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def softmax(x: DiffValue, axis: int = -1) -> DiffValue:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return DiffValue.from_op(p, (x,), bw)


def temporal_mean(x: DiffValue) -> DiffValue:
    """Average a B x T x C value over time, giving B x C."""
    if x.value.ndim != 3:
        raise ValueError(f"temporal_mean expects B x T x C, got {x.shape}")
    T = x.shape[1]
    if T < 1:
        raise ValueError("temporal_mean needs at least one frame")

    def bw(g):
        return (np.repeat(g[:, None, :] / T, T, axis=1),)

    return DiffValue.from_op(x.value.mean(axis=1), (x,), bw)


def reverse_time(x: DiffValue) -> DiffValue:
    def bw(g):
        return (g[:, ::-1, :].copy(),)

    return DiffValue.from_op(x.value[:, ::-1, :].copy(), (x,), bw)


def dense(x: DiffValue, w: DiffValue, b: DiffValue) -> DiffValue:
    """B x C input times C x K weights plus K bias."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"dense bias shape {b.shape} does not match {w.shape[1]} outputs")
    xv, wv = x.value, w.value

    def bw(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return DiffValue.from_op(xv @ wv + b.value, (x, w, b), bw)


def weighted_sum(values: Sequence[DiffValue], weights: DiffValue) -> DiffValue:
    """Return sum_j weights[j] * values[j], accumulated left to right."""
    n = len(values)
    if weights.shape != (n,):
        raise ValueError(f"{n} values but weights of shape {weights.shape}")
    w = weights.value
    vs = [v.value for v in values]
    acc = w[0] * vs[0]
    for j in range(1, n):
        acc = acc + w[j] * vs[j]

    def bw(g):
        dw = np.array([(g * v).sum() for v in vs])
        return [dw] + [g * w[j] for j in range(n)]

    return DiffValue.from_op(acc, (weights, *values), bw)


# ---------------------------------------------------------------------------
# convolution, normalization, dropout


def dilated_causal_conv1d(x: DiffValue, w: DiffValue, b: DiffValue | None = None, dilation: int = 1) -> DiffValue:
    """Causal 1-D convolution over time.

    ``x`` is B x T x Cin, ``w`` is k x Cin x Cout. The input is left-padded with
    (k-1)*dilation zeros, so ``y[t] = sum_i w[i] . x[t - (k-1-i)*dilation] + b``
    and the output keeps length T.
    """
    if x.value.ndim != 3 or w.value.ndim != 3:
        raise ValueError(f"conv expects B x T x Cin input and k x Cin x Cout weights, got {x.shape}, {w.shape}")
    k, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")
    if k < 1 or dilation < 1:
        raise ValueError("kernel size and dilation must be >= 1")
    B, T, _ = x.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((B, pad, cin)), x.value], axis=1)
    wv = w.value
    y = np.zeros((B, T, cout))
    for i in range(k):
        y += xp[:, i * dilation:i * dilation + T, :] @ wv[i]
    if b is not None:
        y += b.value

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wv)
        g2 = g.reshape(B * T, cout)
        for i in range(k):
            window = xp[:, i * dilation:i * dilation + T, :]
            dw[i] = window.reshape(B * T, cin).T @ g2
            dxp[:, i * dilation:i * dilation + T, :] += g @ wv[i].T
        grads = [dxp[:, pad:, :], dw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return DiffValue.from_op(y, parents, bw)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: DiffValue
    beta: DiffValue
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, momentum=0.99, eps=1e-5, prefix=""):
        return cls(
            parameter(np.ones(channels), name=f"{prefix}gamma"),
            parameter(np.zeros(channels), name=f"{prefix}beta"),
            np.zeros(channels),
            np.ones(channels),
            momentum,
            eps,
        )


def batch_norm(x: DiffValue, state: BatchNormState, training: bool):
    """Normalize B x T x C per channel over the batch and time axes.

    Returns ``(y, (new_mean, new_var))``. In training mode the second element
    holds momentum-updated running statistics; it is ``None`` in inference.
    The state itself is never mutated, which keeps the op a pure function.
    """
    if state.eps <= 0:
        raise ValueError("batch norm epsilon must be positive")
    gamma, beta = state.gamma, state.beta
    xv = x.value
    axes = (0, 1)
    if training:
        mean = xv.mean(axis=axes)
        centered = xv - mean
        var = (centered ** 2).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std
        y = gamma.value * xhat + beta.value
        m = state.momentum
        updates = (m * state.running_mean + (1 - m) * mean, m * state.running_var + (1 - m) * var)

        def bw(g):
            dxhat = g * gamma.value
            dx = inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean) * inv_std
        y = gamma.value * xhat + beta.value
        updates = None

        def bw(g):
            return g * gamma.value * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return DiffValue.from_op(y, (x, gamma, beta), bw), updates


def spatial_dropout(x: DiffValue, rate: float, rng: "RngStream | None", training: bool) -> DiffValue:
    """Drop whole channels of a B x T x C value; survivors scaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an RngStream")
    B, _, C = x.shape
    keep = rng.generator().random((B, 1, C)) >= rate
    mask = keep / (1.0 - rate)

    def bw(g):
        return (g * mask,)

    return DiffValue.from_op(x.value * mask, (x,), bw)


# ---------------------------------------------------------------------------
# randomness


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


@dataclass
class RngStream:
    """Deterministic, splittable random stream.

    Each :meth:`generator` call returns a fresh numpy Generator keyed by
    ``(seed, path, counter)`` and bumps the counter, so replaying the same
    sequence of calls reproduces the same draws.
    """

    seed: int
    path: tuple = ()
    counter: int = 0

    def split(self, name: str | int) -> "RngStream":
        key = name if isinstance(name, int) else _name_key(name)
        return RngStream(self.seed, self.path + (key,))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path + (self.counter,))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    per_param: dict = field(default_factory=dict)
    n_coords: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(f: Callable[[], DiffValue], params: Sequence[DiffValue], eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` takes no arguments and builds the scalar loss from the current
    ``params`` values. Coordinates are perturbed in place and restored. The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    baseline = float(loss.value)
    if float(f().value) != baseline:
        raise RuntimeError("loss function is not deterministic; freeze dropout seeds before checking")
    backward(loss, params)

    all_errs = []
    per_param = {}
    for idx, p in enumerate(params):
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        errs = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().value)
            flat[i] = orig - eps
            fm = float(f().value)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            errs[i] = abs(a - num) / max(abs(a), abs(num), 1e-8)
        per_param[p.name or f"param{idx}"] = float(errs.max()) if errs.size else 0.0
        all_errs.append(errs)
    errs = np.concatenate(all_errs) if all_errs else np.zeros(0)
    return GradCheckReport(
        max_rel_error=float(errs.max()) if errs.size else 0.0,
        mean_rel_error=float(errs.mean()) if errs.size else 0.0,
        per_param=per_param,
        n_coords=int(errs.size),
    )
