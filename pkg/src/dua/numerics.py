"""Dense-array math with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every op below records its parents and
a closure computing the vector-Jacobian product, so calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every leaf with ``requires_grad=True``.

Precision follows the inputs: build parameters in float32 for training and in
float64 for finite-difference checks. There is no global default.

Gradients accumulate across ``backward`` calls until :func:`zero_grad` (or
``tensor.grad = None``) resets them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "ComputationRecord",
    "DimensionError",
    "UsageError",
    "as_tensor",
    "linear",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "relu",
    "sigmoid",
    "concat",
    "stack",
    "take",
    "scatter_rows",
    "broadcast_to",
    "masked_fill",
    "grad_reverse",
    "cross_entropy",
    "binary_cross_entropy",
    "zero_grad",
    "grad_check",
    "GradCheckReport",
]

MASK_VALUE = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """An op was called in a state it does not support."""


class Tensor:
    """N-d array node in a differentiable computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not track gradients")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        record = ComputationRecord.from_output(self)
        record.run_backward(self, np.asarray(grad, dtype=self.dtype))

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


@dataclass
class ComputationRecord:
    """Topologically ordered list of op nodes reachable from one output.

    Built fresh for every ``backward`` call; not meant to be shared between
    threads.
    """

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run_backward(self, out: Tensor, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _last_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims; a BLAS product beats ufunc.reduce on short axes."""
    return x @ np.ones((x.shape[-1], 1), dtype=x.dtype)


def _last_mean(x: np.ndarray) -> np.ndarray:
    return x @ np.full((x.shape[-1], 1), 1.0 / x.shape[-1], dtype=x.dtype)


def _last_max(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n > 64:
        return x.max(axis=-1, keepdims=True)
    m = x[..., :1].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j:j + 1], out=m)
    return m


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _make(x.data**exponent, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float64:
        return ndtr(x)
    # Abramowitz & Stegun 7.1.26 for erf: |error| <= 1.5e-7, below float32 resolution
    z = np.abs(x) * np.float32(1.0 / np.sqrt(2.0))
    t = 1.0 / (1.0 + np.float32(0.3275911) * z)
    poly = t * (np.float32(0.254829592) + t * (np.float32(-0.284496736) + t * (
        np.float32(1.421413741) + t * (np.float32(-1.453152027) + t * np.float32(1.061405429)))))
    half_erfc = np.float32(0.5) * poly * np.exp(-z * z)
    return np.where(x >= 0, 1.0 - half_erfc, half_erfc).astype(x.dtype, copy=False)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF (no tanh approximation).

    float64 inputs use scipy's ``ndtr``; float32 inputs use a rational erf
    whose error sits below float32 round-off.
    """
    cdf = _normal_cdf(x.data)
    pdf = (np.exp(-0.5 * x.data * x.data) * (1.0 / np.sqrt(2.0 * np.pi))).astype(x.dtype, copy=False)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def grad_reverse(z: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    lam = float(lam)
    out = _make(z.data.copy(), (z,), lambda g: (g * (-lam),))
    return out


# -- reductions and shape ops --------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.asarray(x.data[index]), (x,), bw)


def take(x: Tensor, indices, axis: int) -> Tensor:
    indices = np.asarray(indices)
    unique = np.unique(indices).size == indices.size

    def bw(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        if unique:
            moved[indices] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, indices, axis=axis), (x,), bw)


def scatter_rows(x: Tensor, rows, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at ``rows`` in a zero array with ``n_rows`` rows."""
    rows = np.asarray(rows)
    data = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    data[rows] = x.data
    return _make(data, (x,), lambda g: (g[rows],))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def masked_fill(x: Tensor, keep: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; those get zero gradient."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    data = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    return _make(data, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is ``(d_in, d_out)``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    y = y.reshape(lead + (W.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _make(y, parents, bw)


# -- normalisation and probabilities ------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if axis in (-1, x.ndim - 1):
        e = np.exp(x.data - _last_max(x.data))
        y = e / _last_sum(e)

        def bw(g):
            return (y * (g - _last_sum(g * y)),)
    else:
        e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then scale and shift."""
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape mismatch for d={d}")
    xc = x.data - _last_mean(x.data)
    inv = 1.0 / np.sqrt(_last_mean(xc * xc) + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - _last_mean(dxhat) - xhat * _last_mean(dxhat * xhat))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(y.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` against ``logits`` (n, k)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise UsageError("cross_entropy over zero rows")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(n), labels))
    return -tmean(picked)


def binary_cross_entropy(prob: Tensor, target, clip: float = 1e-7) -> Tensor:
    """Mean BCE; ``prob`` is clipped to ``[clip, 1 - clip]`` before the logs."""
    t = np.asarray(target, dtype=prob.dtype)
    if prob.size == 0:
        raise UsageError("binary_cross_entropy over zero rows")
    p = np.clip(prob.data, clip, 1.0 - clip)
    inside = (prob.data > clip) & (prob.data < 1.0 - clip)
    per = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))

    def bw(g):
        dp = (-(t / p) + (1.0 - t) / (1.0 - p)) * inside
        return (g * dp / prob.size,)

    return _make(np.asarray(per.mean(), dtype=prob.dtype), (prob,), bw)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite-difference verification -------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    flagged: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flagged

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}: max relative error {self.max_rel_error:.3e} over "
            f"{self.n_checked} entries (tol {self.tol:.0e}, {len(self.flagged)} flagged)"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    fd_fn: Callable[[], Tensor] | dict[str, Callable[[], Tensor]] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``;
    the floor keeps entries whose true gradient is ~0 (e.g. key biases under
    softmax) from being judged on round-off alone. Parameters should be
    float64.

    ``fd_fn`` replaces ``f`` as the function that is finite-differenced,
    either globally or per parameter name. This is how layers whose backward
    is deliberately not the derivative of the forward (gradient reversal) are
    checked against the surrogate objective they implement.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: loss is not finite at the base point")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    scale = max(1.0, abs(float(loss.data)))

    worst = 0.0
    n = 0
    flagged = []
    for name, p in params.items():
        target = fd_fn.get(name, f) if isinstance(fd_fn, dict) else (fd_fn or f)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(target().data)
            flat[i] = orig - h
            fm = float(target().data)
            flat[i] = orig
            loc = np.unravel_index(i, p.shape)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {name}{list(loc)}")
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor * scale)
            worst = max(worst, rel)
            n += 1
            if rel > tol:
                flagged.append((name, tuple(int(j) for j in loc), ana, num, rel))
    return GradCheckReport(worst, n, tol, flagged)
