"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``backward`` linearises the graph reachable from
a scalar loss into a tape (reverse topological order), replays it, writes
``.grad`` on leaves and then clears the tape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError

LN_EPS = 1e-5
NORM_EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor. ``name`` is assigned by the owning model."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum is the cheap common case; overflow of the sum falls back to the full scan
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str,
          check: bool = True) -> Tensor:
    # ops that cannot turn finite inputs into non-finite outputs pass check=False
    if check:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bw, "add", check=False)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), bw, "sub", check=False)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of non-positive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh", check=False)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu", check=False)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), bw, "gelu", check=False)


# -- shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape",
                 check=False)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose",
                 check=False)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes",
                 check=False)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    key = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in key)

    def bw(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(np.array(out, copy=True), (x,), bw, "getitem", check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[tt.shape for tt in tensors]} disagree off-axis")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat",
                 check=False)


# -- reductions ---------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean along ``axis``; that axis is dropped."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return mean(x, axis)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim == 2 and a.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw_flat(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node(out, (a, b), bw_flat, "matmul")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _node(weight.data[ids], (weight,), bw, "embedding", check=False)


# -- normalisation & softmax ----------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                 "softmax", check=False)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(dh) + mask) v`` over the last two axes."""
    scale = q.shape[-1] ** -0.5
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    s *= scale
    if mask is not None:
        s += mask
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s
    out = np.matmul(p, v.data)

    def bw(g):
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = np.matmul(ds, k.data)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
        return dq, dk, dv

    return _node(out, (q, k, v), bw, "attention")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead)
        db = g.sum(axis=lead)
        dxh = g * gain.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dg, db

    return _node(out, (x, gain, bias), bw, "layer_norm", check=False)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    bad = np.argwhere(norms[..., 0] <= eps)
    if bad.size:
        row = tuple(int(i) for i in bad[0])
        raise DegenerateInputError(f"row {row[0] if len(row) == 1 else row} has near-zero norm",
                                   index=row[0] if len(row) == 1 else row)
    out = x.data / norms

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _node(out, (x,), bw, "l2_normalize")


# -- losses -------------------------------------------------------------------
def softmax_cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-sum_j t_ij log softmax(logits)_ij``."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {t.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -(t * logp).sum() / n

    def bw(g):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return _node(np.asarray(loss), (logits,), bw, "softmax_cross_entropy_rows")


def cross_entropy_ids(logits: Tensor, ids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[..., id]`` over positions with weight > 0.

    ``logits`` has shape (..., V); ``ids`` and ``weights`` the leading shape.
    """
    ids = np.asarray(ids, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy_ids: no position carries loss")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = lse - z[rows, ids.reshape(-1)]
    wf = w.reshape(-1)
    loss = (nll * wf).sum() / total

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, ids.reshape(-1)] -= 1.0
        p *= (wf / total * g)[:, None]
        return (p.reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy_ids")


# -- backward -----------------------------------------------------------------
def _tape(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape:
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
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# -- PCA ------------------------------------------------------------------------
def pca_fit(x: Tensor | np.ndarray, k: int, tol: float = 1e-9, max_iter: int = 1000):
    """Principal components by power iteration with Hotelling deflation.

    Returns ``(components[k, d], scores[n, k], eigenvalues[k])``. Components are
    orthonormal, ordered by nonincreasing eigenvalue, and each has its
    largest-magnitude entry positive.
    """
    X = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("pca_fit needs at least two rows")
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} out of range for data of shape {X.shape}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    scale = max(np.abs(cov).max(), np.finfo(float).tiny)
    A = cov.copy()
    comps: list[np.ndarray] = []
    eigs: list[float] = []
    # deterministic start vectors
    starts = np.random.default_rng(0).standard_normal((k, d))
    for c in range(k):
        v = _orthogonalize(starts[c], comps)
        w = A @ v
        if np.linalg.norm(w) <= 1e-14 * scale:
            lam = 0.0
        else:
            for it in range(max_iter):
                w = _orthogonalize(A @ v, comps)
                nw = np.linalg.norm(w)
                if nw <= 1e-14 * scale:
                    break
                w /= nw
                done = 1.0 - abs(float(w @ v)) < tol
                v = w
                if done:
                    break
            else:
                raise NumericError(f"pca_fit: component {c} did not converge in {max_iter} iterations")
            lam = float(v @ cov @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        eigs.append(max(lam, 0.0) if lam > -1e-10 * scale else lam)
        A = A - lam * np.outer(v, v)
    components = np.array(comps)
    return Tensor(components), Tensor(Xc @ components.T), np.array(eigs)


def _orthogonalize(v: np.ndarray, basis: Iterable[np.ndarray]) -> np.ndarray:
    v = np.array(v, dtype=np.float64)
    for _ in range(2):
        for b in basis:
            v -= (v @ b) * b
    n = np.linalg.norm(v)
    if n == 0:
        raise NumericError("pca_fit: start vector collapsed")
    return v / n
