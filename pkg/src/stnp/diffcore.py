"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operator set the neural process needs is provided. Every op records
a node on an implicit tape (the parent links of its output tensor); calling
:func:`backward` on a scalar root walks the graph in reverse topological order
once and accumulates gradients, so shared subexpressions receive the sum of
all incoming contributions.

Numeric checking (NaN/Inf after every op) is on by default and can be turned
off for throughput with :func:`check_numerics`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericFailure",
    "Tensor",
    "as_tensor",
    "backward",
    "check_numerics",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "matmul",
    "conv3x3",
    "relu",
    "gelu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "mean_pool",
    "sum",
    "concat",
    "reshape",
    "transpose",
    "gaussian_nll",
    "kl_diag_gaussian",
    "numeric_grad",
    "relative_error",
]


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericFailure(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward value."""

    def __init__(self, message: str, op_id: int, op: str):
        super().__init__(message)
        self.op_id = op_id
        self.op = op


_ids = itertools.count()
_state = {"grad": True, "check": True}


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def check_numerics(enabled: bool = True):
    prev = _state["check"]
    _state["check"] = enabled
    try:
        yield
    finally:
        _state["check"] = prev


class Tensor:
    """A dense array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "op", "id", "_parents", "_backward", "requires_grad")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, id={self.id}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_pool(self, axis=axis, keepdims=keepdims)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          back: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(data, op=op)
    if _state["check"] and not np.all(np.isfinite(out.data)):
        raise NumericFailure(f"non-finite value produced by {op} (node {out.id})", out.id, op)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        ref = b.data.dtype if isinstance(b, Tensor) else None
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # fold leading axes: one large GEMM instead of many small ones
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), "matmul", back)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), "matmul", back)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (N, h+2, w+2, C) -> (N, h, w, 9*C), window order (dy, dx, c)
    cols = [xp[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    ``x`` is (N, H, W, Cin), ``weight`` is (3, 3, Cin, Cout).
    """
    if x.ndim != 4 or weight.shape[:2] != (3, 3) or weight.shape[2] != x.shape[3]:
        raise ContractViolation(f"conv3x3 shapes x={x.shape} w={weight.shape}")
    n, h, w, cin = x.shape
    cout = weight.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, h, w).reshape(-1, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = (cols @ wmat).reshape(n, h, w, cout)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(n, h, w, 9, cin)
        gxp = np.zeros_like(xp)
        k = 0
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy:dy + h, dx:dx + w, :] += gcols[:, :, :, k, :]
                k += 1
        gx = gxp[:, 1:-1, 1:-1, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return _make(out, parents, "conv3x3", back)


# ---------------------------------------------------------------- pointwise

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), "gelu", back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), "softplus", lambda g: (g * _sigmoid(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), "log", lambda g: (g / a.data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), "softmax", back)


def layer_norm(a: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv
        return (gx,)

    return _make(xhat, (a,), "layer_norm", back)


# ---------------------------------------------------------------- reductions and shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", back)


def mean_pool(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "mean_pool", back)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(out, tuple(ts), "concat", back)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), "slice", back)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None
               for i in items)


def _clamp_tiny_negative(a: Tensor, tol: float = 1e-12) -> Tensor:
    out = np.where((a.data < 0) & (a.data > -tol), 0.0, a.data).astype(a.dtype)
    return _make(out, (a,), "clamp", lambda g: (g,))


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every node in its graph.

    Returns a map from node id to gradient array. Leaf tensors with
    ``requires_grad`` also get their ``.grad`` attribute set (accumulated).
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    check = _state["check"]
    for node in reversed(_topo_order(root)):
        g = grads.get(node.id)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if check and not np.all(np.isfinite(pg)):
                raise NumericFailure(
                    f"non-finite gradient flowing out of {node.op} (node {node.id})",
                    node.id, node.op)
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return grads


# ---------------------------------------------------------------- losses

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_nll(y, mu, sigma) -> Tensor:
    """Elementwise negative log density of ``y`` under N(mu, sigma^2)."""
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ContractViolation("gaussian_nll needs sigma > 0")
    r = (y - mu) / sigma
    return log(sigma) + 0.5 * square(r) + _HALF_LOG_2PI


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    mu_q, sigma_q, mu_p, sigma_p = (as_tensor(t) for t in (mu_q, sigma_q, mu_p, sigma_p))
    shapes = {mu_q.shape, sigma_q.shape, mu_p.shape, sigma_p.shape}
    if len(shapes) != 1:
        raise ContractViolation(f"kl_diag_gaussian length mismatch: {sorted(shapes)}")
    if np.any(sigma_q.data <= 0) or np.any(sigma_p.data <= 0):
        raise ContractViolation("kl_diag_gaussian needs positive sigmas")
    var_ratio = square(sigma_q / sigma_p)
    mean_term = square((mu_q - mu_p) / sigma_p)
    per_dim = 0.5 * (var_ratio + mean_term - 1.0) - log(sigma_q / sigma_p)
    return _clamp_tiny_negative(sum(per_dim, axis=-1))


# ---------------------------------------------------------------- finite differences

def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``f()`` w.r.t. ``array`` (mutated in place, restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), 1e-12)
    return float(diff / scale)
