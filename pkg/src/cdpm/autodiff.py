"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: exactly the operations needed to express and train the
forecasting networks in this package. Every differentiable operation is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    Values are immutable after construction; only ``grad`` mutates, and only
    during backward passes. Graph edges live on the tensors themselves, so
    independent graphs confined to different threads share no mutable state.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def all_finite(self) -> bool:
        """On-demand NaN/Inf check; forward construction never blocks on it."""
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _make(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(_tracked(p) for p in parents):
        out._parents = parents
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class ComputeGraph:
    """Topologically ordered record of the operations reaching a root tensor.

    ``nodes`` lists every tensor in the graph with each operation's inputs
    strictly preceding it; a backward sweep over ``reversed(nodes)`` therefore
    visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.nodes = nodes


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reaching ``loss``.

    Repeated calls without clearing grads accumulate, and a tensor feeding
    several consumers receives the sum of all contributions.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    graph = ComputeGraph(loss)
    cotangent: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = cotangent.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not _tracked(parent):
                continue
            key = id(parent)
            if key in cotangent:
                cotangent[key] = cotangent[key] + pg
            else:
                cotangent[key] = pg


# -- elementwise and reduction operations -------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), vjp, "mul")


def tsum(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(np.float64, copy=False),)

    return _make(np.asarray(a.data.sum()), (a,), vjp, "sum")


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(np.float64, copy=False),)

    return _make(np.asarray(a.data.mean()), (a,), vjp, "mean")


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.data.shape}")

    def vjp(g):
        return (g.T,)

    return _make(a.data.T.copy(), (a,), vjp, "transpose")


def conv1d(x, kernels) -> Tensor:
    """Same-padded 1-D cross-correlation.

    ``x`` has shape (c_in, length) and ``kernels`` (c_out, c_in, w) with odd
    width ``w``; zero padding keeps the output length equal to the input
    length. Differentiable with respect to both arguments.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 2 or kernels.data.ndim != 3:
        raise ValueError(
            f"conv1d expects (c_in, len) and (c_out, c_in, w), got "
            f"{x.data.shape} and {kernels.data.shape}"
        )
    c_in, length = x.data.shape
    c_out, c_in_k, w = kernels.data.shape
    if c_in_k != c_in:
        raise ValueError(f"conv1d channel mismatch: {x.data.shape} vs {kernels.data.shape}")
    if w % 2 == 0:
        raise ValueError(f"conv1d kernel width must be odd, got {w}")
    pad = w // 2
    xpad = np.zeros((c_in, length + 2 * pad), dtype=np.float64)
    xpad[:, pad:pad + length] = x.data
    # im2col: (length, c_in * w) so the convolution is a single matmul
    cols = sliding_window_view(xpad, w, axis=1).transpose(1, 0, 2).reshape(length, c_in * w)
    k2 = kernels.data.reshape(c_out, c_in * w)
    data = k2 @ cols.T

    def vjp(g):
        dk = (g @ cols).reshape(c_out, c_in, w)
        dcols = (k2.T @ g).reshape(c_in, w, length)
        dxpad = np.zeros_like(xpad)
        for j in range(w):
            dxpad[:, j:j + length] += dcols[:, j, :]
        return dxpad[:, pad:pad + length], dk

    return _make(data, (x, kernels), vjp, "conv1d")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance.

    Uses the population variance with ``eps`` added before the square root;
    no learnable affine terms (callers scale and shift externally).
    """
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = np.mean(g * y, axis=-1, keepdims=True)
        return ((g - g_mean - y * gy_mean) * inv,)

    return _make(y, (x,), vjp, "layer_norm")


# -- nonlinearities ------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    x = as_tensor(x)
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(data, (x,), vjp, "gelu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)

    def vjp(g):
        # sigmoid via tanh for stability at large |x|
        return (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),)

    return _make(data, (x,), vjp, "softplus")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt requires non-negative input")
    root = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / root,)

    return _make(root, (x,), vjp, "sqrt")


def signed_sqrt(x) -> Tensor:
    """Odd extension of the square root: sign(x) * sqrt(|x|).

    Monotone and differentiable away from zero; the subgradient at zero is
    taken as zero.
    """
    x = as_tensor(x)
    absx = np.abs(x.data)
    root = np.sqrt(absx)
    data = np.sign(x.data) * root

    def vjp(g):
        d = np.zeros_like(absx)
        nz = absx > 0
        d[nz] = 0.5 / root[nz]
        return (g * d,)

    return _make(data, (x,), vjp, "signed_sqrt")


def expand_patches(x, patch_len: int, length: int) -> Tensor:
    """Broadcast per-patch values (P, d) to a series (length, d).

    Each patch value is repeated ``patch_len`` times along the first axis and
    the result truncated to ``length``. The backward pass sums the gradient
    over each patch's positions.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"expand_patches expects (P, d), got {x.data.shape}")
    p, d = x.data.shape
    if patch_len < 1 or p * patch_len < length:
        raise ValueError(
            f"{p} patches of length {patch_len} cannot cover {length} positions"
        )
    data = np.repeat(x.data, patch_len, axis=0)[:length]

    def vjp(g):
        full = np.zeros((p * patch_len, d), dtype=np.float64)
        full[:length] = g
        return (full.reshape(p, patch_len, d).sum(axis=1),)

    return _make(data, (x,), vjp, "expand_patches")


# -- verification helper -------------------------------------------------


def gradcheck(fn, inputs, h: float = 1e-5, clamp: float = 1e-8) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``fn`` maps Tensors to a scalar Tensor; every coordinate of every input is
    perturbed by ±h. The relative error denominator is clamped at ``clamp``.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    backward(out)

    def value(arrays):
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    base = [t.data.copy() for t in tensors]
    for i, t in enumerate(tensors):
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = base[i].reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = value(base)
            flat[j] = orig - h
            f_minus = value(base)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(clamp, abs(fd), abs(gflat[j]))
            worst = max(worst, abs(fd - gflat[j]) / denom)
    return worst
