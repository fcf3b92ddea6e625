"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, while tracing is enabled, records
the primitive that produced it together with a closure that pushes the output
gradient back to its parents.  ``Tensor.backward`` walks the recorded graph in
reverse topological order exactly once.

Broadcasting follows numpy rules; gradients of broadcast operands are summed
back to the operand's shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_TRACING = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _TRACING
    prev, _TRACING = _TRACING, False
    try:
        yield
    finally:
        _TRACING = prev


def is_tracing() -> bool:
    return _TRACING


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def tanh(self):
        return tanh(self)

    def silu(self):
        return silu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data)
    if _TRACING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ops -----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _make(a.data**p, (a,), "pow", bw)


# -- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2 operand, got {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: _accumulate(a, g.T))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


# -- reductions -----------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean", bw)


# -- elementwise unary ----------------------------------------------------------
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: _accumulate(a, g * (1.0 - out * out)))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out, (a,), "silu", bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: _accumulate(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: _accumulate(a, g * 0.5 / out))


def abs_(a) -> Tensor:
    """Absolute value; the derivative at 0 is taken as 0 (a kink)."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), "abs", lambda g: _accumulate(a, g * np.sign(a.data)))


# -- structural -----------------------------------------------------------------
def concatenate(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concatenate: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concatenate: incompatible shapes {ts[0].shape} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=ax)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, "concatenate", bw)


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(a.data[idx], (a,), "slice", bw)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale ``a`` to unit Euclidean norm along ``axis``."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: zero-norm input")
    out = a.data / norm

    def bw(g):
        # (I - u u^T) g / |a|
        proj = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - out * proj) / norm)

    return _make(out, (a,), "l2_normalize", bw)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    return (l2_normalize(a, axis) * l2_normalize(b, axis)).sum(axis=axis)


# -- graph traversal ------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not depend on any tensor requiring grad")
    order = _topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


def grad(root: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Return d(root)/d(leaf) for each leaf, leaving ``.grad`` fields untouched."""
    leaves = list(leaves)
    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    backward(root)
    out = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    for leaf, s in zip(leaves, saved):
        leaf.grad = s
    return out


# -- gradient verification --------------------------------------------------------
@dataclass
class GradCheck:
    """Outcome of a finite-difference comparison.

    ``max_rel_err`` is max over checked coordinates of |AD - FD| / max(1, |FD|).
    Coordinates where the one-sided differences disagree are listed in
    ``kinks``; the comparison there is not meaningful and ``reliable`` is False.
    """

    max_rel_err: float
    n_coords: int
    kinks: list[tuple] = field(default_factory=list)

    @property
    def reliable(self) -> bool:
        return not self.kinks

    def __float__(self) -> float:
        return self.max_rel_err


def _finite(v: float, where: str) -> float:
    if not np.isfinite(v):
        raise FloatingPointError(f"grad_check: non-finite evaluation at {where}")
    return v


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-2,
) -> GradCheck:
    """Central-difference check of ``f()`` with respect to named parameter tensors.

    ``f`` must rebuild its graph from the current ``.data`` of ``params`` on every
    call.  With ``coords_per_param`` set, a seeded random subset of coordinates of
    each tensor is checked instead of all of them.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    names = list(params)
    for p in params.values():
        p.requires_grad = True
    root = f()
    _finite(root.item(), "base point")
    ad = dict(zip(names, grad(root, [params[n] for n in names])))

    worst, count, kinks = 0.0, 0, []
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(flat.size, coords_per_param, replace=False))
        with no_grad():
            f0 = root.item()
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = _finite(f().item(), f"{name}[{i}]+h")
                flat[i] = orig - step
                fm = _finite(f().item(), f"{name}[{i}]-h")
                flat[i] = orig
                fd = (fp - fm) / (2 * step)
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fd)):
                    kinks.append((name, int(i)))
                    continue
                err = abs(ad[name].reshape(-1)[i] - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
                count += 1
    return GradCheck(worst, count, kinks)


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> GradCheck:
    """Compare reverse-mode gradients of scalar ``f`` at ``point`` with central differences."""
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    return grad_check_params(lambda: f(x), {"x": x}, step=step)
