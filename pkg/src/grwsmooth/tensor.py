"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tape` records every primitive applied to tensors that live on it.
Tensors created without a tape are constants: ops on them run eagerly and
record nothing, so the same loss code serves both the differentiated path
and plain evaluation (finite differences, reporting).

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
0-d operand. Anything else goes through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "sum",
    "mean",
    "max",
    "log_sum_exp",
    "softmax",
    "exp",
    "log",
    "tanh",
    "relu",
    "square",
    "power",
    "reshape",
    "transpose",
    "take",
    "slice_axis",
    "broadcast_to",
    "numeric_gradient",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of it routes to the module-level primitives
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records primitives in execution order for one backward sweep.

    Recording order is a topological order, so the backward pass is a single
    reverse scan. A tape is owned by one thread; nothing is shared between
    tapes.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[VJP | None] = []
        self._leaves: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._vjps)

    def variable(self, value) -> Tensor:
        """Register a leaf that gradients will be reported for."""
        data = np.array(value, dtype=np.float64)
        _check_finite(data, "variable")
        t = Tensor(data, self, len(self._vjps))
        self._parents.append(())
        self._vjps.append(None)
        self._leaves.append(t)
        return t

    def record(self, data: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
        out = Tensor(data, self, len(self._vjps))
        self._parents.append(tuple(p.node if p.tape is self else -1 for p in parents))
        self._vjps.append(vjp)
        return out

    def backward(self, root: Tensor) -> dict:
        """Gradients of scalar ``root`` with respect to every leaf of this tape.

        Returns a dict keyed by the leaf tensors. Fan-out is handled by summing
        contributions; each recorded node is visited once.
        """
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        if root.data.size != 1 or root.ndim != 0:
            raise ShapeError(f"backward needs a 0-d root, got shape {root.shape}")
        _check_finite(root.data, "backward root")
        grads: list[np.ndarray | None] = [None] * len(self._vjps)
        grads[root.node] = np.ones((), dtype=np.float64)
        for i in range(root.node, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            grads[i] = None
            parents = self._parents[i]
            for pid, pg in zip(parents, vjp(g)):
                if pid < 0 or pg is None:
                    continue
                prev = grads[pid]
                grads[pid] = pg if prev is None else prev + pg
        out = {}
        for leaf in self._leaves:
            g = grads[leaf.node]
            g = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
            _check_finite(g, "gradient")
            out[leaf] = g
        return out


def _check_finite(data: np.ndarray, where: str) -> None:
    # a single reduction: any NaN/Inf makes the sum non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.add.reduce(data, axis=None))
    if not np.isfinite(total) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value in {where}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> "Tape | None":
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _emit(name: str, data: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    _check_finite(data, name)
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    return tape.record(data, parents, vjp)


def _unscalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    # gradient flowing into a 0-d operand that was broadcast against a tensor
    if shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unscalar(g, sa), _unscalar(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unscalar(g, sa), _unscalar(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unscalar(g * bd, ad.shape), _unscalar(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(ad, p)
    return _emit("power", out, (a,), lambda g: (g * p * np.power(ad, p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        # overflow is reported by _emit as NonFiniteError
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit("log", out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of ``m×k`` and ``k×n`` operands.

    Stacks of matrices are accepted when the leading (batch) dimensions are
    identical; there is no broadcasting between batch shapes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def _expand_grad(g: np.ndarray, in_shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _emit("sum", out, (a,), lambda g: (_expand_grad(g, shape, axes, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum(a, axes, keepdims), 1.0 / count)


def max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes entirely to the lowest index
    attaining the maximum."""
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("max of an empty tensor")
    shape = a.shape
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx].reshape((1,) * a.ndim if keepdims else ())

        def vjp(g):
            gx = np.zeros(flat.shape)
            gx[idx] = g.reshape(())
            return (gx.reshape(shape),)

        return _emit("max", np.array(out), (a,), vjp)
    (ax,) = _norm_axes(axis, a.ndim)
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, gk, axis=ax)
        return (gx,)

    return _emit("max", out if keepdims else np.squeeze(out, ax), (a,), vjp)


def log_sum_exp(a, axis=None, keepdims: bool = False) -> Tensor:
    """``log Σ exp(a)`` computed as ``m + log Σ exp(a − m)`` with ``m`` the max."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if a.size == 0 or any(a.shape[i] == 0 for i in axes):
        raise ShapeError("log_sum_exp over an empty axis")
    shape = a.shape
    m = a.data.max(axis=axes, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axes, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axes)

    def vjp(g):
        return (_expand_grad(g, shape, axes, keepdims) * soft,)

    return _emit("log_sum_exp", out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", s, (a,), vjp)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, axes: Iterable[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    shape = a.shape

    def vjp(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim))))
        return (gx,)

    return _emit("take", np.take(a.data, idx, axis=ax), (a,), vjp)


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    a = as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    shape = a.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[sl] = g
        return (gx,)

    return _emit("slice", a.data[sl], (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    in_shape = a.shape
    lead = len(shape) - len(in_shape)
    expanded = tuple(i for i in range(len(shape))
                     if i < lead or in_shape[i - lead] == 1 and shape[i] != 1)

    def vjp(g):
        gx = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (gx.reshape(gx.shape[lead:]) if lead else gx,)

    return _emit("broadcast_to", out, (a,), vjp)


# ---------------------------------------------------------------- gradient checking


def numeric_gradient(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` around ``x``, one coordinate at a time."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros_like(x0)
    probe = x0.copy()
    flat_probe, flat_out = probe.reshape(-1), out.reshape(-1)
    for i in range(x0.size):
        orig = flat_probe[i]
        flat_probe[i] = orig + eps
        fp = float(f(Tensor(probe.copy())))
        flat_probe[i] = orig - eps
        fm = float(f(Tensor(probe.copy())))
        flat_probe[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite at probe {i}")
        flat_out[i] = (fp - fm) / (2.0 * eps)
    return out


def analytic_gradient(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    tape = Tape()
    leaf = tape.variable(as_tensor(x).data)
    y = f(leaf)
    if y.tape is None:
        # f ignored its input entirely
        return np.zeros(leaf.shape)
    return tape.backward(y)[leaf]


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The per-coordinate denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    analytic = analytic_gradient(f, x)
    numeric = numeric_gradient(f, x, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
