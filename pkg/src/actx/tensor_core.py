"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every differentiable value is a :class:`DiffValue` wrapping a numpy array.
Operations record their parents and a vector-Jacobian product closure;
:func:`backward` walks the recorded graph in a deterministic reverse
topological order and accumulates gradients.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()


class TensorError(ValueError):
    """Raised for invalid shapes, dims, or non-finite values."""


class ShapeMismatchError(TensorError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


def as_tensor(x) -> np.ndarray:
    """Copy ``x`` into a contiguous float64 array with at least one dim."""
    arr = np.array(x, dtype=DTYPE, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0:
        raise TensorError("tensor must be nonempty")
    return arr


class DiffValue:
    """A tensor value on the recorded graph, with a lazily created gradient."""

    __array_priority__ = 100.0

    def __init__(
        self,
        value,
        parents: Sequence["DiffValue"] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
        requires_grad: bool | None = None,
        replay: Callable[..., np.ndarray] | None = None,
    ):
        value = np.asarray(value, dtype=DTYPE)
        if value.ndim == 0:
            value = value.reshape(1)
        # a finite sum implies finite entries; only scan when it is not
        if not np.isfinite(value.sum()) and not np.isfinite(value).all():
            raise TensorError(f"{op}: produced non-finite values")
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self._vjp = vjp
        self._replay = replay
        self.id = next(_node_ids)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "DiffValue":
        return DiffValue(self.value.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"DiffValue(op={self.op}, shape={self.shape})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return ewise("add", self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ewise("sub", self, _lift(other))

    def __rsub__(self, other):
        return ewise("sub", _lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return ewise("mul", self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return ewise("div", self, _lift(other))

    def __rtruediv__(self, other):
        return ewise("div", _lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    return constant(x)


def variable(x) -> DiffValue:
    """A leaf that collects gradients."""
    return DiffValue(as_tensor(x), requires_grad=True)


def constant(x) -> DiffValue:
    """A leaf that never collects gradients."""
    return DiffValue(as_tensor(x), requires_grad=False)


def _make(value, parents, vjp, op, replay) -> DiffValue:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return DiffValue(value, parents, vjp if needs else None, op, needs, replay)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_UNARY = {"relu", "sigmoid", "exp", "log", "sqrt", "max-with-zero", "neg", "abs"}
_BINARY = {"add", "sub", "mul", "div"}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unary_forward(op: str, x: np.ndarray) -> np.ndarray:
    if op in ("relu", "max-with-zero"):
        return np.where(x > 0, x, 0.0)
    if op == "sigmoid":
        return _sigmoid(x)
    if op == "exp":
        with np.errstate(over="ignore"):
            return np.exp(x)
    if op == "log":
        if np.any(x <= 0):
            raise TensorError("log: input must be positive")
        return np.log(x)
    if op == "sqrt":
        if np.any(x < 0):
            raise TensorError("sqrt: input must be nonnegative")
        return np.sqrt(x)
    if op == "neg":
        return -x
    if op == "abs":
        return np.abs(x)
    raise TensorError(f"unknown unary op {op!r}")


def _binary_forward(op: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if op == "add":
        return x + y
    if op == "sub":
        return x - y
    if op == "mul":
        return x * y
    if op == "div":
        if np.any(y == 0):
            raise TensorError("div: division by zero")
        return x / y
    raise TensorError(f"unknown binary op {op!r}")


def _reduce_scalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    # gradient for an operand that was broadcast as a one-element scalar
    return np.array(g.sum(), dtype=DTYPE).reshape(shape)


def ewise(op: str, a: DiffValue, b: DiffValue | None = None, c: float | None = None) -> DiffValue:
    """Elementwise op.

    Binary ops need equal shapes, or one operand holding a single element.
    ``scale-by-constant`` takes the constant in ``c``.
    """
    if op == "scale-by-constant":
        if c is None:
            raise TensorError("scale-by-constant needs a constant")
        return scale(a, c)
    if op in _UNARY:
        if b is not None:
            raise TensorError(f"{op} is unary")
        x = a.value
        out = _unary_forward(op, x)
        if op in ("relu", "max-with-zero"):
            def vjp(g):
                return (g * (x > 0),)
        elif op == "sigmoid":
            def vjp(g):
                return (g * out * (1.0 - out),)
        elif op == "exp":
            def vjp(g):
                return (g * out,)
        elif op == "log":
            def vjp(g):
                return (g / x,)
        elif op == "sqrt":
            def vjp(g):
                return (g * 0.5 / np.where(out > 0, out, np.inf),)
        elif op == "neg":
            def vjp(g):
                return (-g,)
        else:
            def vjp(g):
                return (g * np.sign(x),)
        return _make(out, (a,), vjp, op, lambda v: _unary_forward(op, v))

    if op not in _BINARY:
        raise TensorError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TensorError(f"{op} needs two operands")
    x, y = a.value, b.value
    if x.shape != y.shape and x.size != 1 and y.size != 1:
        raise ShapeMismatchError(op, x.shape, y.shape)
    out_shape = x.shape if x.size >= y.size else y.shape
    xs = x.reshape(()) if x.shape != out_shape else x
    ys = y.reshape(()) if y.shape != out_shape else y
    out = _binary_forward(op, xs, ys).reshape(out_shape)
    x, y = xs, ys

    a_shape, b_shape = a.shape, b.shape

    def fit(g, shape):
        return g if shape == out_shape else _reduce_scalar(g, shape)

    if op == "add":
        def vjp(g):
            return fit(g, a_shape), fit(g, b_shape)
    elif op == "sub":
        def vjp(g):
            return fit(g, a_shape), fit(-g, b_shape)
    elif op == "mul":
        def vjp(g):
            return fit(g * y, a_shape), fit(g * x, b_shape)
    else:
        def vjp(g):
            return fit(g / y, a_shape), fit(-g * x / (y * y), b_shape)

    def fwd(u, v):
        u = u.reshape(()) if u.shape != out_shape else u
        v = v.reshape(()) if v.shape != out_shape else v
        return _binary_forward(op, u, v).reshape(out_shape)

    return _make(out, (a, b), vjp, op, fwd)


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale", lambda v: v * c)


def relu(a):
    return ewise("relu", a)


def sigmoid(a):
    return ewise("sigmoid", a)


def exp(a):
    return ewise("exp", a)


def log(a):
    return ewise("log", a)


def sqrt(a):
    return ewise("sqrt", a)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a: DiffValue, shape: Sequence[int]) -> DiffValue:
    try:
        shape = a.value.reshape(tuple(int(s) for s in shape)).shape
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape",
                 lambda v: v.reshape(shape))


def transpose(a: DiffValue, axes: Sequence[int] | None = None) -> DiffValue:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose",
                 lambda v: np.ascontiguousarray(v.transpose(axes)))


def broadcast_to(a: DiffValue, shape: Sequence[int]) -> DiffValue:
    """Explicit numpy-style broadcast; the backward pass sums the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    except ValueError:
        raise ShapeMismatchError("broadcast_to", src, shape) from None
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), vjp, "broadcast_to",
                 lambda v: np.ascontiguousarray(np.broadcast_to(v, shape)))


def take(a: DiffValue, index, axis: int = 0) -> DiffValue:
    """Select entries along ``axis`` by an integer index array."""
    idx = np.asarray(index, dtype=np.intp)
    src = a.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.value, idx, axis=axis), (a,), vjp, "take",
                 lambda v: np.take(v, idx, axis=axis))


def concat(a: DiffValue, b: DiffValue, dim: int = 0) -> DiffValue:
    if a.ndim != b.ndim:
        raise ShapeMismatchError("concat", a.shape, b.shape)
    dim = norm_dim(dim, a.ndim)
    for i, (m, n) in enumerate(zip(a.shape, b.shape)):
        if i != dim and m != n:
            raise ShapeMismatchError("concat", a.shape, b.shape)
    split = a.shape[dim]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=dim)
        return ga, gb

    return _make(np.concatenate([a.value, b.value], axis=dim), (a, b), vjp, "concat",
                 lambda u, v: np.concatenate([u, v], axis=dim))


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    x, y = a.value, b.value

    def vjp(g):
        return g @ y.T, x.T @ g

    return _make(x @ y, (a, b), vjp, "matmul", lambda u, v: u @ v)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def norm_dim(d: int, ndim: int) -> int:
    if not -ndim <= d < ndim:
        raise TensorError(f"dim {d} out of range for {ndim}-D tensor")
    return d % ndim


def norm_dims(dims, ndim: int) -> tuple[int, ...]:
    if dims is None:
        return tuple(range(ndim))
    if isinstance(dims, int):
        dims = (dims,)
    out = tuple(sorted({norm_dim(d, ndim) for d in dims}))
    return out


def reduce(op: str, a: DiffValue, dims=None, keep_dims: bool = False) -> DiffValue:
    """Sum, mean, or population standard deviation over ``dims`` (all when None)."""
    if a.size == 0:
        raise TensorError("reduce over empty tensor")
    axes = norm_dims(dims, a.ndim)
    x = a.value
    count = int(np.prod([x.shape[d] for d in axes])) if axes else 1
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def finish(v):
        return v if keep_dims else v.reshape(
            tuple(n for i, n in enumerate(x.shape) if i not in axes) or (1,))

    if op == "sum":
        out = x.sum(axis=axes, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)

        fwd = lambda v: finish(v.sum(axis=axes, keepdims=True))
    elif op == "mean":
        out = x.mean(axis=axes, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)

        fwd = lambda v: finish(v.mean(axis=axes, keepdims=True))
    elif op in ("std", "population-std"):
        mu = x.mean(axis=axes, keepdims=True)
        with np.errstate(over="ignore"):
            out = np.sqrt(((x - mu) ** 2).mean(axis=axes, keepdims=True))

        def vjp(g):
            safe = np.where(out > 0, out, np.inf)
            return (g.reshape(kept_shape) * (x - mu) / (count * safe),)

        def fwd(v):
            m = v.mean(axis=axes, keepdims=True)
            return finish(np.sqrt(((v - m) ** 2).mean(axis=axes, keepdims=True)))
    else:
        raise TensorError(f"unknown reduction {op!r}")
    return _make(finish(out), (a,), vjp, f"reduce-{op}", fwd)


def sum_all(a: DiffValue) -> DiffValue:
    return reduce("sum", a)


def mean_all(a: DiffValue) -> DiffValue:
    return reduce("mean", a)


def softmax_over(a: DiffValue, dims=None) -> DiffValue:
    """Softmax normalized jointly over ``dims``; max-subtracted for stability."""
    axes = norm_dims(dims, a.ndim)

    def fwd(v):
        e = np.exp(v - v.max(axis=axes, keepdims=True))
        return e / e.sum(axis=axes, keepdims=True)

    out = fwd(a.value)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axes, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax", fwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _patches(x: np.ndarray, ksize: tuple[int, int, int]) -> np.ndarray:
    """Zero-padded neighbourhoods: ``(T*H*W) × (kt*kh*kw*C)``, kernel-offset major."""
    kt, kh, kw = ksize
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    T, H, W, C = x.shape
    xp = np.pad(x, ((pt, pt), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=(0, 1, 2))
    # win: T×H×W×C×kt×kh×kw
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3)).reshape(T * H * W, kt * kh * kw * C)


def _conv3d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    T, H, W = x.shape[:3]
    cout = k.shape[4]
    out = _patches(x, k.shape[:3]) @ k.reshape(-1, cout)
    return out.reshape(T, H, W, cout) + b


def conv3d(x: DiffValue, kernel: DiffValue, bias: DiffValue) -> DiffValue:
    """Same-padded direct 3-D convolution over a ``T×H×W×C_in`` volume.

    ``kernel`` is ``k_t×k_h×k_w×C_in×C_out`` with odd extents; ``bias`` has
    ``C_out`` entries. Zero padding keeps ``T, H, W`` unchanged.
    """
    if x.ndim != 4:
        raise TensorError(f"conv3d input must be T×H×W×C, got {x.shape}")
    if kernel.ndim != 5:
        raise TensorError(f"conv3d kernel must be 5-D, got {kernel.shape}")
    if any(e % 2 == 0 for e in kernel.shape[:3]):
        raise TensorError(f"conv3d kernel extents must be odd, got {kernel.shape[:3]}")
    if kernel.shape[3] != x.shape[3]:
        raise ShapeMismatchError("conv3d", x.shape, kernel.shape)
    if bias.shape != (kernel.shape[4],):
        raise ShapeMismatchError("conv3d bias", bias.shape, (kernel.shape[4],))
    xv, kv = x.value, kernel.value
    ksize = kv.shape[:3]
    cout = kv.shape[4]
    cols = _patches(xv, ksize)
    out = (cols @ kv.reshape(-1, cout)).reshape(*xv.shape[:3], cout) + bias.value

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kv.shape)
        # input gradient is a same-padded correlation of g with the flipped, transposed kernel
        flipped = np.ascontiguousarray(kv[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
        gx = (_patches(g, ksize) @ flipped.reshape(-1, xv.shape[3])).reshape(xv.shape)
        return gx, gk, g2.sum(axis=0)

    return _make(out, (x, kernel, bias), vjp, "conv3d", _conv3d_forward)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in sorted(node.parents, key=lambda n: n.id, reverse=True):
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffValue) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every participating node."""
    if root.size != 1:
        raise TensorError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)


def replay(root: DiffValue) -> dict[int, np.ndarray]:
    """Recompute every node under ``root`` from its leaves.

    Returns node id -> recomputed value. Nodes built by callers without a
    replay function are treated as leaves.
    """
    values: dict[int, np.ndarray] = {}
    for node in _topo_order(root):
        if node._replay is None or not node.parents:
            values[node.id] = node.value
        else:
            values[node.id] = node._replay(*(values[p.id] for p in node.parents))
    return values


class GraphReplay:
    """Re-evaluate a recorded scalar graph with one leaf replaced.

    Only descendants of the replaced leaf are recomputed, so probing a
    parameter near the output is much cheaper than rebuilding the graph.
    Decisions taken while the graph was built (such as which order
    statistics form a percentile pivot) are replayed as recorded.
    """

    def __init__(self, root: DiffValue):
        if root.size != 1:
            raise TensorError(f"replay needs a scalar root, got shape {root.shape}")
        self.root = root
        self._order = _topo_order(root)
        self._base = {n.id: n.value for n in self._order}
        self._downstream: dict[int, list[DiffValue]] = {}

    def _nodes_after(self, leaf: DiffValue) -> list[DiffValue]:
        if leaf.id not in self._downstream:
            hit = {leaf.id}
            nodes = []
            for node in self._order:
                if node.id != leaf.id and any(p.id in hit for p in node.parents):
                    if node._replay is None:
                        raise TensorError(f"{node.op}: node cannot be replayed")
                    hit.add(node.id)
                    nodes.append(node)
            self._downstream[leaf.id] = nodes
        return self._downstream[leaf.id]

    def evaluate(self, leaf: DiffValue, value) -> float:
        if leaf.id not in self._base:
            raise TensorError("leaf is not part of the recorded graph")
        value = np.asarray(value, dtype=DTYPE).reshape(leaf.shape)
        changed = {leaf.id: value}
        base = self._base
        for node in self._nodes_after(leaf):
            args = [changed[p.id] if p.id in changed else base[p.id] for p in node.parents]
            changed[node.id] = node._replay(*args)
        out = changed.get(self.root.id, base[self.root.id])
        return float(np.asarray(out).reshape(-1)[0])


def zero_grads(params: Iterable[DiffValue]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one tensor."""
    x = as_tensor(at).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn(x))
        flat[i] = orig - h
        fm = float(loss_fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise TensorError(f"finite_diff_grad: non-finite loss at coordinate {tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max over entries of ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
