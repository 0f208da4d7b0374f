"""Reverse-mode automatic differentiation over dense numpy tensors.

A `Tape` records every operation whose inputs are taped, in creation order, so the
record is already topologically sorted. `backward` walks it once in reverse.

Tensors may additionally carry a forward-mode `tangent` (shape = value shape + (n,)).
Tangent rules are written with taped ops, which lets `linearize` return a Jacobian that
is itself differentiable with respect to everything else on the tape. The dEKF relies on
this to keep its process-model linearization in the gradient path.
"""

import logging
import threading
from concurrent.futures import Executor, Future
from contextlib import contextmanager
from contextvars import ContextVar, copy_context
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg as sla
from scipy.linalg import lapack
from scipy.special import logsumexp as _np_logsumexp

from app.core.config import settings
from app.core.errors import ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_PROCESS_DTYPE = np.dtype(settings.precision)
_SCOPED_DTYPE: ContextVar[Optional[np.dtype]] = ContextVar("dfkit_precision", default=None)


def _checked_dtype(name: str) -> np.dtype:
    if name not in ("float32", "float64"):
        raise ContractError(f"unsupported precision '{name}'")
    return np.dtype(name)


def set_precision(name: str) -> None:
    """Set the process default dtype ("float32" or "float64"). Scopes override it."""
    global _PROCESS_DTYPE
    _PROCESS_DTYPE = _checked_dtype(name)


def default_dtype() -> np.dtype:
    scoped = _SCOPED_DTYPE.get()
    return scoped if scoped is not None else _PROCESS_DTYPE


@contextmanager
def precision_scope(name: str):
    """Switch precision for the current context only (thread or task)."""
    token = _SCOPED_DTYPE.set(_checked_dtype(name))
    try:
        yield
    finally:
        _SCOPED_DTYPE.reset(token)


def submit_in_context(pool: Executor, fn: Callable, *args) -> Future:
    """Submit fn to pool under a copy of the caller's context, precision scope included."""
    return pool.submit(copy_context().run, fn, *args)


@dataclass
class _Node:
    index: int
    parents: Tuple[Optional[int], ...]
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: Tuple[int, ...]
    name: Optional[str] = None


class Tape:
    """Ordered operation record. Confined to the thread that created it."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._owner = threading.get_ident()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> "Tensor":
        data = _as_array(value)
        t = Tensor(data)
        t.tape = self
        t.node = self._append(_Node(len(self.nodes), (), None, data.shape, name))
        return t

    def leaves(self) -> List[_Node]:
        return [n for n in self.nodes if n.vjp is None]

    def _append(self, node: _Node) -> int:
        if threading.get_ident() != self._owner:
            raise ContractError("a Tape may only be used by the thread that created it")
        self.nodes.append(node)
        return node.index


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    dtype = default_dtype()
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """A dense array, optionally registered on a Tape."""

    __slots__ = ("data", "tape", "node", "tangent")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[int] = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node
        self.tangent: Optional["Tensor"] = None

    # structure
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def taped(self) -> bool:
        return self.node is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.taped else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value: TensorLike) -> Tensor:
    """An untaped copy of the value: blocks gradients."""
    return Tensor(_as_array(value))


# ---------------------------------------------------------------------------
# op plumbing

def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp,
            jvp: Optional[Callable[[List[Optional[Tensor]]], Tensor]] = None) -> Tensor:
    tape = None
    for t in inputs:
        if t.taped:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{name}: inputs belong to different tapes")
            tape = t.tape
    out = Tensor(out_data)
    if tape is not None:
        parents = tuple(t.node if t.taped else None for t in inputs)
        out.tape = tape
        out.node = tape._append(_Node(len(tape.nodes), parents, vjp, out.data.shape, name))
    tangents = [t.tangent for t in inputs]
    if any(tg is not None for tg in tangents):
        if jvp is None:
            raise ContractError(f"{name} has no forward-mode rule")
        out.tangent = jvp(tangents)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tangent_dim(tangents: Iterable[Optional[Tensor]]) -> int:
    for t in tangents:
        if t is not None:
            return t.shape[-1]
    raise ContractError("no tangent present")


def _p(x: Tensor) -> Tensor:
    """The primal value of x without its tangent (same tape node)."""
    return Tensor(x.data, x.tape, x.node) if x.tangent is not None else x


def _expand(x: Tensor) -> Tensor:
    """Append a unit axis so a value broadcasts against its tangent."""
    x = _p(x)
    return reshape(x, x.shape + (1,))


def _zero_tangent(shape: Tuple[int, ...], n: int) -> Tensor:
    return Tensor(np.zeros(shape + (n,), dtype=default_dtype()))


def _check_shapes(name: str, fn, *arrays):
    try:
        return fn(*arrays)
    except ValueError as e:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{name}: incompatible shapes {shapes}: {e}") from e


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check_shapes("add", np.add, a.data, b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def jvp(ts):
        n = _tangent_dim(ts)
        ta = ts[0] if ts[0] is not None else _zero_tangent(out.shape, n)
        return ta + ts[1] if ts[1] is not None else ta + _zero_tangent(out.shape, n)

    return _record("add", (a, b), out, vjp, jvp)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check_shapes("sub", np.subtract, a.data, b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    def jvp(ts):
        n = _tangent_dim(ts)
        ta = ts[0] if ts[0] is not None else _zero_tangent(out.shape, n)
        return ta - ts[1] if ts[1] is not None else ta + _zero_tangent(out.shape, n)

    return _record("sub", (a, b), out, vjp, jvp)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,), lambda ts: -ts[0])


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check_shapes("mul", np.multiply, a.data, b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    def jvp(ts):
        n = _tangent_dim(ts)
        parts = []
        if ts[0] is not None:
            parts.append(ts[0] * _expand(b))
        if ts[1] is not None:
            parts.append(_expand(a) * ts[1])
        total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
        return total if total.shape == out.shape + (n,) else total + _zero_tangent(out.shape, n)

    return _record("mul", (a, b), out, vjp, jvp)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check_shapes("div", np.divide, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    def jvp(ts):
        if ts[1] is not None:
            raise ContractError("div has no forward-mode rule for a varying denominator")
        t = ts[0] / _expand(b)
        n = t.shape[-1]
        return t if t.shape == out.shape + (n,) else t + _zero_tangent(out.shape, n)

    return _record("div", (a, b), out, vjp, jvp)


# ---------------------------------------------------------------------------
# linear algebra and structure

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed, use mul")
    out = _check_shapes("matmul", np.matmul, a.data, b.data)
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data

    def vjp(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = _unbroadcast(g2 @ _swap(b2), a2.shape).reshape(a.shape)
        gb = _unbroadcast(_swap(a2) @ g2, b2.shape).reshape(b.shape)
        return ga, gb

    def jvp(ts):
        if a.ndim > 2 or b.ndim > 2:
            raise ContractError("matmul forward-mode rule supports at most 2-D operands")
        n = _tangent_dim(ts)
        parts = []
        pa, pb = _p(a), _p(b)
        if ts[1] is not None:
            k = b.shape[0]
            flat = reshape(ts[1], (k, -1))
            parts.append(reshape(matmul(pa, flat), out.shape + (n,)))
        if ts[0] is not None:
            if a.ndim == 1:
                r = matmul(transpose(ts[0]), pb)
                parts.append(transpose(r) if b.ndim == 2 else r)
            else:
                r = matmul(transpose(ts[0], (0, 2, 1)), pb)
                parts.append(transpose(r, (0, 2, 1)) if b.ndim == 2 else r)
        return parts[0] if len(parts) == 1 else parts[0] + parts[1]

    return _record("matmul", (a, b), out, vjp, jvp)


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two (matrix transpose)."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            perm = tuple(range(x.ndim))[::-1]
        else:
            perm = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    else:
        perm = tuple(int(p) % x.ndim for p in axes)
    inv = tuple(np.argsort(perm))
    out = np.transpose(x.data, perm)
    return _record("transpose", (x,), out,
                   lambda g: (np.transpose(g, inv),),
                   lambda ts: transpose(ts[0], perm + (x.ndim,)))


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from e
    return _record("reshape", (x,), out,
                   lambda g: (g.reshape(x.shape),),
                   lambda ts: reshape(ts[0], out.shape + (ts[0].shape[-1],)))


def concat(xs: Sequence[TensorLike], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ndim = xs[0].ndim
    axis = axis % ndim
    out = _check_shapes("concat", lambda *arrs: np.concatenate(arrs, axis=axis), *[x.data for x in xs])
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    def jvp(ts):
        n = _tangent_dim(ts)
        full = [t if t is not None else _zero_tangent(x.shape, n) for t, x in zip(ts, xs)]
        return concat(full, axis=axis)

    return _record("concat", xs, out, vjp, jvp)


def stack(xs: Sequence[TensorLike], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % (xs[0].ndim + 1)
    out = _check_shapes("stack", lambda *arrs: np.stack(arrs, axis=axis), *[x.data for x in xs])

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    def jvp(ts):
        n = _tangent_dim(ts)
        full = [t if t is not None else _zero_tangent(x.shape, n) for t, x in zip(ts, xs)]
        return stack(full, axis=axis)

    return _record("stack", xs, out, vjp, jvp)


def _normalize_index(idx, ndim: int):
    if not isinstance(idx, tuple):
        idx = (idx,)
    if any(i is Ellipsis for i in idx):
        pos = next(k for k, i in enumerate(idx) if i is Ellipsis)
        used = sum(1 for i in idx if i is not None and i is not Ellipsis)
        idx = idx[:pos] + (slice(None),) * (ndim - used) + idx[pos + 1:]
    return idx


def take(x: TensorLike, idx) -> Tensor:
    """Basic or advanced indexing (`slice` in the op table); gradients scatter-add back."""
    x = as_tensor(x)
    idx = _normalize_index(idx, x.ndim)
    try:
        out = x.data[idx]
    except IndexError as e:
        raise ShapeError(f"slice: {e}") from e
    out = np.array(out, dtype=x.data.dtype)

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record("slice", (x,), out, vjp, lambda ts: take(ts[0], idx))


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(x.data.dtype)
    return _record("relu", (x,), x.data * mask,
                   lambda g: (g * mask,),
                   lambda ts: ts[0] * Tensor(mask[..., None]))


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,),
                   lambda ts: ts[0] * _expand(exp(_p(x))))


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _record("log", (x,), out,
                   lambda g: (g / x.data,),
                   lambda ts: ts[0] / _expand(x))


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out,
                   lambda g: (g * 0.5 / out,),
                   lambda ts: ts[0] * 0.5 / _expand(sqrt(_p(x))))


def square(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _record("square", (x,), x.data * x.data,
                   lambda g: (2.0 * g * x.data,),
                   lambda ts: ts[0] * _expand(x) * 2.0)


def sign(x: TensorLike) -> Tensor:
    """sgn with sgn(0) = 0. Piecewise constant: the result is never taped."""
    return Tensor(np.sign(as_tensor(x).data))


def stop_gradient(x: TensorLike) -> Tensor:
    return constant(x)


def absolute(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return x * sign(x)


# ---------------------------------------------------------------------------
# reductions

def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), vjp,
                   lambda ts: reduce_sum(ts[0], axes, keepdims))


def reduce_mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axes, keepdims) * (1.0 / count)


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _record("softmax", (x,), s, vjp)


def logsumexp(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(_np_logsumexp(x.data, axis=axis))

    def vjp(g):
        s = np.exp(x.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * s,)

    return _record("logsumexp", (x,), out, vjp)


# ---------------------------------------------------------------------------
# factorizations

def _failing_minor(a: np.ndarray) -> int:
    """1-based order of the first leading minor that is not positive definite."""
    flat = a.reshape((-1,) + a.shape[-2:])
    for m in flat:
        _, info = lapack.dpotrf(np.asarray(m, dtype=np.float64), lower=1)
        if info > 0:
            return int(info)
    return 0


def _cholesky_array(a: np.ndarray, op: str = "cholesky") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op}: input contains non-finite values")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        minor = _failing_minor(a)
        raise NumericError(f"{op}: matrix is not positive definite (leading minor {minor})",
                           minor_index=minor)


def cholesky(a: TensorLike) -> Tensor:
    """Lower Cholesky factor; the adjoint is returned symmetrized."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cholesky: expected square matrices, got {a.shape}")
    l = _cholesky_array(a.data)

    def vjp(g):
        p = _swap(l) @ g
        p = np.tril(p) - 0.5 * np.eye(l.shape[-1]) * p
        # S = L^-T P L^-1
        linv = np.linalg.inv(l)
        s = _swap(linv) @ p @ linv
        return (0.5 * (s + _swap(s)),)

    return _record("cholesky", (a,), l, vjp)


def triangular_solve(l: TensorLike, b: TensorLike, lower: bool = True) -> Tensor:
    """X = L^-1 B for a triangular L (matrix or batch of matrices), B vector or matrix."""
    l, b = as_tensor(l), as_tensor(b)
    if l.ndim < 2 or l.shape[-1] != l.shape[-2]:
        raise ShapeError(f"triangular_solve: expected square factor, got {l.shape}")
    vector = b.ndim == l.ndim - 1
    bm = b.data[..., None] if vector else b.data
    if bm.shape[-2] != l.shape[-1]:
        raise ShapeError(f"triangular_solve: {l.shape} incompatible with {b.shape}")
    xm = np.empty(np.broadcast_shapes(l.shape[:-2], bm.shape[:-2]) + bm.shape[-2:], dtype=bm.dtype)
    lb = np.broadcast_to(l.data, xm.shape[:-2] + l.shape[-2:])
    bb = np.broadcast_to(bm, xm.shape)
    for i in np.ndindex(xm.shape[:-2]):
        xm[i] = sla.solve_triangular(lb[i], bb[i], lower=lower, check_finite=False)
    if not np.all(np.isfinite(xm)):
        raise NumericError("triangular_solve: singular factor")
    out = xm[..., 0] if vector else xm

    def vjp(g):
        gm = g[..., None] if vector else g
        gb = np.empty_like(xm)
        for i in np.ndindex(xm.shape[:-2]):
            gb[i] = sla.solve_triangular(lb[i], gm[i], lower=lower, trans=1, check_finite=False)
        gl = -(gb @ _swap(xm))
        gl = np.tril(gl) if lower else np.triu(gl)
        gl = _unbroadcast(gl, l.shape)
        gbo = _unbroadcast(gb, bm.shape)
        return gl, (gbo[..., 0] if vector else gbo)

    return _record("triangular_solve", (l, b), out, vjp)


def logdet(a: TensorLike) -> Tensor:
    """log|A| of a symmetric positive definite matrix via its Cholesky factor."""
    a = as_tensor(a)
    l = _cholesky_array(a.data, "logdet")
    out = 2.0 * np.sum(np.log(np.einsum("...ii->...i", l)), axis=-1)

    def vjp(g):
        inv = np.linalg.inv(a.data)
        inv = 0.5 * (inv + _swap(inv))
        return (np.asarray(g)[..., None, None] * inv,)

    return _record("logdet", (a,), np.asarray(out), vjp)


# ---------------------------------------------------------------------------
# convolution

def conv_geometry(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """Same-padding geometry: (output size, pad before, pad after)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: TensorLike, w: TensorLike, stride: Tuple[int, int] = (1, 1)) -> Tensor:
    """Same-padded strided convolution. x: (N, H, W, C), w: (kh, kw, C, F)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    kh, kw, _, _ = w.shape
    sh, sw = stride
    ho, ph0, ph1 = conv_geometry(x.shape[1], kh, sh)
    wo, pw0, pw1 = conv_geometry(x.shape[2], kw, sw)
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    wt = np.transpose(w.data, (2, 0, 1, 3))  # (C, kh, kw, F)
    out = np.tensordot(win, wt, axes=([3, 4, 5], [0, 1, 2]))

    def vjp(g):
        gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, F)
        gwin = np.tensordot(g, wt, axes=([3], [3]))  # (N, ho, wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gwin[..., i, j]
        gx = gxp[:, ph0:ph0 + x.shape[1], pw0:pw0 + x.shape[2], :]
        return gx, np.transpose(gw, (1, 2, 0, 3))

    return _record("conv2d", (x, w), out, vjp)


# ---------------------------------------------------------------------------
# composite helpers (built from the ops above)

def eye(n: int) -> Tensor:
    return Tensor(np.eye(n, dtype=default_dtype()))


def diag_embed(v: TensorLike) -> Tensor:
    v = as_tensor(v)
    n = v.shape[-1]
    return reshape(v, v.shape + (1,)) * np.eye(n, dtype=default_dtype())


def diagonal(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return reduce_sum(a * np.eye(a.shape[-1], dtype=default_dtype()), axis=-1)


def symmetrize(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return (a + transpose(a)) * 0.5


def outer(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return reshape(a, a.shape + (1,)) * reshape(b, b.shape[:-1] + (1, b.shape[-1]))


def solve_spd(a: TensorLike, b: TensorLike) -> Tensor:
    """A^-1 B for symmetric positive definite A, through two triangular solves."""
    l = cholesky(a)
    y = triangular_solve(l, b, lower=True)
    return triangular_solve(transpose(l), y, lower=False)


# ---------------------------------------------------------------------------
# gradients

class Gradients(dict):
    """Leaf node index -> gradient array. Index with a leaf Tensor or its node index."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node
        return super().get(key, default)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """d loss / d leaf for every leaf on the tape (zeros where untouched)."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.taped or loss.tape is not tape:
        raise ContractError("backward: loss is not recorded on this tape")
    pending: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    result = Gradients()
    for i in range(loss.node, -1, -1):
        node = tape.nodes[i]
        g = pending.pop(i, None)
        if node.vjp is None:
            result[i] = g if g is not None else np.zeros(node.shape, dtype=default_dtype())
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            pg = np.asarray(pg).reshape(tape.nodes[parent].shape)
            if parent in pending:
                pending[parent] = pending[parent] + pg
            else:
                pending[parent] = pg
    for node in tape.nodes[loss.node + 1:]:
        if node.vjp is None:
            result[node.index] = np.zeros(node.shape, dtype=default_dtype())
    return result


def linearize(f: Callable[[Tensor], Tensor], x: Tensor) -> Tuple[Tensor, Tensor]:
    """Evaluate f at x together with its Jacobian by tangent propagation.

    Both results stay on x's tape (if any), so gradients flow through the Jacobian into
    whatever f closes over.
    """
    if x.ndim != 1:
        raise ShapeError(f"linearize: expected a vector input, got {x.shape}")
    seeded = Tensor(x.data, x.tape, x.node)
    seeded.tangent = eye(x.shape[0])
    y = f(seeded)
    if y.ndim != 1:
        raise ShapeError(f"linearize: expected a vector output, got {y.shape}")
    jac = y.tangent if y.tangent is not None else _zero_tangent(y.shape, x.shape[0])
    y = Tensor(y.data, y.tape, y.node)
    return y, jac


def jacobian(f: Callable[[Tensor], Tensor], x, create_graph: bool = False):
    """m x n matrix of partials of f: R^n -> R^m.

    Default: one reverse pass per output row on a private tape; returns an ndarray.
    With create_graph=True the Jacobian is built by tangent propagation and returned as a
    Tensor recorded on x's tape.
    """
    if create_graph:
        _, jac = linearize(f, as_tensor(x))
        if not np.all(np.isfinite(jac.data)):
            raise NumericError("jacobian: non-finite entries")
        return jac
    tape = Tape()
    xt = tape.leaf(np.asarray(as_tensor(x).data))
    if xt.ndim != 1:
        raise ShapeError(f"jacobian: expected a vector input, got {xt.shape}")
    y = f(xt)
    if y.ndim != 1:
        raise ShapeError(f"jacobian: expected a vector output, got {y.shape}")
    jac = np.zeros((y.shape[0], xt.shape[0]), dtype=default_dtype())
    if y.taped:
        for i in range(y.shape[0]):
            jac[i] = backward(tape, y[i])[xt]
    if not np.all(np.isfinite(jac)):
        raise NumericError("jacobian: non-finite entries")
    return jac
