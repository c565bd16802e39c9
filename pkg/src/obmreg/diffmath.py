"""Small reverse-mode autodiff engine over float64 numpy buffers.

Only the operations the registration pipeline needs are provided.  Every
``Tensor`` produced by an op remembers its parents and a closure that pushes
the upstream gradient back to them; ``Tensor.backward`` walks the graph in
reverse topological order via :class:`GradTape`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
import scipy.sparse as sp

DTYPE = np.float64

# singular values closer than this are reported as degenerate
SVD_DEGENERACY_TOL = 1e-9
# added to |s_i^2 - s_j^2| in the SVD backward pass
SVD_BACKWARD_EPS = 1e-12

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in parts)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with an optional recorded gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=DTYPE)
        _check_finite(data, op)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad=None) -> None:
        GradTape(self).backward(grad)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: a._accumulate(-g), "neg")

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out_data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._from_op(out_data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        p = float(exponent)

        def backward(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._from_op(a.data**p, (a,), backward, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                if b.ndim == 1:
                    ga = np.multiply.outer(g, b.data)
                else:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.ndim == 1:
                    gb = np.multiply.outer(a.data, g)
                elif b.ndim == 1:
                    gb = np.swapaxes(a.data, -1, -2) @ g[..., None]
                    gb = gb[..., 0]
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        a = self

        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros_like(a.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._from_op(a.data[index], (a,), backward, "getitem")

    # -- shape ----------------------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._from_op(
            a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape"
        )

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._from_op(
            a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv)), "transpose"
        )

    @property
    def T(self):
        return self.transpose()

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis: int = -1, keepdims: bool = False):
        """Max along one axis; the gradient goes to the first maximal entry."""
        a = self
        axis = axis % a.ndim
        idx = np.argmax(a.data, axis=axis)
        idx_k = np.expand_dims(idx, axis)
        out = np.take_along_axis(a.data, idx_k, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx_k, g, axis=axis)
            a._accumulate(full)

        return Tensor._from_op(out, (a,), backward, "max")

    def min(self, axis: int = -1, keepdims: bool = False):
        return -((-self).max(axis=axis, keepdims=keepdims))

    # -- elementwise ----------------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._from_op(out, (a,), lambda g: a._accumulate(g * out), "exp")

    def log(self):
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data), "log")

    def sqrt(self):
        """Square root whose gradient is defined as 0 at exactly 0."""
        a = self
        out = np.sqrt(a.data)

        def backward(g):
            safe = np.where(out > 0, out, 1.0)
            a._accumulate(np.where(out > 0, 0.5 * g / safe, 0.0))

        return Tensor._from_op(out, (a,), backward, "sqrt")

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._from_op(a.data * mask, (a,), lambda g: a._accumulate(g * mask), "relu")

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._from_op(np.abs(a.data), (a,), lambda g: a._accumulate(g * sign), "abs")

    def clamp_min(self, lo: float):
        a = self
        mask = a.data >= lo
        return Tensor._from_op(
            np.maximum(a.data, lo), (a,), lambda g: a._accumulate(g * mask), "clamp_min"
        )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


class GradTape:
    """Nodes reachable from ``root`` in topological order (parents first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def backward(self, grad=None) -> None:
        root = self.root
        if not root.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if root.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(root.data)
        # interior nodes receive fresh buffers; leaves keep accumulating
        for node in self.nodes:
            if node._backward is not None:
                node.grad = None
        root._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- free functions ------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            t._accumulate(part)

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(ts):
            t._accumulate(np.take(g, i, axis=axis))

    return Tensor._from_op(np.stack([t.data for t in ts], axis=axis), ts, backward, "stack")


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._from_op(np.where(mask, a.data, b.data), (a, b), backward, "where")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    p = np.exp(x.data - m) / s

    def backward(g):
        x._accumulate(np.expand_dims(g, axis) * p)

    return Tensor._from_op(out, (x,), backward, "logsumexp")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)), "sigmoid")


def softplus(x) -> Tensor:
    """ln(1 + e^x) without overflow; the derivative is the logistic sigmoid."""
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    e = np.exp(-np.abs(d))
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: x._accumulate(g * sig), "softplus")


def huber(x, delta: float = 1.0) -> Tensor:
    """Huber penalty of a non-negative argument.

    x <= delta: x**2 / 2, otherwise delta * (x - delta / 2).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = as_tensor(x)
    if (x.data < 0).any():
        raise ValueError("huber expects non-negative input")
    quad = x.data <= delta
    out = np.where(quad, 0.5 * x.data**2, delta * (x.data - 0.5 * delta))
    slope = np.where(quad, x.data, delta)
    return Tensor._from_op(out, (x,), lambda g: x._accumulate(g * slope), "huber")


def pairwise_sqdist(a, b) -> Tensor:
    """(N, D) x (M, D) -> (N, M) squared Euclidean distances."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    out = cdist(a.data, b.data, "sqeuclidean")

    def backward(g):
        if a.requires_grad:
            a._accumulate(2.0 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data))
        if b.requires_grad:
            b._accumulate(2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data))

    return Tensor._from_op(out, (a, b), backward, "pairwise_sqdist")


def knn_indices(query, base, k: int) -> np.ndarray:
    """Indices of the k nearest ``base`` rows for each ``query`` row.

    Exhaustive search; rows are ascending by distance with ties broken by the
    lower index.
    """
    q, b = _data(query), _data(base)
    if k > b.shape[0]:
        raise ValueError(f"k={k} exceeds the {b.shape[0]} available points")
    if k < 1:
        raise ValueError("k must be at least 1")
    d = cdist(q, b, "sqeuclidean")
    if k == b.shape[0]:
        return np.argsort(d, axis=1, kind="stable")
    kth = np.partition(d, k - 1, axis=1)[:, k - 1 : k]
    inside = d <= kth
    counts = inside.sum(axis=1)
    out = np.empty((len(d), k), dtype=np.intp)
    simple = counts == k
    if simple.any():
        # column indices come out ascending, so a stable sort keeps index order on ties
        cand = np.nonzero(inside[simple])[1].reshape(-1, k)
        order = np.argsort(np.take_along_axis(d[simple], cand, axis=1), axis=1, kind="stable")
        out[simple] = np.take_along_axis(cand, order, axis=1)
    if not simple.all():
        tied = ~simple
        out[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return out


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[r...] = x[idx[r...]]; gradients scatter-add back onto the rows."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather index out of range")

    def backward(g):
        flat = idx.reshape(-1)
        # scatter-add as a sparse (rows x gathered) product
        scatter = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(x.shape[0], flat.size))
        full = scatter @ g.reshape(flat.size, -1)
        x._accumulate(np.asarray(full).reshape(x.shape))

    return Tensor._from_op(x.data[idx], (x,), backward, "gather_rows")


# -- 3x3 SVD ---------------------------------------------------------------------


@dataclass(frozen=True)
class SVD3:
    U: Tensor
    S: Tensor
    V: Tensor
    degenerate: bool


def _svd_F(s: np.ndarray) -> np.ndarray:
    s2 = s**2
    diff = s2[None, :] - s2[:, None]  # s_j^2 - s_i^2
    denom = np.sign(diff) * (np.abs(diff) + SVD_BACKWARD_EPS)
    denom[denom == 0] = SVD_BACKWARD_EPS
    F = 1.0 / denom
    np.fill_diagonal(F, 0.0)
    return F


def svd3(h) -> SVD3:
    """h = U diag(S) V^T with S descending.

    The three factors are separate graph nodes; each contributes its own term
    of the SVD adjoint, so any combination of them can be differentiated.
    """
    h = as_tensor(h)
    if h.shape != (3, 3):
        raise ValueError("svd3 expects a 3x3 matrix")
    u, s, vt = np.linalg.svd(h.data)
    v = vt.T
    degenerate = bool(np.min(np.abs(np.diff(s))) < SVD_DEGENERACY_TOL)
    F = _svd_F(s)
    S_mat = np.diag(s)

    def back_u(gu):
        inner = (F * (u.T @ gu - gu.T @ u)) @ S_mat
        h._accumulate(u @ inner @ v.T)

    def back_s(gs):
        h._accumulate(u @ np.diag(gs) @ v.T)

    def back_v(gv):
        inner = S_mat @ (F * (v.T @ gv - gv.T @ v))
        h._accumulate(u @ inner @ v.T)

    U = Tensor._from_op(u, (h,), back_u, "svd3.U")
    S = Tensor._from_op(s, (h,), back_s, "svd3.S")
    V = Tensor._from_op(v, (h,), back_v, "svd3.V")
    return SVD3(U, S, V, degenerate)


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self) -> bool:
        return self.passed


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=DTYPE)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x)).data.sum())
            flat[i] = orig - eps
            fm = float(f(Tensor(x)).data.sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor is 1e-6 of the largest numeric entry (at least 1e-8), so
    coordinates whose true gradient is ~0 are judged against finite-difference
    noise rather than against themselves.
    """
    if not analytic.size:
        return 0.0
    floor = max(1e-8, 1e-6 * float(np.max(np.abs(numeric))))
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare the recorded gradient of sum(f(x)) with central differences.

    ``grad_fn`` overrides the recorded gradient; it exists so callers can
    feed a deliberately wrong gradient through the comparison.
    """
    x0 = np.array(_data(x), dtype=DTYPE)
    if grad_fn is None:
        xt = Tensor(x0, requires_grad=True)
        out = f(xt)
        out.sum().backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    else:
        analytic = np.asarray(grad_fn(x0), dtype=DTYPE)
    numeric = numeric_grad(f, x0, eps)
    err = relative_error(analytic, numeric)
    return GradCheckReport(err <= tol, err, analytic, numeric)


def parameters_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Finite-difference check of d loss / d params for in-place leaf tensors.

    With ``max_entries`` only a random subset of coordinates is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if max_entries is not None and len(coords) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    analytic = np.array(
        [params[pi].grad.reshape(-1)[j] if params[pi].grad is not None else 0.0 for pi, j in coords]
    )
    numeric = np.empty(len(coords))
    with no_grad():
        for n, (pi, j) in enumerate(coords):
            flat = params[pi].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(loss_fn().data)
            flat[j] = orig - eps
            fm = float(loss_fn().data)
            flat[j] = orig
            numeric[n] = (fp - fm) / (2 * eps)
    err = relative_error(analytic, numeric)
    return GradCheckReport(err <= tol, err, analytic, numeric)


def matmul_const(x: Tensor, A) -> Tensor:
    """x @ A for a constant matrix A (dense ndarray or scipy sparse) on the last axis."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = np.asarray((A.T @ x2.T).T).reshape(lead + (A.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, A.shape[1])
        x._accumulate(np.asarray((A @ g2.T).T).reshape(x.shape))

    return Tensor._from_op(out, (x,), backward, "matmul_const")
