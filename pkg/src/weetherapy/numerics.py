"""Dense float64 arrays with reverse-mode differentiation.

Every operation records its parents and a vector-Jacobian closure on the
result; ``DiffArray.backward`` replays the graph in reverse topological
order.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DeterminismError, InvalidDistributionError, InvalidInputError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the operation graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DiffArray:
    """An n-d float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_vjp")
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[DiffArray, ...] = ()
        self._vjp: Callable | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> DiffArray:
        return DiffArray(self.values)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every upstream node."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.values)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(self, False)]
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

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_diff(other)
        a, b = self, other
        return make_op(a.values + b.values, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_diff(other)
        a, b = self, other
        return make_op(a.values - b.values, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return as_diff(other) - self

    def __mul__(self, other):
        other = as_diff(other)
        a, b = self, other
        return make_op(a.values * b.values, (a, b),
                       lambda g: (_unbroadcast(g * b.values, a.shape),
                                  _unbroadcast(g * a.values, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_diff(other)
        a, b = self, other
        out = a.values / b.values
        return make_op(out, (a, b),
                       lambda g: (_unbroadcast(g / b.values, a.shape),
                                  _unbroadcast(-g * out / b.values, b.shape)))

    def __rtruediv__(self, other):
        return as_diff(other) / self

    def __neg__(self):
        return make_op(-self.values, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        a = self
        p = float(exponent)
        return make_op(a.values ** p, (a,), lambda g: (g * p * a.values ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_diff(other), self)

    def __getitem__(self, idx):
        a = self

        def vjp(g):
            full = np.zeros_like(a.values)
            np.add.at(full, idx, g)
            return (full,)

        return make_op(a.values[idx], (a,), vjp)

    # -- reductions and reshaping -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return make_op(a.values.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return make_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self
        return make_op(a.values.transpose(axes), (a,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, ax1: int, ax2: int):
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(tuple(axes))

    # -- elementwise -------------------------------------------------------

    def exp(self):
        out = np.exp(self.values)
        return make_op(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return make_op(np.log(a.values), (a,), lambda g: (g / a.values,))

    def tanh(self):
        out = np.tanh(self.values)
        return make_op(out, (self,), lambda g: (g * (1.0 - out * out),))


def make_op(values, parents: Sequence[DiffArray], vjp: Callable) -> DiffArray:
    """Wrap ``values`` as the output of an operation on ``parents``.

    ``vjp(g)`` must return one gradient (or None) per parent.  Nothing is
    recorded when no parent needs a gradient or recording is disabled.
    """
    out = DiffArray.__new__(DiffArray)
    out.values = np.asarray(values, dtype=np.float64)
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def parameter(values, name: str | None = None) -> DiffArray:
    return DiffArray(values, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    if av.ndim == 1 and bv.ndim == 1:
        raise ShapeError("use (x * y).sum() for inner products")
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul shapes {av.shape} @ {bv.shape}")
    out2 = a2 @ b2

    def vjp(g):
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bv.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    out = out2
    if av.ndim == 1:
        out = out.reshape(out.shape[:-2] + out.shape[-1:])
    if bv.ndim == 1:
        out = out[..., 0]
    return make_op(out, (a, b), vjp)


def concat(parts: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    parts = [as_diff(p) for p in parts]
    vals = [p.values for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, parts, vjp)


def stack(parts: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    parts = [as_diff(p) for p in parts]
    out = np.stack([p.values for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return make_op(out, parts, vjp)


def take_rows(table: DiffArray, ids) -> DiffArray:
    """Embedding lookup: ``table[ids]`` for an integer index array."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids, g)
        return (full,)

    return make_op(table.values[ids], (table,), vjp)


def pick(x: DiffArray, index, axis: int = -1) -> DiffArray:
    """Gather one entry along ``axis`` per leading position (take_along_axis)."""
    index = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    out = np.take_along_axis(x.values, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, index, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(np.squeeze(out, axis=axis), (x,), vjp)


def where(mask, x: DiffArray, fill: float) -> DiffArray:
    """``fill`` where ``mask`` is true, ``x`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, fill, x.values)
    return make_op(out, (x,), lambda g: (np.where(mask, 0.0, g),))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what}: non-finite input")


def softmax(x, axis: int = -1) -> DiffArray:
    x = as_diff(x)
    _check_finite(x.values, "softmax")
    if x.shape[axis] < 1:
        raise InvalidInputError("softmax of an empty vector")
    e = np.exp(x.values - x.values.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), vjp)


def masked_softmax(x: DiffArray, mask, axis: int = -1) -> DiffArray:
    """Softmax where entries with ``mask`` true get probability exactly 0.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, -np.inf, x.values)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), vjp)


def log_softmax(x, axis: int = -1) -> DiffArray:
    x = as_diff(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), vjp)


def check_distribution(p: np.ndarray, axis: int = -1, tol: float = 1e-9) -> None:
    if not np.all(np.isfinite(p)):
        raise InvalidDistributionError("distribution has non-finite entries")
    if np.any(p < 0):
        raise InvalidDistributionError("distribution has negative entries")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > tol):
        raise InvalidDistributionError("distribution does not sum to 1")


def entropy(p, axis: int = -1) -> DiffArray:
    """Shannon entropy in nats, with 0·ln 0 taken as 0."""
    p = as_diff(p)
    check_distribution(p.values, axis)
    pv = p.values
    pos = pv > 0
    logp = np.log(np.where(pos, pv, 1.0))
    out = -(pv * logp).sum(axis=axis)

    def vjp(g):
        return (np.where(pos, -(logp + 1.0), 0.0) * np.expand_dims(g, axis),)

    return make_op(out, (p,), vjp)


def neg_entropy_unchecked(p: DiffArray, axis: int = -1) -> DiffArray:
    """Σ p·ln p without distribution validation (0·ln 0 = 0)."""
    pv = p.values
    pos = pv > 0
    logp = np.log(np.where(pos, pv, 1.0))

    def vjp(g):
        return (np.where(pos, logp + 1.0, 0.0) * np.expand_dims(g, axis),)

    return make_op((pv * logp).sum(axis=axis), (p,), vjp)


def gelu(x) -> DiffArray:
    """x·Φ(x) with the exact normal CDF."""
    x = as_diff(x)
    _check_finite(x.values, "gelu")
    xv = x.values
    cdf = ndtr(xv)

    def vjp(g):
        pdf = np.exp(-0.5 * xv * xv) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xv * pdf),)

    return make_op(xv * cdf, (x,), vjp)


def layer_norm(x: DiffArray, gain: DiffArray, bias: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Normalize over the last axis, then scale and shift."""
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values
    n = xv.shape[-1]

    def vjp(g):
        gb = _unbroadcast(g, bias.shape)
        gg = _unbroadcast(g * xhat, gain.shape)
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return make_op(xhat * gv + bias.values, (x, gain, bias), vjp)


def mean_pool_time(z) -> DiffArray:
    """Average a (..., T, d) feature map over its time axis."""
    z = as_diff(z)
    if z.ndim < 2 or z.shape[-2] == 0:
        raise InvalidInputError("mean_pool_time needs at least one frame")
    return z.mean(axis=-2)


def concat_features(parts: Sequence) -> DiffArray:
    """Join (..., T, d_j) maps along the feature axis; T must agree."""
    parts = [as_diff(p) for p in parts]
    if not parts:
        raise ShapeError("concat_features needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"time/batch extents differ: {p.shape[:-1]} vs {lead}")
    out = concat(parts, axis=-1)
    assert out.shape[:-1] == lead
    return out


# -- finite-difference checking --------------------------------------------------


@dataclass(frozen=True)
class GradReport:
    parameter_name: str
    max_rel_error: float
    max_abs_error: float
    num_entries_checked: int


def grad_check(
    closure: Callable[[], DiffArray],
    params: Mapping[str, DiffArray],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[GradReport]:
    """Compare reverse-mode gradients with central differences.

    ``closure`` reads the arrays in ``params`` and returns a scalar.  With
    ``max_entries`` set, larger parameters are checked on a seeded random
    subsample of ``max(max_entries, 32)`` entries.
    """
    if not 0.0 < step <= 1e-2:
        raise InvalidInputError(f"finite-difference step {step} outside (0, 1e-2]")
    with no_grad():
        f0 = closure().values.copy()
        f1 = closure().values.copy()
    if f0.size != 1:
        raise ShapeError("grad_check closure must return a scalar")
    if not np.array_equal(f0, f1):
        raise DeterminismError(f"closure is not deterministic: {f0} vs {f1}")

    for p in params.values():
        p.zero_grad()
    closure().backward()

    rng = np.random.default_rng(seed)
    reports = []
    for name, p in params.items():
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad
        flat = p.values.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max(max_entries, 32):
            idx = np.sort(rng.choice(n, size=max(max_entries, 32), replace=False))
        else:
            idx = np.arange(n)
        a_flat = analytic.reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = closure().item()
                flat[i] = orig - step
                fm = closure().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                err = abs(a_flat[i] - numeric)
                denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / denom)
        reports.append(GradReport(name, max_rel, max_abs, int(idx.size)))
    return reports


def collect(arrays: Iterable[DiffArray]) -> list[DiffArray]:
    return [a for a in arrays if a.requires_grad]
