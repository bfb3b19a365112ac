"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when
at least one operand is tracked (a leaf created with ``requires_grad=True`` or
the output of a recorded operation). :func:`backward` walks the recorded
nodes in strict reverse order and writes ``grad`` onto every reachable leaf.

Example:
    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y, tape)
    >>> float(x.grad[0])
    6.0
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from cfakit.errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_check",
    "as_tensor",
    "matmul",
    "softplus",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clip",
    "lgamma",
    "digamma",
    "logsumexp",
    "take_rows",
    "concat_rows",
    "lgamma_np",
    "digamma_np",
    "trigamma_np",
    "softplus_np",
    "EULER_GAMMA",
]

EULER_GAMMA = 0.57721566490153286061

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


# ---------------------------------------------------------------------------
# numpy kernels for the special functions
# ---------------------------------------------------------------------------


def _check_positive(x: np.ndarray, name: str) -> None:
    if np.any(~(x > 0)):
        raise DomainError(f"{name} requires strictly positive inputs")


def _lanczos_lgamma(x: np.ndarray) -> np.ndarray:
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        acc = acc + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def lgamma_np(x) -> np.ndarray:
    """Elementwise log-gamma for strictly positive inputs."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "lgamma")
    small = x < 0.5
    out = _lanczos_lgamma(np.where(small, 1.0, x))
    if np.any(small):
        xs = np.where(small, x, 0.25)
        refl = np.log(math.pi / np.sin(math.pi * xs)) - _lanczos_lgamma(1.0 - xs)
        out = np.where(small, refl, out)
    return out


def _shift_up(x: np.ndarray, floor: float, term: Callable[[np.ndarray], np.ndarray]):
    acc = np.zeros_like(x)
    while True:
        mask = x < floor
        if not mask.any():
            return x, acc
        acc = acc + np.where(mask, term(np.where(mask, x, 1.0)), 0.0)
        x = np.where(mask, x + 1.0, x)


def digamma_np(x) -> np.ndarray:
    """Elementwise digamma (derivative of log-gamma) for positive inputs."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "digamma")
    x, acc = _shift_up(x, 6.0, lambda v: -1.0 / v)
    inv2 = 1.0 / (x * x)
    series = inv2 * (
        1.0 / 12
        - inv2
        * (
            1.0 / 120
            - inv2
            * (
                1.0 / 252
                - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12)))
            )
        )
    )
    return acc + np.log(x) - 0.5 / x - series


def trigamma_np(x) -> np.ndarray:
    """Elementwise trigamma for positive inputs."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "trigamma")
    x, acc = _shift_up(x, 6.0, lambda v: 1.0 / (v * v))
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (
        1.0 / 6
        - inv2
        * (
            1.0 / 30
            - inv2
            * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * 7.0 / 6))))
        )
    )
    return acc + series


def softplus_np(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    return np.where(pos, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on tracked tensors executed inside
    the ``with`` block are appended to ``nodes``. Tapes nest, and only the
    innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Dense row-major float64 array with an optional gradient slot."""

    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None

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
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic -------------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.tracked for p in parents):
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), overflow-safe; strictly positive for finite a > -745."""
    a = as_tensor(a)
    return _record(softplus_np(a.data), (a,), lambda g: (g * _sigmoid_np(a.data),))


def relu(a) -> Tensor:
    """max(0, a) with subgradient 0 at a == 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _record(lgamma_np(a.data), (a,), lambda g: (g * digamma_np(a.data),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    return _record(digamma_np(a.data), (a,), lambda g: (g * trigamma_np(a.data),))


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs (m,k)x(k,n); got {a.shape} x {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _record(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
    )


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return _record(
        np.mean(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,),
    )


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out = (m + np.log(s))
    soft = shifted / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _record(
        out,
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) * soft,),
    )


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _record(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: tuple(np.split(g, sizes, axis=0)),
    )


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Leaves are tensors created with ``requires_grad=True``. Gradients from
    several paths are summed. The tape is cleared afterwards.

    Raises:
        ContractError: if ``loss`` is not a single-element tensor.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss._tape is None:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.tracked:
                continue
            key = id(parent)
            pg = np.asarray(pg, dtype=np.float64)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._tape is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        leaf.grad = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
    for node in tape.nodes:
        node.out._tape = None
    tape.nodes.clear()


def finite_diff_check(
    fn: Callable[[Tensor], Tensor], point, step: float = 1e-5
) -> float:
    """Compare the tape gradient of ``fn`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``.
    Points where ``fn`` is not differentiable (e.g. ``relu`` at exactly 0)
    are outside the contract: the check reports a large error there.

    Raises:
        ContractError: if ``step`` is not positive.
        NumericError: if ``fn`` returns a non-finite value.
    """
    if not step > 0:
        raise ContractError("step must be positive")
    base = np.array(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("function value is not finite at the check point")
    backward(y, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fn(Tensor(hi.reshape(base.shape))).data
        f_lo = fn(Tensor(lo.reshape(base.shape))).data
        if not (np.all(np.isfinite(f_hi)) and np.all(np.isfinite(f_lo))):
            raise NumericError(f"function value is not finite near coordinate {i}")
        numeric[i] = (float(np.sum(f_hi)) - float(np.sum(f_lo))) / (2.0 * step)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
