"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the active tape in
execution order, so the record is already topologically sorted and
``backward`` is a single reverse sweep that touches each node exactly once.
Training code resets the tape once per step (``reset_tape``); ``fresh_tape``
scopes a private tape for things like gradient checks.

Semantics worth knowing:
  * repeated ``backward`` calls accumulate into ``.grad`` (a loss and a
    regulariser can be back-propagated separately);
  * tensors are treated as immutable after creation except for ``.grad`` and
    in-place optimiser updates, which must only happen after ``backward``
    and before the next forward pass on a reset tape;
  * a tape is single-threaded state and must not be shared across threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy.special import digamma, expit, gammaln

from .errors import ContractError, DomainError, ShapeError

Array = np.ndarray
SeedLike = Union[int, Sequence[int], np.random.Generator]


def as_rng(seed: SeedLike) -> np.random.Generator:
    """Normalise an int seed / seed sequence / Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic sugar; python scalars are wrapped as constant tensors.
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

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


VjpFn = Callable[[Array], tuple]


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp: VjpFn):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Execution-ordered operation record; inputs always precede their use."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Swap in a private tape; the previous one is restored on exit."""
    global _tape
    prev, _tape = _tape, Tape()
    try:
        yield _tape
    finally:
        _tape = prev


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; forward passes inside produce plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _apply(inputs: tuple[Tensor, ...], out_data: Array, vjp: VjpFn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(_Node(inputs, out, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# creation


def _checked_dims(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ShapeError(f"all dimensions must be >= 1, got {dims}")
    return dims


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_checked_dims(shape)), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_checked_dims(shape), float(value)), requires_grad)


def uniform(shape, low: float, high: float, seed: SeedLike, requires_grad: bool = False) -> Tensor:
    dims = _checked_dims(shape)
    return Tensor(as_rng(seed).uniform(low, high, size=dims), requires_grad)


def kaiming_uniform(shape, seed: SeedLike, requires_grad: bool = False) -> Tensor:
    """Uniform in +/- sqrt(6 / fan_in) where fan_in is the last dimension."""
    dims = _checked_dims(shape)
    bound = math.sqrt(6.0 / dims[-1])
    return Tensor(as_rng(seed).uniform(-bound, bound, size=dims), requires_grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def scalar(value: float) -> Tensor:
    return Tensor(np.asarray(float(value)))


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_check(a_shape: tuple, b_shape: tuple) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible") from None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that broadcasting expanded, back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply((a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply((a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g: Array):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _apply((a, b), ad * bd, vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g: Array):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _apply((a, b), out, vjp)


# ---------------------------------------------------------------------------
# matmul / structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g: Array):
        return g @ bd.T, ad.T @ g

    return _apply((a, b), ad @ bd, vjp)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.shape}")

    def vjp(g: Array):
        return (g.T,)

    return _apply((x,), x.data.T.copy(), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    new_shape = tuple(int(d) for d in shape)
    if int(np.prod(new_shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} (size {x.size}) into {new_shape}")
    old_shape = x.shape

    def vjp(g: Array):
        return (g.reshape(old_shape),)

    return _apply((x,), x.data.reshape(new_shape), vjp)


def take_row(x: Tensor, index: int) -> Tensor:
    """Select x[index] along axis 0; 1-D input yields a 0-D scalar."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("take_row needs at least one dimension")
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"row {index} out of range for shape {x.shape}")

    def vjp(g: Array):
        full_grad = np.zeros_like(x.data)
        full_grad[index] = g
        return (full_grad,)

    return _apply((x,), x.data[index].copy(), vjp)


def narrow(x: Tensor, start: int, length: int) -> Tensor:
    """Contiguous slice x[start:start+length] along axis 0."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("narrow needs at least one dimension")
    if start < 0 or length < 1 or start + length > x.shape[0]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for shape {x.shape}")

    def vjp(g: Array):
        full_grad = np.zeros_like(x.data)
        full_grad[start : start + length] = g
        return (full_grad,)

    return _apply((x,), x.data[start : start + length].copy(), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = expit(x.data)

    def vjp(g: Array):
        return (g * out * (1.0 - out),)

    return _apply((x,), out, vjp)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    xd = x.data

    def vjp(g: Array):
        return (g / xd,)

    return _apply((x,), np.log(xd), vjp)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def vjp(g: Array):
        return (g * out,)

    return _apply((x,), out, vjp)


def neg(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def vjp(g: Array):
        return (-g,)

    return _apply((x,), -x.data, vjp)


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)

    def vjp(g: Array):
        return (g * sign,)

    return _apply((x,), np.abs(x.data), vjp)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    gate = (x.data > 0.0).astype(np.float64)

    def vjp(g: Array):
        return (g * gate,)

    return _apply((x,), x.data * gate, vjp)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    x = _as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    s = expit(xd)

    def vjp(g: Array):
        return (g * s,)

    return _apply((x,), out, vjp)


def lgamma(x: Tensor) -> Tensor:
    """log Gamma(x) for x > 0; derivative is the digamma function."""
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("lgamma requires strictly positive inputs")
    xd = x.data

    def vjp(g: Array):
        return (g * digamma(xd),)

    return _apply((x,), gammaln(xd), vjp)


# ---------------------------------------------------------------------------
# reductions


def _checked_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _spread(g: Array, shape: tuple, axis: int | None, keepdims: bool) -> Array:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _checked_axis(axis, x.ndim)
    shape = x.shape

    def vjp(g: Array):
        return (_spread(g, shape, axis, keepdims),)

    return _apply((x,), x.data.sum(axis=axis, keepdims=keepdims), vjp)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _checked_axis(axis, x.ndim)
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def vjp(g: Array):
        return (_spread(g, shape, axis, keepdims) / count,)

    return _apply((x,), x.data.mean(axis=axis, keepdims=keepdims), vjp)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf.

    Walks the tape once in reverse; each node's output gradient is complete
    before the node is visited because consumers are always recorded later
    than producers. Calling backward twice without resetting grads adds the
    two gradient fields together.
    """
    t = tape if tape is not None else _tape
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not t.nodes:
        raise ContractError("backward on an empty tape")

    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(t.nodes):
        out_grad = pending.pop(id(node.output), None)
        if out_grad is None:
            continue
        holders.pop(id(node.output), None)
        for inp, part in zip(node.inputs, node.vjp(out_grad)):
            if part is None or not inp.requires_grad:
                continue
            key = id(inp)
            seen = pending.get(key)
            pending[key] = part if seen is None else seen + part
            holders[key] = inp

    # Entries that survive the sweep were never produced by a node on this
    # tape: they are the leaves.
    for key, grad in pending.items():
        leaf = holders[key]
        if not leaf.requires_grad:
            continue
        contribution = np.ascontiguousarray(grad)
        leaf.grad = contribution.copy() if leaf.grad is None else leaf.grad + contribution


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    The relative error per coordinate uses max(|analytic|, |numeric|, 1e-8)
    as denominator. `f` must map a tensor to a scalar tensor.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    with fresh_tape() as t:
        out = f(leaf)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ContractError("grad_check requires a scalar-valued function")
        backward(out, t)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros_like(analytic)
    flat_data = leaf.data.reshape(-1)
    flat_num = numeric.reshape(-1)
    with no_grad():
        for k in range(flat_data.size):
            orig = flat_data[k]
            flat_data[k] = orig + eps
            f_plus = f(leaf).item()
            flat_data[k] = orig - eps
            f_minus = f(leaf).item()
            flat_data[k] = orig
            flat_num[k] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
