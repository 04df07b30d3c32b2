"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded whenever at
least one operand requires a gradient.  Outside a tape every operation is a
plain numpy computation and returns a constant tensor, which is what the
decoders use.

    >>> p = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (p * p).sum()
    >>> tape.backward(loss)
    >>> p.grad
    array([2., 4.])
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DomainError, OracleInvalidError, ShapeError, TapeError

_TAPES: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


@contextmanager
def no_grad():
    """Suspend recording: operations inside return constants."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

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
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations.

    A tape is single use: after :meth:`backward` has run it refuses to run
    again, because intermediate gradient buffers are already populated.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []
        self.leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        out.requires_grad = True
        out._tape = self
        for t in inputs:
            if t._tape is None and t.requires_grad:
                self.leaves[id(t)] = t
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every leaf reachable from ``loss``.

        Leaf gradients accumulate into existing buffers; leaves recorded on
        the tape but unreachable from ``loss`` end up holding zeros.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self._consumed:
            raise TapeError("backward already ran on this tape; record the forward pass again")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, _, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)
        # recorded tensors point back at the tape; dropping the nodes breaks that cycle
        self.nodes = []
        for leaf in self.leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def backward(loss: Tensor) -> None:
    """Run reverse mode on the tape that produced ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def _accumulate(t: Tensor, g: np.ndarray, index=None) -> None:
    if not t.requires_grad:
        return
    if index is None:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)
        else:
            t.grad += g
    else:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad[index] += g


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    if _TAPES:
        tape = _TAPES[-1]
        if tape is not None:
            for t in inputs:
                if t.requires_grad:
                    tape.record(out, inputs, backward_fn)
                    break
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


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise binary
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(_binary("add", np.add, a, b), (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(_binary("sub", np.subtract, a, b), (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(_binary("mul", np.multiply, a, b), (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                ga = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


# ----------------------------------------------------------------------------
# elementwise unary
# ----------------------------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and saturates to exact 0/1
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without forming the sigmoid first."""
    a = as_tensor(a)
    y = -np.logaddexp(0.0, -a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * _sigmoid(-a.data)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * y))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt of negative value (min {a.data.min()!r})")
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * 0.5 / y))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent; base must be positive."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"power needs a positive base (min {a.data.min()!r})")
    y = a.data ** exponent
    return _make(y, (a,), lambda g: _accumulate(a, g * exponent * y / a.data))


def grad_reverse(a, scale: float) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-scale``."""
    a = as_tensor(a)
    c = -float(scale)
    return _make(a.data, (a,), lambda g: _accumulate(a, c * g))


# ----------------------------------------------------------------------------
# structural
# ----------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(y, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def getitem(a, index) -> Tensor:
    """Basic (int/slice) indexing; the adjoint scatters into a zero buffer."""
    a = as_tensor(a)
    y = a.data[index]
    if not isinstance(y, np.ndarray):
        y = np.array(y)
    return _make(y, (a,), lambda g: _accumulate(a, g, index))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % y.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(y, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _make(y, ts, bw)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) at integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: index outside [0, {table.shape[0]})")

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(table.data[ids], (table,), bw)


# ----------------------------------------------------------------------------
# reductions and normalisers
# ----------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(y, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    y = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(y, (a,), bw)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    """Softmax over the last axis (full Jacobian-vector adjoint)."""
    a = as_tensor(a)
    y = _softmax_np(a.data)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), bw)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis.

    The adjoint ``g - softmax * sum(g)`` never divides by a probability, so
    cross-entropy built on top of it stays accurate for confident outputs.
    """
    a = as_tensor(a)
    y = _log_softmax_np(a.data)

    def bw(g):
        _accumulate(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _make(y, (a,), bw)


# ----------------------------------------------------------------------------
# finite-difference oracle
# ----------------------------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    max_coords: int = 8,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn`` takes no arguments and rebuilds the loss from the current
    parameter values.  Up to ``max_coords`` coordinates per parameter are
    sampled (all of them for small tensors).  Returns the largest relative
    error ``|a - n| / max(|a|, |n|, 1e-12)``.  Existing ``.grad`` buffers
    of ``params`` are overwritten.
    """
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon!r}")
    params = list(params)
    zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    first, second = float(loss_fn().item()), float(loss_fn().item())
    if first != second or first != loss.item():
        raise OracleInvalidError(f"loss_fn is not deterministic ({first!r} vs {second!r})")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn().item()
            flat[i] = orig - epsilon
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, float(err))
    return worst
