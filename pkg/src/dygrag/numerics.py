"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward primitive records its parents and a backward rule on a
per-forward tape; :func:`backward` walks the tape in reverse topological
order and sums gradients into every tensor that requires them.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Final, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np
import numpy.typing as npt

from .exceptions import (
    AllPositionsIgnoredError,
    CheckpointFormatError,
    EmptyInputError,
    InvalidParameterError,
    MissingGradientError,
    NonFiniteError,
    NonScalarBackwardError,
    ShapeMismatchError,
)

Array = npt.NDArray[np.float64]
BackwardFn = Callable[[Array], Sequence[Union[Array, None]]]
Operand = Union["DiffTensor", float, int, npt.ArrayLike]

_recording: ContextVar[bool] = ContextVar("dygrag.numerics._recording", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on the tape."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


class DiffTensor:
    """A dense float64 array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        *,
        name: str | None = None,
    ) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def T(self) -> DiffTensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return (
            f"<DiffTensor{label} shape={self.shape} "
            f"requires_grad={self.requires_grad}>"
        )

    def __add__(self, other: Operand) -> DiffTensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> DiffTensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> DiffTensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> DiffTensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> DiffTensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> DiffTensor:
        return mul(other, self)

    def __neg__(self) -> DiffTensor:
        return neg(self)

    def __matmul__(self, other: DiffTensor) -> DiffTensor:
        return matmul(self, other)

    def __getitem__(self, key: object) -> DiffTensor:
        return getitem(self, key)


def tensor(
    data: npt.ArrayLike, requires_grad: bool = False, *, name: str | None = None
) -> DiffTensor:
    """Build a tensor holding a private copy of ``data``."""
    return DiffTensor(np.array(data, dtype=np.float64), requires_grad, name=name)


def parameter(data: npt.ArrayLike, name: str) -> DiffTensor:
    return tensor(data, requires_grad=True, name=name)


def _lift(value: Operand) -> DiffTensor:
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(np.asarray(value, dtype=np.float64))


def _result(
    data: Array, parents: tuple[DiffTensor, ...], backward_fn: BackwardFn
) -> DiffTensor:
    out = DiffTensor(data)
    if _recording.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(operation: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(operation, a.shape, b.shape) from None


######################################################################
# elementwise


def add(a: Operand, b: Operand) -> DiffTensor:
    ta, tb = _lift(a), _lift(b)
    _broadcast_check("add", ta, tb)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _result(ta.data + tb.data, (ta, tb), backward_fn)


def sub(a: Operand, b: Operand) -> DiffTensor:
    ta, tb = _lift(a), _lift(b)
    _broadcast_check("sub", ta, tb)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _result(ta.data - tb.data, (ta, tb), backward_fn)


def mul(a: Operand, b: Operand) -> DiffTensor:
    ta, tb = _lift(a), _lift(b)
    _broadcast_check("mul", ta, tb)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        )

    return _result(ta.data * tb.data, (ta, tb), backward_fn)


def neg(a: Operand) -> DiffTensor:
    ta = _lift(a)
    return _result(-ta.data, (ta,), lambda g: (-g,))


def scale(a: Operand, factor: float) -> DiffTensor:
    ta = _lift(a)
    return _result(ta.data * factor, (ta,), lambda g: (g * factor,))


def exp(a: Operand) -> DiffTensor:
    ta = _lift(a)
    out = np.exp(ta.data)
    return _result(out, (ta,), lambda g: (g * out,))


def log(a: Operand) -> DiffTensor:
    ta = _lift(a)
    return _result(np.log(ta.data), (ta,), lambda g: (g / ta.data,))


def power(a: Operand, exponent: float) -> DiffTensor:
    ta = _lift(a)

    def backward_fn(g: Array) -> tuple[Array]:
        return (g * exponent * ta.data ** (exponent - 1),)

    return _result(ta.data**exponent, (ta,), backward_fn)


def relu(a: Operand) -> DiffTensor:
    ta = _lift(a)
    positive = ta.data > 0
    return _result(np.where(positive, ta.data, 0.0), (ta,), lambda g: (g * positive,))


_GELU_K: Final = math.sqrt(2.0 / math.pi)
_GELU_C: Final = 0.044715


def gelu(a: Operand) -> DiffTensor:
    """GELU, tanh approximation."""
    ta = _lift(a)
    x = ta.data
    t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g: Array) -> tuple[Array]:
        dt = (1.0 - t**2) * _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (ta,), backward_fn)


def masked_fill(a: Operand, mask: npt.ArrayLike, value: float) -> DiffTensor:
    """Replace entries where ``mask`` is true by a constant."""
    ta = _lift(a)
    where = np.broadcast_to(np.asarray(mask, dtype=bool), ta.shape)
    out = np.where(where, value, ta.data)
    return _result(out, (ta,), lambda g: (np.where(where, 0.0, g),))


def dropout(a: Operand, rate: float, rng: np.random.Generator | None) -> DiffTensor:
    """Inverted dropout; the identity when ``rate`` is 0 or no rng is given."""
    ta = _lift(a)
    if rate <= 0.0 or rng is None:
        return ta
    if rate >= 1.0:
        raise InvalidParameterError("dropout", rate, "0 <= rate < 1")
    keep = (rng.random(ta.shape) >= rate) / (1.0 - rate)
    return _result(ta.data * keep, (ta,), lambda g: (g * keep,))


######################################################################
# shape and reduction


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward_fn)


def transpose(a: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape, (2,))
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return _result(out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: DiffTensor, key: object) -> DiffTensor:
    out = np.array(a.data[key], dtype=np.float64)  # type: ignore[index]

    def backward_fn(g: Array) -> tuple[Array]:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)  # type: ignore[arg-type]
        return (full,)

    return _result(out, (a,), backward_fn)


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    if not tensors:
        raise EmptyInputError("concat operand list")
    first = tensors[0]
    axis = axis % max(first.data.ndim, 1)
    for other in tensors[1:]:
        rest_a = first.shape[:axis] + first.shape[axis + 1 :]
        rest_b = other.shape[:axis] + other.shape[axis + 1 :]
        if other.data.ndim != first.data.ndim or rest_a != rest_b:
            raise ShapeMismatchError("concat", first.shape, other.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: Array) -> list[Array]:
        return np.split(g, bounds, axis=axis)

    return _result(out, tuple(tensors), backward_fn)


def sum_(a: DiffTensor, axis: int | None = None) -> DiffTensor:
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def backward_fn(g: Array) -> tuple[Array]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward_fn)


def mean(a: DiffTensor, axis: int | None = None) -> DiffTensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def masked_mean(a: DiffTensor, mask: npt.ArrayLike, axis: int = 0) -> DiffTensor:
    """Mean over ``axis`` counting only positions where ``mask`` is nonzero."""
    weights = np.asarray(mask, dtype=np.float64)
    if weights.ndim != 1 or weights.shape[0] != a.shape[axis]:
        raise ShapeMismatchError("masked_mean", a.shape, weights.shape)
    total = weights.sum()
    if total <= 0:
        raise EmptyInputError("masked_mean mask")
    expand = [1] * a.data.ndim
    expand[axis] = -1
    w = weights.reshape(expand) / total
    out = np.asarray((a.data * w).sum(axis=axis), dtype=np.float64)

    def backward_fn(g: Array) -> tuple[Array]:
        return (np.expand_dims(g, axis) * w,)

    return _result(out, (a,), backward_fn)


######################################################################
# composites with fused backward rules


def softmax(a: DiffTensor, axis: int = -1) -> DiffTensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: Array) -> tuple[Array]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward_fn)


def layer_norm(
    a: DiffTensor,
    gain: DiffTensor | None = None,
    bias: DiffTensor | None = None,
    eps: float = 1e-12,
) -> DiffTensor:
    """Normalize each row to zero mean and unit variance, then apply the affine."""
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    gain_data = gain.data if gain is not None else 1.0
    out = normed * gain_data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (a, gain, bias) if t is not None)

    def backward_fn(g: Array) -> list[Array]:
        g_normed = g * gain_data
        g_a = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grads = [g_a]
        if gain is not None:
            grads.append(_unbroadcast(g * normed, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _result(np.asarray(out, dtype=np.float64), parents, backward_fn)


def embedding(table: DiffTensor, ids: npt.ArrayLike) -> DiffTensor:
    """Gather rows of ``table``."""
    index = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2 or (index.size and index.max() >= table.shape[0]):
        raise ShapeMismatchError("embedding", table.shape, index.shape)

    def backward_fn(g: Array) -> tuple[Array]:
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(table.data[index], (table,), backward_fn)


def cross_entropy(
    logits: DiffTensor, targets: npt.ArrayLike, ignore_index: int = -100
) -> DiffTensor:
    """Mean softmax cross entropy over the positions not equal to ``ignore_index``."""
    target = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeMismatchError("cross_entropy", logits.shape, target.shape)
    valid = target != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise AllPositionsIgnoredError()
    rows = np.nonzero(valid)[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[rows, target[rows]].sum() / count

    def backward_fn(g: Array) -> tuple[Array]:
        grad = np.exp(log_probs)
        grad[rows, target[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return _result(np.asarray(loss, dtype=np.float64), (logits,), backward_fn)


######################################################################
# backward


def _topological_order(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    visited: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in visited)
    return order


def backward(loss: DiffTensor) -> None:
    """Sum d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1:
        raise NonScalarBackwardError(loss.shape)
    if not loss.requires_grad:
        return
    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = (
                parent_grad if key not in pending else pending[key] + parent_grad
            )


######################################################################
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    #: optimizer steps taken, whichever parameters they touched
    step_count: int = 0
    first_moment: dict[str, Array] = field(default_factory=dict)
    second_moment: dict[str, Array] = field(default_factory=dict)
    #: updates received per parameter, for bias correction
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(params: Mapping[str, DiffTensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update.  Gradients are left in place.

    Bias correction counts the updates each parameter has received, so
    parameters left out of some steps are corrected as if those steps did not
    happen.
    """
    for name, param in params.items():
        if param.grad is None:
            raise MissingGradientError(name)
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    for name, param in params.items():
        grad = param.grad
        assert grad is not None
        t = state.steps[name] = state.steps.get(name, 0) + 1
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        param.data = param.data - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.epsilon
        )


######################################################################
# gradient checking


def grad_check(
    closure: Callable[[Sequence[DiffTensor]], DiffTensor],
    params: Sequence[DiffTensor],
    eps: float = 1e-5,
    *,
    coordinates: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``coordinates`` set, that many coordinates per parameter are sampled
    with ``rng`` instead of checking every one.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = closure(params)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("grad_check loss")
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            indices: Iterable[int] = range(flat.size)
            if coordinates is not None and coordinates < flat.size:
                chooser = rng if rng is not None else np.random.default_rng(0)
                indices = chooser.choice(flat.size, size=coordinates, replace=False)
            for i in indices:
                original = flat[i]
                flat[i] = original + eps
                f_plus = closure(params).item()
                flat[i] = original - eps
                f_minus = closure(params).item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = float(grad.reshape(-1)[i])
                if not (math.isfinite(numeric) and math.isfinite(exact)):
                    raise NonFiniteError(f"gradient of {p.name or 'parameter'}")
                denom = max(abs(exact), abs(numeric), floor)
                worst = max(worst, abs(exact - numeric) / denom)
    return worst


######################################################################
# modules and checkpoints


class Module:
    """A flat registry of named parameters."""

    def __init__(self) -> None:
        self._parameters: dict[str, DiffTensor] = {}

    def register(self, name: str, data: npt.ArrayLike) -> DiffTensor:
        param = parameter(data, name)
        self._parameters[name] = param
        return param

    def __getitem__(self, name: str) -> DiffTensor:
        return self._parameters[name]

    def parameters(self, trainable_only: bool = False) -> dict[str, DiffTensor]:
        return {
            name: p
            for name, p in self._parameters.items()
            if p.requires_grad or not trainable_only
        }

    def freeze(self, keep: Iterable[str] = ()) -> None:
        """Stop gradients for every parameter not named in ``keep``."""
        kept = set(keep)
        for name, p in self._parameters.items():
            p.requires_grad = name in kept

    def zero_grad(self) -> None:
        for p in self._parameters.values():
            p.grad = None

    def state_dict(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self._parameters.items()}

    def load_state_dict(self, state: Mapping[str, Array], strict: bool = True) -> None:
        for name, p in self._parameters.items():
            if name not in state:
                if strict:
                    raise CheckpointFormatError(f"missing entry {name!r}")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeMismatchError(f"load {name}", p.shape, value.shape)
            p.data = value.copy()


CHECKPOINT_MAGIC: Final = b"DYGRAGCK"
FORMAT_VERSION: Final = 1

# Container layout, all integers little-endian:
#   magic (8 bytes) | u32 format version | u32 entry count
#   per entry, sorted by name:
#     u16 name length | utf-8 name | u8 ndim | u64 extent * ndim
#     | float64 payload, row-major


def encode_checkpoint(tensors: Mapping[str, npt.ArrayLike | DiffTensor]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        value = tensors[name]
        data = value.data if isinstance(value, DiffTensor) else np.asarray(value)
        array = np.ascontiguousarray(data, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> dict[str, Array]:
    if payload[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("wrong magic")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", payload, offset)
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported format version {version}")
        offset += 8
        tensors: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", payload, offset)
            offset += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            array = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            tensors[name] = array.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError("truncated payload") from exc
    if offset != len(payload):
        raise CheckpointFormatError("trailing bytes")
    return tensors


def save_checkpoint(
    path: Path | str, tensors: Mapping[str, npt.ArrayLike | DiffTensor]
) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: Path | str) -> dict[str, Array]:
    return decode_checkpoint(Path(path).read_bytes())
