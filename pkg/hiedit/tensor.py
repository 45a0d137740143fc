"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active ComputeTape (a context manager) whenever at
least one input requires a gradient. Outside a tape every op is a plain forward
computation, which is how inference and finite-difference probing run.
"""
import contextvars
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

Number = Union[int, float]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: "contextvars.ContextVar[Optional[ComputeTape]]" = contextvars.ContextVar(
    "hiedit_active_tape", default=None
)
_TENSOR_IDS = itertools.count(1)

# name -> op function; every differentiable op registers itself here
OP_REGISTRY: Dict[str, Callable[..., "Tensor"]] = {}


def differentiable(name: str):
    """Register a differentiable op under a stable name."""
    def decorator(fn):
        OP_REGISTRY[name] = fn
        return fn
    return decorator


class Tensor:
    """
    n-dimensional float64 array with an accumulated gradient.

    The gradient buffer is allocated lazily; reading ``grad`` before any backward
    pass returns zeros of the tensor's shape.
    """

    __slots__ = ("values", "requires_grad", "name", "id", "_grad", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(values, dtype=np.float64)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got shape {arr.shape}")
        self.values = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_TENSOR_IDS)
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional["ComputeTape"] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor for op results: no defensive copy of fresh arrays.
        out = cls.__new__(cls)
        out.values = np.ascontiguousarray(values, dtype=np.float64)
        out.requires_grad = requires_grad
        out.name = None
        out.id = next(_TENSOR_IDS)
        out._grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values.copy())

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.values.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self._grad is None:
            self._grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self._grad = self._grad + grad

    def backward(self) -> None:
        """Back-propagate from this scalar through the tape that recorded it."""
        if self._tape is None:
            raise RuntimeError("Tensor was not produced on a ComputeTape; nothing to differentiate")
        self._tape.backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    """One recorded operation: which tensors went in, which came out, and how to go back."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Optional[BackwardRule]
    tags: Dict[str, Any] = field(default_factory=dict)

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


class ComputeTape:
    """
    Ordered record of differentiable operations.

    Usage::

        with ComputeTape() as tape:
            loss = f(params)
        tape.backward(loss)

    Marker entries (``backward is None``) describe composite blocks such as a
    cross-attention call; they are skipped during replay.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "ComputeTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Optional[BackwardRule], **tags) -> None:
        output._tape = self
        self.entries.append(TapeEntry(op=op, inputs=tuple(inputs), output=output,
                                      backward=backward, tags=dict(tags)))

    def markers(self, op: str) -> List[TapeEntry]:
        return [entry for entry in self.entries if entry.op == op and entry.backward is None]

    def backward(self, loss: Tensor) -> None:
        """
        Replay backward rules in reverse recorded order.

        Args:
            loss: single-element tensor recorded on this tape
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.values))
        for entry in reversed(self.entries):
            if entry.backward is None or entry.output._grad is None:
                continue
            grads = entry.backward(entry.output._grad)
            for tensor, grad in zip(entry.inputs, grads):
                if grad is not None and tensor.requires_grad:
                    tensor._accumulate(grad)


def active_tape() -> Optional[ComputeTape]:
    return _ACTIVE_TAPE.get()


def record_marker(op: str, inputs: Sequence[Tensor], output: Tensor, **tags) -> None:
    """Record a structural marker for a composite block on the active tape, if any."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.entries.append(TapeEntry(op=op, inputs=tuple(inputs), output=output,
                                      backward=None, tags=dict(tags)))


def _result(values: np.ndarray, op: str, inputs: Sequence[Tensor], backward: BackwardRule) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward)
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer))


def _sum_to_row(grad: np.ndarray, width: int) -> np.ndarray:
    return grad.reshape(-1, width).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

@differentiable("add")
def add(a: Tensor, b: Union[Tensor, Number]) -> Tensor:
    """
    Elementwise sum.

    Allowed pairings: equal shapes, tensor with a Python scalar, tensor with a
    single-element tensor, or a tensor of shape [..., d] with a per-row bias [d].
    """
    if _is_scalar(b):
        return _result(a.values + float(b), "add", (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _result(a.values + b.values, "add", (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        width = b.shape[0]
        return _result(a.values + b.values, "add", (a, b), lambda g: (g, _sum_to_row(g, width)))
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1:] == a.shape:
        return add(b, a)
    if b.size == 1 and b.ndim == 0:
        return _result(a.values + b.values, "add", (a, b), lambda g: (g, np.asarray(g.sum())))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


@differentiable("sub")
def sub(a: Tensor, b: Union[Tensor, Number]) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes must match, got {a.shape} and {b.shape}")
    return _result(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


@differentiable("neg")
def neg(a: Tensor) -> Tensor:
    return _result(-a.values, "neg", (a,), lambda g: (-g,))


@differentiable("mul")
def mul(a: Tensor, b: Union[Tensor, Number]) -> Tensor:
    """Elementwise product with an equal-shape tensor, or scaling by a scalar."""
    if _is_scalar(b):
        factor = float(b)
        return _result(a.values * factor, "mul", (a,), lambda g: (g * factor,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes must match, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _result(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


@differentiable("square")
def square(a: Tensor) -> Tensor:
    av = a.values
    return _result(av * av, "square", (a,), lambda g: (2.0 * av * g,))


_GELU_C = math.sqrt(2.0 / math.pi)


@differentiable("gelu")
def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(out, "gelu", (a,), backward)


@differentiable("masked_fill")
def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows to them."""
    mask = np.asarray(mask, dtype=bool)
    keep = ~np.broadcast_to(mask, a.shape)
    return _result(np.where(keep, a.values, value), "masked_fill", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

@differentiable("sum")
def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.values.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


@differentiable("mean")
def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.asarray(a.values.mean()), "mean", (a,), lambda g: (np.full(shape, float(g) / n),))


@differentiable("pick")
def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Gather one entry per row along the last axis: out[i] = a[i, index[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"pick expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: index shape {idx.shape} does not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[rows, idx] = g
        return (grad,)

    return _result(a.values[rows, idx], "pick", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

@differentiable("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product.

    Supports [m, k] @ [k, n], batched [..., m, k] @ [k, n] (shared right operand)
    and [..., m, k] @ [..., k, n] with identical leading dimensions.

    Raises:
        ShapeError: naming both shapes when the contraction or batch dims disagree
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    if b.ndim == 2:
        k, n = bv.shape

        def backward(g):
            da = g @ bv.T
            db = av.reshape(-1, k).T @ g.reshape(-1, n)
            return da, db

        return _result(av @ bv, "matmul", (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ between {a.shape} and {b.shape}")

    def backward_batched(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _result(av @ bv, "matmul", (a, b), backward_batched)


@differentiable("transpose")
def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.values, axes), "transpose", (a,),
                   lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


@differentiable("reshape")
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.values.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {original} as {tuple(shape)}") from e
    return _result(out, "reshape", (a,), lambda g: (g.reshape(original),))


@differentiable("concat")
def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """
    Join tensors along ``axis``; the backward rule splits the gradient back.

    Raises:
        ShapeError: when a non-concatenated dimension differs between parts
    """
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one part")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {[q.shape for q in parts]} disagree")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(np.concatenate([p.values for p in parts], axis=axis), "concat", parts, backward)


@differentiable("slice_axis")
def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[index] = g
        return (grad,)

    return _result(a.values[index], "slice_axis", (a,), backward)


@differentiable("take_rows")
def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows (axis 0); repeated indices accumulate gradient. Also the embedding lookup."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result(a.values[idx], "take_rows", (a,), backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@differentiable("softmax")
def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction; rows sum to 1."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (a,), backward)


@differentiable("log_softmax")
def log_softmax(a: Tensor) -> Tensor:
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, "log_softmax", (a,), backward)


@differentiable("layernorm")
def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalise each row of the last axis to zero mean / unit variance, then apply
    the elementwise affine ``gamma * x_hat + beta``.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    mu = x.values.mean(axis=-1, keepdims=True)
    centred = x.values - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    x_hat = centred * inv_std
    gv = gamma.values

    def backward(g):
        d_gamma = _sum_to_row(g * x_hat, d)
        d_beta = _sum_to_row(g, d)
        d_hat = g * gv
        dx = inv_std * (d_hat - d_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True))
        return dx, d_gamma, d_beta

    return _result(x_hat * gv + beta.values, "layernorm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# finite-difference auditing
# ---------------------------------------------------------------------------

def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    return float(out.values.reshape(-1)[0])


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare tape gradients against central finite differences.

    Args:
        f: function of ``inputs`` returning a single-element Tensor
        inputs: tensors to audit; each must require grad
        h: finite-difference step
        coords: if set, audit this many randomly chosen coordinates per input
        seed: seed for the coordinate sample

    Returns:
        max over audited coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError(f"grad_check input {t!r} does not require grad")
        t.zero_grad()
    with ComputeTape() as tape:
        out = f(*inputs)
        _scalar_value(out)
    tape.backward(out)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        if coords is None or coords >= flat.size:
            positions: Iterable[int] = range(flat.size)
        else:
            positions = rng.choice(flat.size, size=coords, replace=False)
        for i in positions:
            original = flat[i]
            flat[i] = original + h
            f_plus = _scalar_value(f(*inputs))
            flat[i] = original - h
            f_minus = _scalar_value(f(*inputs))
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    logger.debug(f"grad_check over {len(inputs)} inputs: max relative error {worst:.3e}")
    return worst
