"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable computation is expressed through a small registry of
primitives (``PRIMITIVES``).  Applying a primitive to inputs that require
gradients attaches an :class:`OpRecord` to the output; :func:`backward` walks
those records in reverse topological order and accumulates ``grad`` on the
leaves.  Records are single-use: a second backward pass over the same graph
raises :class:`GraphConsumedError`.
"""
from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GraphConsumedError, NonFiniteError, ShapeError, ValidationError

DTYPE = np.float64

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording in the current thread (inference, finite differences)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor: non-finite value in data of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: OpRecord | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._record = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # operator sugar, all routed through apply_primitive
    def __add__(self, other):
        return apply_primitive("add", self, other)

    def __radd__(self, other):
        return apply_primitive("add", other, self)

    def __sub__(self, other):
        return apply_primitive("sub", self, other)

    def __rsub__(self, other):
        return apply_primitive("sub", other, self)

    def __mul__(self, other):
        return apply_primitive("mul", self, other)

    def __rmul__(self, other):
        return apply_primitive("mul", other, self)

    def __truediv__(self, other):
        return apply_primitive("div", self, other)

    def __rtruediv__(self, other):
        return apply_primitive("div", other, self)

    def __neg__(self):
        return apply_primitive("neg", self)

    def __matmul__(self, other):
        return apply_primitive("matmul", self, other)

    def __rmatmul__(self, other):
        return apply_primitive("matmul", other, self)

    def __getitem__(self, key):
        return apply_primitive("slice", self, key=_normalize_key(key))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", self, shape=tuple(int(s) for s in shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return apply_primitive("transpose", self, axes=tuple(int(a) for a in axes))

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def broadcast_to(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("broadcast_to", self, shape=tuple(int(s) for s in shape))

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _normalize_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer))):
            raise ValidationError(f"slice: only basic indexing is supported, got {type(k).__name__}")
    return key


# --------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable  # (*arrays, **attrs) -> (out, saved)
    backward: Callable  # (grad_out, saved, *arrays, **attrs) -> tuple of input grads (None = no grad)


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, backward: Callable) -> None:
    PRIMITIVES[name] = Primitive(name, forward, backward)


class OpRecord:
    """One primitive application: op id, inputs, weak output ref, saved state."""

    __slots__ = ("op", "inputs", "attrs", "saved", "consumed", "_output")

    def __init__(self, op, inputs, attrs, saved, output):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.saved = saved
        self.consumed = False
        self._output = weakref.ref(output)

    @property
    def output(self) -> Tensor | None:
        return self._output()


def apply_primitive(op: str, *inputs, **attrs) -> Tensor:
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise ValidationError(f"unknown primitive {op!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    try:
        out, saved = prim.forward(*arrays, **attrs)
    except ValidationError:
        raise
    except ValueError as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{op}: incompatible shapes {shapes} ({exc})") from exc
    out = np.asarray(out, dtype=DTYPE)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite value in output of shape {out.shape}")
    result = Tensor._wrap(out)
    if is_grad_enabled() and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result._record = OpRecord(op, tensors, attrs, saved, result)
    return result


# --------------------------------------------------------------------------
# computation record and backward pass


class ComputationRecord:
    """Topologically ordered list of the op records that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.ops: list[OpRecord] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        seen_leaves: set[int] = set()
        if output._record is None:
            return
        # iterative post-order DFS keeps deep LSTM chains off the Python stack
        stack = [(output._record, False)]
        while stack:
            rec, expanded = stack.pop()
            if expanded:
                self.ops.append(rec)
                continue
            if id(rec) in seen:
                continue
            seen.add(id(rec))
            stack.append((rec, True))
            for t in reversed(rec.inputs):
                if t._record is not None:
                    if id(t._record) not in seen:
                        stack.append((t._record, False))
                elif t.requires_grad and id(t) not in seen_leaves:
                    seen_leaves.add(id(t))
                    self.leaves.append(t)

    def __len__(self):
        return len(self.ops)

    @property
    def consumed(self) -> bool:
        return any(rec.consumed for rec in self.ops)

    def replay(self) -> list[np.ndarray]:
        """Re-run every forward rule on the recorded inputs' current data."""
        if self.consumed:
            raise GraphConsumedError("replay: computation record already consumed by backward")
        values: dict[int, np.ndarray] = {}
        outputs = []
        for rec in self.ops:
            arrays = [values.get(id(t._record), t.data) if t._record is not None else t.data
                      for t in rec.inputs]
            out, _ = PRIMITIVES[rec.op].forward(*arrays, **rec.attrs)
            out = np.asarray(out, dtype=DTYPE)
            values[id(rec)] = out
            outputs.append(out)
        return outputs

    def backward(self, grad_output: np.ndarray | None = None) -> None:
        if self.consumed:
            raise GraphConsumedError("backward: computation record already consumed (double backward is unsupported)")
        out = self.output
        if grad_output is None:
            grad_output = np.ones_like(out.data)
        if out._record is None:
            if out.requires_grad:
                _accumulate_leaf(out, grad_output)
            return
        grads: dict[int, np.ndarray] = {id(out._record): grad_output}
        for rec in reversed(self.ops):
            g = grads.pop(id(rec), None)
            rec.consumed = True
            if g is None:
                rec.saved = None
                continue
            arrays = [t.data for t in rec.inputs]
            in_grads = PRIMITIVES[rec.op].backward(g, rec.saved, *arrays, **rec.attrs)
            rec.saved = None
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(f"{rec.op}: backward produced grad {gi.shape} for input {t.data.shape}")
                if t._record is not None:
                    key = id(t._record)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if record is None:
        record = ComputationRecord(loss)
    elif record.output is not loss:
        raise ValidationError("backward: loss is not the output of the given record")
    record.backward()


# --------------------------------------------------------------------------
# primitive rules


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


def _broadcast_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    _broadcast_shapes("add", a, b)
    return a + b, None


def _add_bwd(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _broadcast_shapes("sub", a, b)
    return a - b, None


def _sub_bwd(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _broadcast_shapes("mul", a, b)
    return a * b, None


def _mul_bwd(g, _, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _broadcast_shapes("div", a, b)
    with np.errstate(all="ignore"):
        return a / b, None


def _div_bwd(g, _, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _neg_fwd(a):
    return -a, None


def _neg_bwd(g, _, a):
    return (-g,)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: fold the batch dims into one GEMM
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],)), None
    return np.matmul(a, b), None


def _matmul_bwd(g, _, a, b):
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    if a.ndim == 2 and b.ndim > 2:
        # (m, k) @ (..., k, n): contract the batch dims into the weight gradient
        gt = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
        bt = np.moveaxis(b, -2, 0).reshape(b.shape[-2], -1)
        ga = gt @ bt.T
        gb = np.matmul(a.T, g)
        return ga, _unbroadcast(gb, b.shape)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _concat_fwd(*arrays, axis=-1):
    if not arrays:
        raise ShapeError("concat: no inputs")
    ndim = arrays[0].ndim
    ax = axis % ndim
    for arr in arrays:
        if arr.ndim != ndim or any(arr.shape[i] != arrays[0].shape[i] for i in range(ndim) if i != ax):
            shapes = ", ".join(str(x.shape) for x in arrays)
            raise ShapeError(f"concat: non-concatenated dimensions disagree along axis {axis}: {shapes}")
    return np.concatenate(arrays, axis=ax), None


def _concat_bwd(g, _, *arrays, axis=-1):
    ax = axis % g.ndim
    bounds = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def _slice_fwd(a, key):
    return np.array(a[key]), None


def _slice_bwd(g, _, a, key):
    full = np.zeros_like(a)
    full[key] = g
    return (full,)


def _transpose_fwd(a, axes):
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.ascontiguousarray(np.transpose(a, axes)), None


def _transpose_bwd(g, _, a, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _reshape_fwd(a, shape):
    return a.reshape(shape).copy(), None


def _reshape_bwd(g, _, a, shape):
    return (g.reshape(a.shape),)


def _broadcast_to_fwd(a, shape):
    return np.array(np.broadcast_to(a, shape)), None


def _broadcast_to_bwd(g, _, a, shape):
    return (_unbroadcast(g, a.shape),)


def _expand_reduced(g, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _sum_bwd(g, _, a, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, a, axis, keepdims)),)


def _reduced_count(a, axis):
    if axis is None:
        return a.size
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([a.shape[ax] for ax in axes]))


def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _mean_bwd(g, _, a, axis=None, keepdims=False):
    return (_expand_reduced(g, a, axis, keepdims) / _reduced_count(a, axis),)


def _sigmoid_fwd(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a))
    return y, y


def _sigmoid_bwd(g, y, a):
    return (g * y * (1.0 - y),)


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def _tanh_bwd(g, y, a):
    return (g * (1.0 - y * y),)


def _exp_fwd(a):
    with np.errstate(over="ignore"):
        y = np.exp(a)
    return y, y


def _exp_bwd(g, y, a):
    return (g * y,)


def _sqrt_fwd(a):
    if (a < 0).any():
        raise NonFiniteError("sqrt: negative input")
    y = np.sqrt(a)
    return y, y


def _sqrt_bwd(g, y, a):
    return (g * 0.5 / y,)


def _leaky_relu_fwd(a, slope=0.2):
    return np.where(a > 0, a, slope * a), None


def _leaky_relu_bwd(g, _, a, slope=0.2):
    return (g * np.where(a > 0, 1.0, slope),)


def _softmax_fwd(a, axis=-1, mask=None):
    if mask is None:
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, a.shape)
        if not mask.any(axis=axis).all():
            raise ValidationError("softmax: a masked row has no admissible entries (empty neighbor list)")
        m = np.where(mask, a, -np.inf).max(axis=axis, keepdims=True)
        with np.errstate(over="ignore"):
            e = np.where(mask, np.exp(a - m), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, y


def _softmax_bwd(g, y, a, axis=-1, mask=None):
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


for _name, _fwd, _bwd in [
    ("add", _add_fwd, _add_bwd),
    ("sub", _sub_fwd, _sub_bwd),
    ("mul", _mul_fwd, _mul_bwd),
    ("div", _div_fwd, _div_bwd),
    ("neg", _neg_fwd, _neg_bwd),
    ("matmul", _matmul_fwd, _matmul_bwd),
    ("concat", _concat_fwd, _concat_bwd),
    ("slice", _slice_fwd, _slice_bwd),
    ("transpose", _transpose_fwd, _transpose_bwd),
    ("reshape", _reshape_fwd, _reshape_bwd),
    ("broadcast_to", _broadcast_to_fwd, _broadcast_to_bwd),
    ("sum", _sum_fwd, _sum_bwd),
    ("mean", _mean_fwd, _mean_bwd),
    ("sigmoid", _sigmoid_fwd, _sigmoid_bwd),
    ("tanh", _tanh_fwd, _tanh_bwd),
    ("exp", _exp_fwd, _exp_bwd),
    ("sqrt", _sqrt_fwd, _sqrt_bwd),
    ("leaky_relu", _leaky_relu_fwd, _leaky_relu_bwd),
    ("softmax", _softmax_fwd, _softmax_bwd),
]:
    register_primitive(_name, _fwd, _bwd)


# --------------------------------------------------------------------------
# functional front-end


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", a, b)


def concat(tensors, axis: int = -1) -> Tensor:
    return apply_primitive("concat", *tensors, axis=axis)


def sigmoid(x) -> Tensor:
    return apply_primitive("sigmoid", x)


def tanh(x) -> Tensor:
    return apply_primitive("tanh", x)


def exp(x) -> Tensor:
    return apply_primitive("exp", x)


def sqrt(x) -> Tensor:
    return apply_primitive("sqrt", x)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return apply_primitive("leaky_relu", x, slope=slope)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    return apply_primitive("softmax", x, axis=axis, mask=mask)


# --------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      indices=None) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    The error per element is ``|analytic - numeric| / max(1, |analytic|)``.
    ``x`` is perturbed in place (and restored), so ``f`` may ignore its argument
    and read ``x`` through a closure, e.g. a model parameter.  ``indices``
    restricts the check to a subset of flat element positions.
    """
    if eps <= 0:
        raise ValidationError("finite_diff_check: eps must be positive")
    was_required = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.data.size != 1:
            raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
        backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        if not np.shares_memory(flat, x.data):
            raise ValidationError("finite_diff_check: tensor data must be contiguous")
        positions = range(flat.size) if indices is None else indices
        worst = 0.0
        with no_grad():
            for pos in positions:
                orig = flat[pos]
                flat[pos] = orig + eps
                f_plus = f(x).item()
                flat[pos] = orig - eps
                f_minus = f(x).item()
                flat[pos] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic.reshape(-1)[pos]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        return worst
    finally:
        x.requires_grad = was_required
        x.grad = None
