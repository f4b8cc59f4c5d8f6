# tensor.py

"""Dense numpy-backed tensors and a tape-based reverse-mode autodiff engine.

Every differentiable operation computes its result eagerly and, when a
:class:`Tape` is active and at least one input requires a gradient, records a
backward rule on that tape. ``Tape.backward`` replays the recorded entries in
reverse order, so the tape order is the topological order.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError, TrackingError

logger = logging.getLogger(__name__)

_SUPPORTED_DTYPES = (np.float32, np.float64)
_settings = {"dtype": np.float32, "debug": False}
_local = threading.local()


# --- Engine settings ---

def set_default_dtype(dtype):
    """Selects the scalar type of every tensor created from now on."""
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _settings["dtype"] = dtype


def get_default_dtype():
    return _settings["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily switches the default scalar type (float64 for verification)."""
    previous = _settings["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _settings["dtype"] = previous


def set_debug(enabled):
    """When enabled, every forward result is checked for non-finite values."""
    _settings["debug"] = bool(enabled)


def debug_enabled():
    return _settings["debug"]


@contextmanager
def debug_mode(enabled=True):
    previous = _settings["debug"]
    set_debug(enabled)
    try:
        yield
    finally:
        _settings["debug"] = previous


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspends recording on the current thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# --- Tensor ---

class Tensor:
    """Row-major contiguous array with optional gradient tracking."""

    def __init__(self, data, requires_grad=False):
        array = np.ascontiguousarray(data, dtype=_settings["dtype"])
        if array.ndim == 0:
            array = array.reshape(1)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Back-propagates from this scalar through the tape that produced it."""
        if self._tape is None:
            raise TrackingError("tensor was not produced on a tape")
        self._tape.backward(self)

    def accumulate_grad(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}{flag})"


# --- Tape ---

@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable operations for one step."""

    entries: list = field(default_factory=list)
    _producer: dict = field(default_factory=dict, repr=False)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TrackingError("tape scopes closed out of order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def __contains__(self, tensor):
        index = self._producer.get(id(tensor))
        return index is not None and self.entries[index].output is tensor

    def record(self, op, inputs, output, backward_fn):
        self._producer[id(output)] = len(self.entries)
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))

    def backward(self, root):
        """Assigns d(root)/d(leaf) to every tracked leaf, accumulating into .grad."""
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root not in self:
            raise TrackingError("root tensor is not recorded on this tape")

        last = self._producer[id(root)]
        pending = {id(root): np.ones_like(root.data)}
        for entry in reversed(self.entries[: last + 1]):
            grad = pending.pop(id(entry.output), None)
            if grad is None:
                continue
            input_grads = entry.backward(grad)
            for tensor, input_grad in zip(entry.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor in self:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + input_grad
                    else:
                        pending[key] = input_grad
                else:
                    tensor.accumulate_grad(input_grad)


def backward(tape, root):
    tape.backward(root)


def _result(op, data, inputs, backward_fn):
    out = Tensor(data)
    if _settings["debug"]:
        bad = ~np.isfinite(out.data)
        if bad.any():
            index = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NumericError(f"{op} produced a non-finite value", index=index)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sums a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --- Creation ---

def tensor_create(shape, fill, requires_grad=False):
    """Creates a tensor from a scalar fill value or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {list(shape)}")
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=_settings["dtype"])
    else:
        buffer = np.array(fill, dtype=_settings["dtype"], copy=True).reshape(-1)
        if buffer.size != int(np.prod(shape)):
            raise ShapeError(f"buffer has {buffer.size} values, shape {list(shape)} needs {int(np.prod(shape))}")
        data = buffer.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return tensor_create(shape, 0.0, requires_grad)


def ones(shape, requires_grad=False):
    return tensor_create(shape, 1.0, requires_grad)


# --- Elementwise ---

_BINARY = ("add", "sub", "mul")
_UNARY = ("sqrt", "square")


def elementwise(kind, a, b=None):
    """Pointwise add, sub, mul, scale, sqrt or square."""
    if kind in _UNARY:
        return _unary(kind, a)
    if kind == "scale":
        if isinstance(b, Tensor) or b is None:
            raise ContractError("scale needs a scalar factor")
        return _binary("mul", a, b)
    if kind in _BINARY:
        return _binary(kind, a, b)
    raise ContractError(f"unknown elementwise kind '{kind}'")


def _binary(kind, a, b):
    x = a.data
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} differ")
        y = b.data
        if kind == "add":
            return _result(kind, x + y, (a, b), lambda g: (g, g))
        if kind == "sub":
            return _result(kind, x - y, (a, b), lambda g: (g, -g))
        return _result(kind, x * y, (a, b), lambda g: (g * y, g * x))

    c = float(b)
    if kind == "add":
        return _result(kind, x + c, (a,), lambda g: (g,))
    if kind == "sub":
        return _result(kind, x - c, (a,), lambda g: (g,))
    return _result(kind, x * c, (a,), lambda g: (g * c,))


def _unary(kind, a):
    x = a.data
    if kind == "sqrt":
        if (x < 0).any():
            raise DomainError("sqrt of a negative value")
        out = np.sqrt(x)
        return _result(kind, out, (a,), lambda g: (g * 0.5 / out,))
    return _result(kind, x * x, (a,), lambda g: (2.0 * x * g,))


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, factor):
    return elementwise("scale", a, factor)


def sqrt(a):
    return elementwise("sqrt", a)


def square(a):
    return elementwise("square", a)


# --- Linear algebra ---

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {list(a.shape)} @ {list(b.shape)}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents do not broadcast: {list(a.shape)} @ {list(b.shape)}") from None
    x, y = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return _result("matmul", np.matmul(x, y), (a, b), grad_fn)


# --- Reductions ---

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    if axis is None and not keepdims:
        out = out.reshape(1)

    def grad_fn(g):
        g = g.reshape([1 if i in axes else s for i, s in enumerate(x.shape)])
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", out, (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    if axis is None and not keepdims:
        out = out.reshape(1)

    def grad_fn(g):
        g = g.reshape([1 if i in axes else s for i, s in enumerate(x.shape)])
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean", out, (x,), grad_fn)


# --- Layout (every result is a fresh contiguous copy) ---

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} into {list(shape)}")
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _result("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            t.shape[i] != reference[i] for i in range(len(reference)) if i != axis
        ):
            raise ShapeError(f"concat extents differ: {list(reference)} vs {list(t.shape)}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def narrow(x, axis, start, stop):
    """Slice ``[start, stop)`` along one axis."""
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}, {stop}) out of range for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result("narrow", x.data[index], (x,), grad_fn)


def expand(x, shape):
    """Broadcasts singleton axes of ``x`` up to ``shape``."""
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot expand {list(x.shape)} to {list(shape)}") from None
    return _result("expand", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# --- Gradient verification ---

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_input: list
    coords_checked: int
    name: str = ""


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step=1e-6, tol=1e-6,
                      max_coords: Optional[int] = None, seed=0, name="", floor_ratio=1e-4):
    """Compares the taped gradient of scalar ``fn(*inputs)`` with central differences.

    The error for each input is max|analytic - numeric| over the checked
    coordinates, normalised by the largest gradient magnitude of that input.
    That normaliser never drops below ``floor_ratio * max(1, |f|)``: central
    differences cannot resolve gradients much smaller than the objective
    itself, so those are compared on the objective's scale. Every forward
    evaluation runs in debug mode, so a non-finite intermediate raises
    :class:`NumericError` carrying the perturbed coordinate.
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ContractError("finite-difference inputs must be finite")
    saved = [(t.requires_grad, t.grad) for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        with Tape() as tape, debug_mode():
            root = fn(*inputs)
        tape.backward(root)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        floor = max(floor_ratio * max(1.0, abs(float(root.data.reshape(-1)[0]))), 1e-12)

        rng = np.random.default_rng(seed)
        errors = []
        checked = 0
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            if max_coords is None or max_coords >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(coords.size)
            for i, c in enumerate(coords):
                original = flat[c]
                try:
                    flat[c] = original + step
                    upper, f_upper = flat[c], _perturbed_value(fn, inputs, k, t.shape, c)
                    flat[c] = original - step
                    lower, f_lower = flat[c], _perturbed_value(fn, inputs, k, t.shape, c)
                finally:
                    flat[c] = original
                numeric[i] = (f_upper - f_lower) / (float(upper) - float(lower))
            exact = analytic[k].reshape(-1)[coords].astype(np.float64)
            scale = np.abs(analytic[k]).max(initial=0.0)
            denom = max(scale, np.abs(numeric).max(initial=0.0), floor)
            errors.append(float(np.abs(exact - numeric).max(initial=0.0) / denom))
            checked += coords.size
    finally:
        for t, (requires_grad, grad) in zip(inputs, saved):
            t.requires_grad = requires_grad
            t.grad = grad

    worst = max(errors) if errors else 0.0
    logger.debug("gradcheck name=%s max_rel_error=%.3e coords=%d", name, worst, checked)
    return GradCheckReport(worst, worst < tol, errors, checked, name)


def _perturbed_value(fn, inputs, k, shape, coord):
    index = (k,) + tuple(int(i) for i in np.unravel_index(coord, shape))
    try:
        with no_grad(), debug_mode():
            value = fn(*inputs)
    except NumericError as e:
        raise NumericError(f"non-finite intermediate during finite differences: {e}", index=index) from None
    value = float(value.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError("non-finite value during finite differences", index=index)
    return value
