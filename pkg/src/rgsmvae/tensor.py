"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable computation goes through :func:`apply`, which looks up a
forward rule and, when any input requires a gradient, records a node on the
thread's current :class:`Tape`.  :func:`backward` walks that tape once in
reverse.  Forward arithmetic runs in float32 unless a :func:`precision`
context selects float64 (the gradient checker does).

Shape rules are strict: apart from scalar-with-tensor, the only implicit
expansion is a 1-D bias added along the last axis.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor", "Tape", "apply", "backward", "grad_check", "precision", "no_grad",
    "FORWARD_RULES", "BACKWARD_RULES", "OP_KINDS",
    "matmul", "add", "sub", "mul", "neg", "tanh", "sigmoid", "relu", "exp", "log",
    "softmax", "concat", "slice_axis", "reshape", "transpose", "mean", "sum",
    "conv1d", "squared_l2", "l1_norm",
]


class _State(threading.local):
    def __init__(self):
        self.tape = None
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


@contextlib.contextmanager
def precision(dtype):
    """Select the dtype used when wrapping new data into tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def default_dtype():
    return _state.dtype


class Tensor:
    """A float array, optionally tracked by an autodiff tape.

    Leaves created with ``requires_grad=True`` are parameters: :func:`backward`
    accumulates into their ``grad`` attribute.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _state.dtype:
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None
        self._tape = None

    # --- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # identity semantics so tensors can key gradient maps
    __hash__ = object.__hash__

    # --- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class _Node:
    __slots__ = ("kind", "inputs", "out", "attrs", "saved")

    def __init__(self, kind, inputs, out, attrs, saved):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.attrs = attrs
        self.saved = saved


class Tape:
    """Append-only record of the ops executed in one forward pass.

    Use as a context manager to make it the thread's current tape; otherwise
    a fresh tape is opened implicitly by the first recorded op.
    """

    def __init__(self, seed=0):
        self.nodes = []
        self.seed = seed
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes = []
        self.consumed = False


def _active_tape(inputs):
    tape = _state.tape
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    for t in inputs:
        if t._tape is not None and t._tape is not tape:
            raise ContractError(
                "tensor belongs to a different (or finished) tape; detach() it before reuse"
            )
    return tape


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _is_scalar(a):
    return a.ndim == 0


def _elementwise_shape(kind, a, b, allow_bias):
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(a):
        return b.shape
    if _is_scalar(b):
        return a.shape
    if allow_bias and b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return a.shape
    if allow_bias and a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return b.shape
    raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    # bias along last axis
    return g.reshape(-1, shape[0]).sum(axis=0)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g, axes, shape):
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


class _Partial:
    """Gradient that is nonzero only on ``index`` of a tensor of ``shape``."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values


# ---------------------------------------------------------------------------
# forward / backward rules
# ---------------------------------------------------------------------------

def _f_matmul(x, attrs):
    a, b = x
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _b_matmul(g, x, out, attrs, saved):
    a, b = x
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _f_add(x, attrs):
    a, b = x
    _elementwise_shape("add", a, b, True)
    return a + b, None


def _b_add(g, x, out, attrs, saved):
    a, b = x
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def _f_sub(x, attrs):
    a, b = x
    _elementwise_shape("sub", a, b, True)
    return a - b, None


def _b_sub(g, x, out, attrs, saved):
    a, b = x
    return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)


def _f_mul(x, attrs):
    a, b = x
    _elementwise_shape("elementwise-mul", a, b, False)
    return a * b, None


def _b_mul(g, x, out, attrs, saved):
    a, b = x
    return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


def _f_tanh(x, attrs):
    return np.tanh(x[0]), None


def _b_tanh(g, x, out, attrs, saved):
    return (g * (1.0 - out * out),)


def _sigmoid(a):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _f_sigmoid(x, attrs):
    return _sigmoid(x[0]), None


def _b_sigmoid(g, x, out, attrs, saved):
    return (g * out * (1.0 - out),)


def _f_relu(x, attrs):
    return np.maximum(x[0], 0), None


def _b_relu(g, x, out, attrs, saved):
    return (g * (x[0] > 0),)


def _f_exp(x, attrs):
    return np.exp(x[0]), None


def _b_exp(g, x, out, attrs, saved):
    return (g * out,)


def _f_log(x, attrs):
    a = x[0]
    if not np.all(np.isfinite(a)):
        raise DomainError("log: non-finite input")
    if np.any(a <= 0):
        raise DomainError("log: input must be strictly positive")
    return np.log(a), None


def _b_log(g, x, out, attrs, saved):
    return (g / x[0],)


def _f_softmax(x, attrs):
    a = x[0]
    if a.ndim < 1:
        raise DimensionError(f"softmax-over-last-axis: needs rank >= 1, got shape {a.shape}")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _b_softmax(g, x, out, attrs, saved):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _f_concat(x, attrs):
    axis = attrs["axis"]
    ref = x[0]
    ax = axis % ref.ndim
    for other in x[1:]:
        if other.ndim != ref.ndim or any(
            i != ax and s != t for i, (s, t) in enumerate(zip(ref.shape, other.shape))
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {other.shape}")
    return np.concatenate(x, axis=ax), None


def _b_concat(g, x, out, attrs, saved):
    ax = attrs["axis"] % g.ndim
    bounds = np.cumsum([a.shape[ax] for a in x])[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def _f_slice(x, attrs):
    a = x[0]
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    ax = axis % a.ndim
    if not (0 <= start < stop <= a.shape[ax]):
        raise DimensionError(f"slice: range [{start}, {stop}) invalid for axis {axis} of shape {a.shape}")
    index = (slice(None),) * ax + (slice(start, stop),)
    return a[index], index


def _b_slice(g, x, out, attrs, saved):
    return (_Partial(saved, g),)


def _f_reshape(x, attrs):
    a = x[0]
    shape = tuple(attrs["shape"])
    try:
        return a.reshape(shape), None
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None


def _b_reshape(g, x, out, attrs, saved):
    return (g.reshape(x[0].shape),)


def _f_transpose(x, attrs):
    a = x[0]
    axes = attrs["axes"]
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), tuple(axes)


def _b_transpose(g, x, out, attrs, saved):
    return (np.transpose(g, np.argsort(saved)),)


def _f_sum(x, attrs):
    a = x[0]
    axes = _norm_axes(attrs["axis"], a.ndim)
    return np.asarray(a.sum(axis=axes), dtype=a.dtype), axes


def _b_sum(g, x, out, attrs, saved):
    return (_expand_reduced(g, saved, x[0].shape),)


def _f_mean(x, attrs):
    a = x[0]
    axes = _norm_axes(attrs["axis"], a.ndim)
    return np.asarray(a.mean(axis=axes), dtype=a.dtype), axes


def _b_mean(g, x, out, attrs, saved):
    a = x[0]
    count = int(np.prod([a.shape[ax] for ax in saved])) if saved else 1
    return (_expand_reduced(g / count, saved, a.shape),)


def _f_conv1d(x, attrs):
    inp, w = x[0], x[1]
    bias = x[2] if len(x) > 2 else None
    stride, pad = attrs["stride"], attrs["padding"]
    if inp.ndim != 3 or w.ndim != 3 or inp.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: incompatible shapes {inp.shape} and {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv1d: bias shape {bias.shape} does not match weight {w.shape}")
    n, c, length = inp.shape
    o, _, k = w.shape
    if length + 2 * pad < k:
        raise DimensionError(f"conv1d: input length {length} too short for kernel {k}")
    xp = np.pad(inp, ((0, 0), (0, 0), (pad, pad))) if pad else inp
    lout = (length + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * lout, c * k)
    y = cols @ w.reshape(o, c * k).T
    if bias is not None:
        y = y + bias
    return np.ascontiguousarray(y.reshape(n, lout, o).transpose(0, 2, 1)), cols


def _b_conv1d(g, x, out, attrs, saved):
    inp, w = x[0], x[1]
    cols = saved
    stride, pad = attrs["stride"], attrs["padding"]
    n, c, length = inp.shape
    o, _, k = w.shape
    lout = g.shape[2]
    gt = g.transpose(0, 2, 1).reshape(n * lout, o)
    gw = (gt.T @ cols).reshape(w.shape)
    gcols = (gt @ w.reshape(o, c * k)).reshape(n, lout, c, k)
    gxp = np.zeros((n, c, length + 2 * pad), dtype=g.dtype)
    span = stride * (lout - 1) + 1
    for j in range(k):
        gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    gx = gxp[:, :, pad:pad + length] if pad else gxp
    grads = [gx, gw]
    if len(x) > 2:
        grads.append(g.sum(axis=(0, 2)))
    return tuple(grads)


def _f_squared_l2(x, attrs):
    a = x[0]
    return np.asarray((a * a).sum(), dtype=a.dtype), None


def _b_squared_l2(g, x, out, attrs, saved):
    return (2.0 * g * x[0],)


def _f_l1(x, attrs):
    a = x[0]
    return np.asarray(np.abs(a).sum(), dtype=a.dtype), None


def _b_l1(g, x, out, attrs, saved):
    return (g * np.sign(x[0]),)


FORWARD_RULES: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "elementwise-mul": _f_mul,
    "tanh": _f_tanh,
    "sigmoid": _f_sigmoid,
    "relu": _f_relu,
    "exp": _f_exp,
    "log": _f_log,
    "softmax-over-last-axis": _f_softmax,
    "concat": _f_concat,
    "slice": _f_slice,
    "reshape": _f_reshape,
    "transpose": _f_transpose,
    "mean": _f_mean,
    "sum": _f_sum,
    "conv1d": _f_conv1d,
    "squared-l2": _f_squared_l2,
    "l1-norm": _f_l1,
}

# Mutable on purpose: the verification suite swaps entries to prove that the
# gradient checks catch a corrupted rule.
BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _b_matmul,
    "add": _b_add,
    "sub": _b_sub,
    "elementwise-mul": _b_mul,
    "tanh": _b_tanh,
    "sigmoid": _b_sigmoid,
    "relu": _b_relu,
    "exp": _b_exp,
    "log": _b_log,
    "softmax-over-last-axis": _b_softmax,
    "concat": _b_concat,
    "slice": _b_slice,
    "reshape": _b_reshape,
    "transpose": _b_transpose,
    "mean": _b_mean,
    "sum": _b_sum,
    "conv1d": _b_conv1d,
    "squared-l2": _b_squared_l2,
    "l1-norm": _b_l1,
}

OP_KINDS = tuple(FORWARD_RULES)


def apply(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it if any input needs a gradient."""
    try:
        rule = FORWARD_RULES[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    inputs = tuple(_wrap(t) for t in inputs)
    data, saved = rule([t.data for t in inputs], attrs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out._tape = None
    out.requires_grad = False
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        tape = _active_tape(inputs)
        node = _Node(kind, inputs, out, attrs, saved)
        tape.nodes.append(node)
        out.requires_grad = True
        out._node = node
        out._tape = tape
    return out


def _accumulate(grads, owned, key, shape, dtype, g):
    if isinstance(g, _Partial):
        buf = grads.get(key)
        if buf is None:
            buf = np.zeros(shape, dtype=dtype)
            grads[key] = buf
            owned.add(key)
        elif key not in owned:
            buf = np.array(buf, dtype=dtype)
            grads[key] = buf
            owned.add(key)
        buf[g.index] += g.values
        return
    buf = grads.get(key)
    if buf is None:
        grads[key] = g
    elif key in owned:
        buf += g
    else:
        grads[key] = buf + g
        owned.add(key)


def backward(loss: Tensor) -> dict:
    """Backpropagate from scalar ``loss``; return ``{leaf: gradient array}``.

    Gradients are also added into each leaf's ``grad`` attribute.  A tape can
    be walked only once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        if loss._tape is not None and loss._tape.consumed:
            raise ContractError("backward: tape already consumed; run a new forward pass")
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: g}
        return {}
    tape = loss._tape
    if tape.consumed:
        raise ContractError("backward: tape already consumed; run a new forward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = BACKWARD_RULES[node.kind](g, [t.data for t in node.inputs], node.out.data, node.attrs, node.saved)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                leaves[id(t)] = t
            _accumulate(grads, owned, id(t), t.shape, t.data.dtype, gi)
    tape.consumed = True
    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.data.dtype)
        if g.shape != leaf.shape:
            g = np.broadcast_to(g, leaf.shape).copy()
        result[leaf] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for node in tape.nodes:
        node.out._node = None
    tape.nodes = []
    if _state.tape is tape:
        _state.tape = None
    return result


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------

def matmul(a, b):
    return apply("matmul", (a, b))


def add(a, b):
    return apply("add", (a, b))


def sub(a, b):
    return apply("sub", (a, b))


def mul(a, b):
    return apply("elementwise-mul", (a, b))


def neg(a):
    return apply("elementwise-mul", (a, -1.0))


def scale(a, c: float):
    return apply("elementwise-mul", (a, float(c)))


def tanh(a):
    return apply("tanh", (a,))


def sigmoid(a):
    return apply("sigmoid", (a,))


def relu(a):
    return apply("relu", (a,))


def exp(a):
    return apply("exp", (a,))


def log(a):
    return apply("log", (a,))


def softmax(a):
    return apply("softmax-over-last-axis", (a,))


def concat(tensors: Iterable, axis: int = 0):
    return apply("concat", tuple(tensors), axis=axis)


def slice_axis(a, axis: int, start: int, stop: int):
    return apply("slice", (a,), axis=axis, start=start, stop=stop)


def reshape(a, shape):
    return apply("reshape", (a,), shape=tuple(shape))


def transpose(a, axes=None):
    return apply("transpose", (a,), axes=None if axes is None else tuple(axes))


def sum(a, axis=None):  # noqa: A001 - mirrors the op name
    return apply("sum", (a,), axis=axis)


def mean(a, axis=None):
    return apply("mean", (a,), axis=axis)


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply("conv1d", inputs, stride=stride, padding=padding)


def squared_l2(a):
    return apply("squared-l2", (a,))


def l1_norm(a):
    return apply("l1-norm", (a,))


def clamp(a, lo: float, hi: float):
    """Clamp into [lo, hi] with zero gradient outside, built from relu."""
    return add(sub(relu(add(a, -lo)), relu(add(a, -hi))), lo)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _param_list(params):
    if isinstance(params, Tensor):
        return [params]
    if isinstance(params, Mapping):
        return list(params.values())
    if hasattr(params, "tensors"):
        return list(params.tensors())
    return list(params)


def _scalar_value(out):
    v = float(np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64).reshape(-1)[0])
    if not np.isfinite(v):
        raise DomainError("grad_check: objective returned a non-finite value")
    return v


def grad_check(f: Callable, params, eps: float = 1e-4, max_coords: int = 20, seed: int = 0,
               floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    Everything is evaluated in float64.  At most ``max_coords`` randomly
    chosen coordinates are probed per parameter tensor.  The denominator is
    ``max(|analytic|, |central|, floor)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    tensors = _param_list(params)
    originals = [(t.data, t.grad, t.requires_grad) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with precision(np.float64):
            for t in tensors:
                t.data = np.array(t.data, dtype=np.float64)
                t.grad = None
                t.requires_grad = True
            out = f(params)
            _scalar_value(out)
            analytic = backward(out)
            with no_grad():
                for t in tensors:
                    g = analytic.get(t)
                    if g is None:
                        g = np.zeros_like(t.data)
                    flat = t.data.reshape(-1)
                    n = flat.size
                    coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
                    for i in coords:
                        orig = flat[i]
                        flat[i] = orig + eps
                        fp = _scalar_value(f(params))
                        flat[i] = orig - eps
                        fm = _scalar_value(f(params))
                        flat[i] = orig
                        central = (fp - fm) / (2.0 * eps)
                        a = float(g.reshape(-1)[i])
                        rel = abs(a - central) / max(abs(a), abs(central), floor)
                        worst = max(worst, rel)
    finally:
        for t, (data, grad, req) in zip(tensors, originals):
            t.data = data
            t.grad = grad
            t.requires_grad = req
    return worst
