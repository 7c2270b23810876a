"""Dense arrays with taped reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations executed while a
:class:`Tape` is active are recorded together with a closure that pushes the
output gradient back to the inputs; :meth:`Tape.backward` replays those
closures in exact reverse order.  Outside a tape the same functions are plain
numpy computations, which is what evaluation and finite differences use.

Arrays are channels-last: images and feature grids are ``(N, H, W, C)``.
"""

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, TapeError

DEFAULT_DTYPE = np.float64

_active_tapes = []
_replaying = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

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

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded on the innermost active tape.
    """

    def __init__(self):
        self.ops = []
        self._deferred = {}

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, out, inputs, backward_fn):
        self.ops.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Propagate d(loss)/d(loss) = 1 back through every recorded op."""
        if not self.ops:
            raise TapeError("backward called on an empty tape")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        _replaying.append(self)
        try:
            for out, _, backward_fn in reversed(self.ops):
                self._flush(out)
                if out.grad is not None:
                    backward_fn(out.grad)
            for key in list(self._deferred):
                self._flush(self._deferred[key][0])
        finally:
            _replaying.pop()

    def _defer_outer(self, t, a, b):
        entry = self._deferred.setdefault(id(t), (t, [], []))
        entry[1].append(a)
        entry[2].append(b)

    def _flush(self, t):
        entry = self._deferred.pop(id(t), None)
        if entry is None:
            return
        _, a_list, b_list = entry
        a = np.stack(a_list, axis=-1)   # (N, C, S)
        b = np.stack(b_list, axis=-2)   # (N, S, D)
        _accum(t, np.matmul(a, b))


def active_tape():
    return _active_tapes[-1] if _active_tapes else None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, inputs, backward_fn):
    """Wrap ``data`` as the output of an op and record it if needed."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, [a, b], backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, [a, b], backward)


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, [a, b], backward)


elementwise_mul = mul


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, [a], backward)


def square(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, [a], backward)


def clamp_min(a, lo):
    a = as_tensor(a)
    keep = a.data >= lo

    def backward(g):
        _accum(a, g * keep)

    return _make(np.maximum(a.data, lo), [a], backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), [a], backward)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    def backward(g):
        _accum(a, g * pos)

    return _make(a.data * pos, [a], backward)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, [a], backward)


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, [a], backward)


# reductions and shape ops -------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), [a], backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, [a], backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), [a], backward)


def getitem(a, index):
    a = as_tensor(a)

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        _accum(a, full)

    return _make(a.data[index], [a], backward)


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(data, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, k, axis=axis))

    return _make(data, tensors, backward)


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    """``np.matmul`` semantics, including batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None

    def backward(g):
        ad = a.data if a.ndim > 1 else a.data[None, :]
        bd = b.data if b.ndim > 1 else b.data[:, None]
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
            if a.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
                ga = _unbroadcast(ga, a.shape)
            _accum(a, ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            if b.ndim == 1:
                gb = _unbroadcast(gb[..., 0], b.shape)
            _accum(b, gb)

    return _make(data, [a, b], backward)


def weighted_sum(values, weights):
    """``out[n] = sum_k weights[n, k] * values[n, k, :]``.

    ``values`` is ``(N, C, D)``, ``weights`` is ``(N, C)``.  When one
    ``values`` tensor feeds many of these ops (one per attention step), the
    gradient contributions to it are collected during the backward sweep and
    reduced with a single batched matmul.
    """
    values, weights = as_tensor(values), as_tensor(weights)
    if values.ndim != 3 or weights.shape != values.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} do not match values {values.shape}")
    out = np.matmul(weights.data[:, None, :], values.data)[:, 0, :]

    def backward(g):
        if weights.requires_grad:
            _accum(weights, np.matmul(values.data, g[:, :, None])[:, :, 0])
        if values.requires_grad:
            if _replaying:
                _replaying[-1]._defer_outer(values, weights.data, g)
            else:
                _accum(values, weights.data[:, :, None] * g[:, None, :])

    return _make(out, [values, weights], backward)


def softmax(logits, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    The masked form normalizes over the support only.  Every slice must keep
    at least one entry.
    """
    x = as_tensor(logits)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _make(y, [x], backward)


# convolutional ops --------------------------------------------------------

def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def conv2d(x, kernels, stride=1, padding=0):
    """2-D cross-correlation.

    ``x`` is ``(N, H, W, C)``; ``kernels`` is ``(kh, kw, C, F)``.  Returns
    ``(N, Ho, Wo, F)``.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be (N, H, W, C), got {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be (kh, kw, C, F), got {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride={stride} / padding={padding}")
    kh, kw, cin, cout = w.shape
    if cin != x.shape[3]:
        raise DimensionError(f"conv2d: channel axis mismatch (input has {x.shape[3]}, kernels expect {cin})")
    for axis_name, n, k in (("height", x.shape[1], kh), ("width", x.shape[2], kw)):
        if n + 2 * padding < k:
            raise DimensionError(f"conv2d: {axis_name} axis {n} (+2*{padding} padding) smaller than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(kh * kw * cin, cout)
    n = x.shape[0]
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding, :]
            _accum(x, dxp)

    return _make(out, [x, w], backward)


def maxpool2d(x, window, stride=None):
    """Max over ``window``×``window`` patches.

    Ties go to the first position in row-major scan order of the window, for
    both the forward argmax and the backward routing.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be (N, H, W, C), got {x.shape}")
    if window > x.shape[1] or window > x.shape[2]:
        raise DimensionError(f"maxpool2d: window {window} larger than spatial extent {x.shape[1:3]}")
    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    flat = win.reshape(n, ho, wo, c, window * window)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * hit
        _accum(x, dx)

    return _make(out, [x], backward)


def _channel_window_sum(a, radius):
    if radius == 0:
        return a
    c = a.shape[-1]
    padded = np.concatenate([np.zeros(a.shape[:-1] + (radius + 1,), a.dtype), a,
                             np.zeros(a.shape[:-1] + (radius,), a.dtype)], axis=-1)
    cs = np.cumsum(padded, axis=-1)
    return cs[..., 2 * radius + 1:2 * radius + 1 + c] - cs[..., :c]


def lrn(x, depth_radius=2, alpha=1e-4, beta=0.75, bias=1.0):
    """Cross-channel local response normalization.

    ``y_c = x_c / (bias + alpha * sum_{|c'-c| <= r} x_{c'}^2) ** beta``
    """
    x = as_tensor(x)
    if depth_radius < 0:
        raise DimensionError("lrn: depth_radius must be >= 0")
    s = bias + alpha * _channel_window_sum(x.data * x.data, depth_radius)
    d = s ** -beta
    out = x.data * d

    def backward(g):
        t = g * x.data * d / s
        dx = g * d - 2.0 * alpha * beta * x.data * _channel_window_sum(t, depth_radius)
        _accum(x, dx)

    return _make(out, [x], backward)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout: scale kept units by 1/(1-rate) at train time only."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        _accum(x, g * keep)

    return _make(x.data * keep, [x], backward)


# normalization ------------------------------------------------------------

def signed_sqrt(x):
    """``sign(x) * sqrt(|x|)``; the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    r = np.sqrt(np.abs(x.data))
    out = np.sign(x.data) * r
    with np.errstate(divide="ignore"):
        dr = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)

    def backward(g):
        _accum(x, g * dr)

    return _make(out, [x], backward)


def l2_normalize(x, axis=-1):
    """Divide by the L2 norm along ``axis``; all-zero slices pass through."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = x.data / safe
    nonzero = norm > 0

    def backward(g):
        dx = (g - y * np.sum(g * y, axis=axis, keepdims=True)) / safe
        _accum(x, np.where(nonzero, dx, g))

    return _make(y, [x], backward)


# parameters ---------------------------------------------------------------

class ParameterStore:
    """Flat, ordered registry of named learnable arrays and their gradients."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self._params = OrderedDict()
        self._decay = set()
        self.dtype = np.dtype(dtype)

    def add(self, name, value, decay=True):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        if decay:
            self._decay.add(name)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def replace(self, name, tensor):
        """Swap the tensor registered under ``name`` (shape must match)."""
        if name not in self._params:
            raise KeyError(name)
        if tensor.shape != self._params[name].shape:
            raise DimensionError(f"{name}: shape {tensor.shape} != {self._params[name].shape}")
        self._params[name] = tensor

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def decayed(self):
        return [t for n, t in self._params.items() if n in self._decay]

    def is_decayed(self, name):
        return name in self._decay

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_values(self):
        return sum(t.size for t in self._params.values())

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in state.items():
            t = self._params[name]
            value = np.asarray(value, dtype=self.dtype)
            if value.shape != t.shape:
                raise DimensionError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def backward(tape, loss):
    """Run the reverse sweep of ``tape`` from the scalar ``loss``."""
    tape.backward(loss)
