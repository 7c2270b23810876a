"""Spatial LSTM sweep with location-softmax attention.

The sweep visits the K x K bilinear tube in raster order (rows outer, columns
inner, origin top-left).  At each position of the first layer a softmax over
grid locations is computed from the hidden state of the previous raster
position (the initial state ``h0`` at the origin), restricted to a support
(by default the causal prefix ``{(u, v): u <= i, v <= j}``); the expected
bilinear slice under that distribution is the cell input.  Each cell gets
hidden and memory states from its upper and left neighbours through separate
forget gates.  Higher layers consume the hidden grid of the layer below
directly, without attention of their own.

Gate naming follows the recurrence literally: the ``l`` weights act on the
*upper* neighbour ``h[i-1, j]`` and ``f_l`` gates ``c[i-1, j]``; the ``r``
weights act on the *left* neighbour ``h[i, j-1]`` and ``f_r`` gates
``c[i, j-1]``.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

INPUT_WEIGHTS = ("W_xi", "W_xf_l", "W_xf_r", "W_xo", "W_xc")
UP_WEIGHTS = ("W_hi_l", "W_hf_l", "W_ho_l", "W_hc_l")
LEFT_WEIGHTS = ("W_hi_r", "W_hf_r", "W_ho_r", "W_hc_r")
WEIGHT_NAMES = INPUT_WEIGHTS + UP_WEIGHTS + LEFT_WEIGHTS
BIAS_NAMES = ("b_i", "b_f_l", "b_f_r", "b_o", "b_c")
# packed gate order along the last axis: i, f_l, f_r, o, g
GATES = ("i", "f_l", "f_r", "o", "g")


def _grid_shape(grid):
    return (grid, grid) if np.isscalar(grid) else tuple(int(g) for g in grid)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SpatialLstmLayer:
    """Thirteen gate weight arrays (plus optional per-gate biases) of one layer."""

    def __init__(self, store, prefix, input_dim, hidden, rng, biases=True):
        self.store = store
        self.prefix = prefix
        self.input_dim = input_dim
        self.hidden = hidden
        self.biases = biases
        for name in INPUT_WEIGHTS:
            store.add(f"{prefix}.{name}", _uniform(rng, input_dim, (input_dim, hidden)))
        for name in UP_WEIGHTS + LEFT_WEIGHTS:
            store.add(f"{prefix}.{name}", _uniform(rng, hidden, (hidden, hidden)))
        if biases:
            for name in BIAS_NAMES:
                init = 1.0 if name.startswith("b_f") else 0.0
                store.add(f"{prefix}.{name}", np.full(hidden, init), decay=False)

    def __getitem__(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def packed(self):
        """Gate weights concatenated along the output axis in ``GATES`` order.

        Returns ``(W_x, W_up, W_left, b)``.  The upper neighbour has no path
        into ``f_r`` and the left neighbour none into ``f_l``; those blocks
        are constant zeros.
        """
        zero = T.Tensor(np.zeros((self.hidden, self.hidden), dtype=self.store.dtype))
        w_x = T.concat([self[n] for n in INPUT_WEIGHTS], axis=1)
        w_up = T.concat([self["W_hi_l"], self["W_hf_l"], zero, self["W_ho_l"], self["W_hc_l"]], axis=1)
        w_left = T.concat([self["W_hi_r"], zero, self["W_hf_r"], self["W_ho_r"], self["W_hc_r"]], axis=1)
        b = T.concat([self[n] for n in BIAS_NAMES], axis=0) if self.biases else None
        return w_x, w_up, w_left, b


class AttentionParams:
    """Per-location projection vectors, stored as one ``(hidden, R*C)`` matrix.

    Column ``u*C + v`` holds ``U[u, v]``.  ``grid`` is ``K`` for a square
    ``K x K`` grid or an ``(R, C)`` pair.
    """

    def __init__(self, store, prefix, grid, hidden, rng):
        self.shape = _grid_shape(grid)
        self.grid = self.shape[0]
        self.hidden = hidden
        self.name = f"{prefix}.U"
        store.add(self.name, _uniform(rng, hidden, (hidden, self.shape[0] * self.shape[1])))
        self.store = store

    @property
    def U(self):
        return self.store[self.name]


class InitMlp:
    """Two one-hidden-layer perceptrons mapping the mean tube slice to ``c0`` and ``h0``."""

    def __init__(self, store, prefix, input_dim, hidden, width, rng):
        self.store = store
        self.prefix = prefix
        self.input_dim = input_dim
        self.hidden = hidden
        for which in ("c", "h"):
            p = f"{prefix}.{which}"
            store.add(f"{p}.W1", _uniform(rng, input_dim, (input_dim, width)))
            store.add(f"{p}.b1", np.zeros(width), decay=False)
            store.add(f"{p}.W2", _uniform(rng, width, (width, hidden)))
            store.add(f"{p}.b2", np.zeros(hidden), decay=False)

    def apply(self, which, x):
        p = f"{self.prefix}.{which}"
        s = self.store
        z = T.tanh(T.add(T.matmul(x, s[f"{p}.W1"]), s[f"{p}.b1"]))
        return T.tanh(T.add(T.matmul(z, s[f"{p}.W2"]), s[f"{p}.b2"]))


# supports -----------------------------------------------------------------

@dataclass(frozen=True)
class Support:
    """Which grid cells a location softmax may put mass on.

    ``mode`` is ``"causal_prefix"`` (rectangle above-left of the current
    cell, inclusive), ``"full"`` (whole grid) or ``"window"`` (causal prefix
    cells within Chebyshev distance ``radius`` of the current cell).
    """

    mode: str = "causal_prefix"
    radius: int = 0

    def mask(self, grid, i, j):
        rows, cols = _grid_shape(grid)
        u = np.arange(rows)[:, None]
        v = np.arange(cols)[None, :]
        if self.mode == "full":
            m = np.ones((rows, cols), dtype=bool)
        elif self.mode == "causal_prefix":
            m = (u <= i) & (v <= j)
        elif self.mode == "window":
            m = (u <= i) & (v <= j) & (i - u <= self.radius) & (j - v <= self.radius)
        else:
            raise ConfigError(f"unknown attention support {self.mode!r}", key="attention.support")
        return m.reshape(-1)

    def __str__(self):
        return f"window({self.radius})" if self.mode == "window" else self.mode


def parse_support(text):
    text = str(text).strip()
    if text in ("full", "causal_prefix"):
        return Support(text)
    m = re.fullmatch(r"window\((\d+)\)", text)
    if m:
        return Support("window", int(m.group(1)))
    raise ConfigError(f"attention.support must be full, causal_prefix or window(r); got {text!r}",
                      key="attention.support")


# operations ---------------------------------------------------------------

def init_states(tube, mlps):
    """``c0, h0`` from the mean location vector of the tube, each ``(N, hidden)``."""
    tube = T.as_tensor(tube)
    if tube.shape[-1] != mlps.input_dim:
        raise ConfigError(f"init MLP expects {mlps.input_dim}-dim slices, tube has {tube.shape[-1]}",
                          key="model.hidden")
    m = T.mean(tube, axis=(1, 2))
    return mlps.apply("c", m), mlps.apply("h", m)


def location_softmax(h, params, support_mask=None):
    """Attention over grid locations, ``(N, K*K)``; zero outside the support."""
    logits = T.matmul(h, params.U)
    if support_mask is not None and not np.any(support_mask):
        raise ValueError("attention support is empty")
    return T.softmax(logits, axis=-1, mask=support_mask)


def attend(tube, weights):
    """Expected slice ``sum_{u,v} L[u,v] * B[u,v]``.

    ``tube`` is ``(N, K, K, D)`` or already flattened to ``(N, K*K, D)``;
    ``weights`` is ``(N, K*K)``.  Returns ``(N, D)``.
    """
    tube, weights = T.as_tensor(tube), T.as_tensor(weights)
    if tube.ndim == 4:
        n, k1, k2, d = tube.shape
        tube = T.reshape(tube, (n, k1 * k2, d))
    n, cells, d = tube.shape
    if weights.shape != (n, cells):
        raise DimensionError(f"attend: weights {weights.shape} do not match tube {(n, cells, d)}")
    return T.weighted_sum(tube, weights)


def step(layer, x, h_left, h_up, c_left, c_up, packed=None, record=None):
    """One spatial LSTM cell update; returns ``(c, h)``.

    ``record``, if a dict, receives the gate activations and ``c`` (numpy arrays).
    """
    w_x, w_up, w_left, b = packed if packed is not None else layer.packed()
    H = layer.hidden
    z = T.add(T.add(T.matmul(x, w_x), T.matmul(h_up, w_up)), T.matmul(h_left, w_left))
    if b is not None:
        z = T.add(z, b)
    s = T.sigmoid(T.getitem(z, (Ellipsis, slice(0, 4 * H))))
    g = T.tanh(T.getitem(z, (Ellipsis, slice(4 * H, 5 * H))))
    i_gate = T.getitem(s, (Ellipsis, slice(0, H)))
    f_l = T.getitem(s, (Ellipsis, slice(H, 2 * H)))
    f_r = T.getitem(s, (Ellipsis, slice(2 * H, 3 * H)))
    o = T.getitem(s, (Ellipsis, slice(3 * H, 4 * H)))
    c = T.add(T.add(T.mul(g, i_gate), T.mul(c_left, f_r)), T.mul(c_up, f_l))
    h = T.tanh(T.mul(c, o))
    if record is not None:
        record.update(i=i_gate.data, f_l=f_l.data, f_r=f_r.data, o=o.data, g=g.data, c=c.data)
    return c, h


@dataclass
class SweepResult:
    hidden: "T.Tensor"           # (N, K, K, hidden) of the top layer
    maps: list                   # K*K tensors of shape (N, K*K), raster order
    layer_hidden: list = field(default_factory=list)  # per layer, list of K*K (N, hidden) tensors
    gates: list = field(default_factory=list)         # per layer-1 step, dict of gate arrays
    c0: "T.Tensor" = None
    h0: "T.Tensor" = None

    def stacked_maps(self):
        """Attention maps as one ``(N, K*K steps, K*K cells)`` tensor."""
        return T.stack(self.maps, axis=1)


def sweep(tube, layers, params, mlps, support=Support(), *, dropout_rate=0.0, rng=None,
          training=False, attention_norm="off", record_gates=False):
    """Run the full multi-layer spatial sweep over a ``(N, R, C, D)`` tube (normally square)."""
    from .bilinear import normalize_signed_sqrt_l2

    tube = T.as_tensor(tube)
    if not layers:
        raise ConfigError("sweep needs at least one layer", key="model.layers")
    if tube.ndim != 4:
        raise DimensionError(f"tube must be (N, R, C, D), got {tube.shape}")
    n, R, C, d = tube.shape
    expected = d
    for k, layer in enumerate(layers):
        if layer.input_dim != expected:
            raise ConfigError(f"layer {k + 1} expects input dim {layer.input_dim}, gets {expected}",
                              key="model.layers")
        expected = layer.hidden
    if params.shape != (R, C):
        raise ConfigError(f"attention parameters are for a {params.shape[0]}x{params.shape[1]} grid, "
                          f"tube is {R}x{C}", key="stream_a.out_size")

    if attention_norm == "per_location":
        tube = normalize_signed_sqrt_l2(tube)
    c0, h0 = init_states(tube, mlps)
    flat = T.reshape(tube, (n, R * C, d))

    maps, gates, layer_hidden = [], [], []
    below = None
    for depth, layer in enumerate(layers):
        packed = layer.packed()
        hs, cs = [None] * (R * C), [None] * (R * C)
        for i in range(R):
            for j in range(C):
                p = i * C + j
                if depth == 0:
                    h_prev = h0 if p == 0 else hs[p - 1]
                    weights = location_softmax(h_prev, params, support.mask((R, C), i, j))
                    maps.append(weights)
                    x = attend(flat, weights)
                    if attention_norm == "after_attention":
                        x = normalize_signed_sqrt_l2(x)
                else:
                    x = below[p]
                x = T.dropout(x, dropout_rate, rng, training)
                h_left, c_left = (hs[p - 1], cs[p - 1]) if j > 0 else (h0, c0)
                h_up, c_up = (hs[p - C], cs[p - C]) if i > 0 else (h0, c0)
                rec = {} if (record_gates and depth == 0) else None
                cs[p], hs[p] = step(layer, x, h_left, h_up, c_left, c_up, packed=packed, record=rec)
                if rec is not None:
                    gates.append(rec)
        layer_hidden.append(hs)
        below = hs
    top = T.reshape(T.stack(below, axis=1), (n, R, C, layers[-1].hidden))
    return SweepResult(top, maps, layer_hidden, gates, c0, h0)


def flatten_features(hidden_grid):
    """Row-major flattening ``(N, K, K, H) -> (N, K*K*H)``."""
    g = T.as_tensor(hidden_grid)
    return T.reshape(g, (g.shape[0], int(np.prod(g.shape[1:]))))
