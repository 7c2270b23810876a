"""Convolutional feature streams.

A stream is a chain of conv / pool / nonlinearity / LRN layers that maps an
image batch ``(N, S, S, C)`` to the square activation grid ``(N, K, K, D)``
consumed by bilinear pooling.  Layer chains are described by
:class:`StreamConfig`; the two desk-scale defaults and the two large schemas
(``mnet_config`` / ``dnet_config``, shape propagation only) live here too.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import lrn  # noqa: F401  (re-exported: part of this module's surface)

ACTIVATIONS = ("relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    # LRN parameters (AlexNet defaults)
    radius: int = 2
    alpha: float = 1e-4
    beta: float = 0.75
    bias: float = 2.0

    def __str__(self):
        if self.kind == "conv":
            return f"conv({self.filters},{self.kernel},{self.stride},{self.padding})"
        if self.kind == "pool":
            return f"pool({self.window},{self.stride})"
        if self.kind == "lrn":
            return f"lrn({self.radius},{self.alpha!r},{self.beta!r},{self.bias!r})"
        return self.kind


def conv(filters, kernel, stride=1, padding=0):
    return LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, padding=padding)


def pool(window, stride=None):
    return LayerSpec("pool", window=window, stride=window if stride is None else stride)


def act(kind):
    if kind not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}")
    return LayerSpec(kind)


def lrn_layer(radius=2, alpha=1e-4, beta=0.75, bias=2.0):
    return LayerSpec("lrn", radius=radius, alpha=alpha, beta=beta, bias=bias)


@dataclass
class StreamConfig:
    layers: list
    input_size: int = 64
    input_channels: int = 1
    out_size: int = 8
    channels: int = 32
    name: str = "stream"

    def shape_chain(self):
        """``[(label, (H, W, C)), ...]`` starting from the input image."""
        h = w = self.input_size
        c = self.input_channels
        chain = [("input", (h, w, c))]
        for spec in self.layers:
            if spec.kind == "conv":
                h = T.conv_output_size(h, spec.kernel, spec.stride, spec.padding)
                w = T.conv_output_size(w, spec.kernel, spec.stride, spec.padding)
                c = spec.filters
            elif spec.kind == "pool":
                h = (h - spec.window) // spec.stride + 1
                w = (w - spec.window) // spec.stride + 1
            chain.append((str(spec), (h, w, c)))
        return chain

    def downsampling(self):
        return self.input_size / self.out_size

    def validate(self):
        chain = self.shape_chain()
        described = " -> ".join(f"{label}:{'x'.join(map(str, s))}" for label, s in chain)
        if not any(s.kind == "conv" for s in self.layers):
            raise ConfigError(f"{self.name}: needs at least one conv layer", key=f"{self.name}.layers")
        if self.layers[-1].kind not in ACTIVATIONS:
            raise ConfigError(f"{self.name}: final layer must be a nonlinearity, got {self.layers[-1]}",
                              key=f"{self.name}.layers")
        for spec in self.layers:
            if spec.kind == "conv" and (spec.filters < 1 or spec.kernel < 1 or spec.stride < 1 or spec.padding < 0):
                raise ConfigError(f"{self.name}: bad conv spec {spec}", key=f"{self.name}.layers")
            if spec.kind == "pool" and (spec.window < 1 or spec.stride < 1):
                raise ConfigError(f"{self.name}: bad pool spec {spec}", key=f"{self.name}.layers")
        if any(min(s[:2]) < 1 for _, s in chain):
            raise ConfigError(f"{self.name}: layer chain collapses to nothing: {described}",
                              key=f"{self.name}.layers")
        h, w, c = chain[-1][1]
        if (h, w, c) != (self.out_size, self.out_size, self.channels):
            raise ConfigError(
                f"{self.name}: declared output {self.out_size}x{self.out_size}x{self.channels} "
                f"unreachable; computed chain {described}", key=f"{self.name}.out_size")
        return chain


_LAYER_RE = re.compile(r"([a-z]+)(?:\(([^)]*)\))?")


def parse_layers(text):
    """Parse ``"conv(8,3,1,1) pool(2,2) relu"`` into layer specs."""
    specs = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _LAYER_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"cannot parse layer list at {text[pos:]!r}")
        kind, args = m.group(1), m.group(2)
        vals = [a.strip() for a in args.split(",")] if args else []
        try:
            if kind == "conv":
                specs.append(conv(*[int(v) for v in vals]))
            elif kind == "pool":
                specs.append(pool(*[int(v) for v in vals]))
            elif kind == "lrn":
                nums = [float(v) for v in vals]
                if nums:
                    nums[0] = int(nums[0])
                specs.append(lrn_layer(*nums))
            elif kind in ACTIVATIONS and not vals:
                specs.append(act(kind))
            else:
                raise ConfigError(f"unknown layer {m.group(0)!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad arguments in layer {m.group(0)!r}: {exc}") from None
        pos = m.end()
    return specs


def format_layers(specs):
    return " ".join(str(s) for s in specs)


class Stream:
    """A built convolutional stream bound to a :class:`~spattend.tensor.ParameterStore`."""

    def __init__(self, config, store, prefix):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.conv_names = []

    def extract(self, images):
        return extract(self, images)

    def param_names(self):
        return self.store.names(self.prefix + ".")


def build_stream(config, seed, store=None, prefix=None):
    """Validate ``config`` and register He-initialized conv weights.

    Conv kernels are drawn from N(0, 2 / fan_in); biases start at zero.
    Parameters are named ``<prefix>.conv<k>.w`` / ``.b`` so two streams in
    one store never collide.
    """
    config.validate()
    store = store if store is not None else T.ParameterStore()
    prefix = prefix or config.name
    rng = np.random.default_rng(seed)
    stream = Stream(config, store, prefix)
    cin = config.input_channels
    for k, spec in enumerate(l for l in config.layers if l.kind == "conv"):
        fan_in = spec.kernel * spec.kernel * cin
        w = rng.standard_normal((spec.kernel, spec.kernel, cin, spec.filters)) * np.sqrt(2.0 / fan_in)
        store.add(f"{prefix}.conv{k}.w", w)
        store.add(f"{prefix}.conv{k}.b", np.zeros(spec.filters), decay=False)
        stream.conv_names.append(f"{prefix}.conv{k}")
        cin = spec.filters
    return stream


def extract(stream, images):
    """Run the stream on ``(N, S, S, C)`` images (or one ``(S, S, C)`` image)."""
    x = T.as_tensor(images)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    cfg = stream.config
    expected = (cfg.input_size, cfg.input_size, cfg.input_channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"{stream.prefix}: image shape {tuple(x.shape[1:])} != configured {expected}")
    k = 0
    for spec in cfg.layers:
        if spec.kind == "conv":
            name = stream.conv_names[k]
            x = T.conv2d(x, stream.store[name + ".w"], spec.stride, spec.padding)
            x = T.add(x, stream.store[name + ".b"])
            k += 1
        elif spec.kind == "pool":
            x = T.maxpool2d(x, spec.window, spec.stride)
        elif spec.kind == "lrn":
            x = T.lrn(x, spec.radius, spec.alpha, spec.beta, spec.bias)
        elif spec.kind == "relu":
            x = T.relu(x)
        elif spec.kind == "tanh":
            x = T.tanh(x)
        elif spec.kind == "sigmoid":
            x = T.sigmoid(x)
    return x


# canned configurations ----------------------------------------------------

def desk_stream_a(input_size=64, input_channels=1):
    """Three 3x3 conv blocks, 64 -> 8 spatially, 32 channels."""
    layers = [conv(8, 3, 1, 1), pool(2), act("relu"),
              conv(16, 3, 1, 1), pool(2), act("relu"),
              conv(32, 3, 1, 1), pool(2), act("relu")]
    return StreamConfig(layers, input_size, input_channels, input_size // 8, 32, name="stream_a")


def desk_stream_b(input_size=64, input_channels=1):
    """Three 3x3 conv blocks plus a closing 1x1 conv, 48 channels."""
    layers = [conv(12, 3, 1, 1), pool(2), act("relu"),
              conv(24, 3, 1, 1), pool(2), act("relu"),
              conv(48, 3, 1, 1), pool(2), act("relu"),
              conv(48, 1, 1, 0), act("relu")]
    return StreamConfig(layers, input_size, input_channels, input_size // 8, 48, name="stream_b")


def mnet_config(input_size=448):
    """Five-conv M-Net schema (shape propagation only; far too big to train here)."""
    layers = [conv(96, 7, 2, 0), act("relu"), lrn_layer(), pool(2),
              conv(256, 5, 2, 1), act("relu"), lrn_layer(), pool(2),
              conv(512, 3, 1, 1), act("relu"),
              conv(512, 3, 1, 1), act("relu"),
              conv(512, 3, 1, 1), act("relu")]
    return StreamConfig(layers, input_size, 3, 27, 512, name="mnet")


def dnet_config(input_size=448, one_by_one=True):
    """D-Net schema: a 3x3 conv opening each block followed by 1x1 convs.

    With ``one_by_one=False`` the trailing convs are read as 3x3 (padding 1),
    the VGG-16 reading; the output shape is the same either way.  Pools close
    blocks 1-4 so that a 448 input yields 28x28.
    """
    k, p = (1, 0) if one_by_one else (3, 1)
    blocks = [(64, 1), (128, 1), (256, 3), (512, 3), (512, 3)]
    layers = []
    for b, (width, extra) in enumerate(blocks):
        layers += [conv(width, 3, 1, 1), act("relu")]
        for _ in range(extra):
            layers += [conv(width, k, 1, p), act("relu")]
        if b < 4:
            layers.append(pool(2))
    return StreamConfig(layers, input_size, 3, 28, 512, name="dnet")
