"""The full two-stream model: streams -> bilinear tube -> attention sweep -> classifier.

``mode="baseline"`` swaps the sweep for orderless sum pooling (plus signed
square root and L2 normalization), keeping streams and classifier type
identical, which is what the ablation compares against.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, InitMlp, SpatialLstmLayer, Support, flatten_features, sweep
from .bilinear import align_grids, bilinear, check_dim, normalize_signed_sqrt_l2, sum_pool_baseline
from .errors import ConfigError
from .objective import class_logits
from .streams import StreamConfig, build_stream, desk_stream_a, desk_stream_b, extract

MODES = ("attention", "baseline")
ATTENTION_NORMS = ("off", "per_location", "after_attention")


@dataclass
class ModelConfig:
    stream_a: StreamConfig = field(default_factory=desk_stream_a)
    stream_b: StreamConfig = field(default_factory=desk_stream_b)
    mode: str = "attention"
    num_classes: int = 4
    hidden: int = 64
    layers: int = 2
    init_width: int = 64
    support: Support = field(default_factory=Support)
    attention_norm: str = "off"
    baseline_norm: bool = True
    biases: bool = True
    dropout: float = 0.5
    dtype: str = "float64"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got {self.mode!r}", key="model.mode")
        if self.num_classes < 2:
            raise ConfigError("model.classes must be >= 2", key="model.classes")
        if self.hidden < 1:
            raise ConfigError("model.hidden must be >= 1", key="model.hidden")
        if self.layers < 1:
            raise ConfigError("model.layers must be >= 1", key="model.layers")
        if self.init_width < 1:
            raise ConfigError("model.init_width must be >= 1", key="model.init_width")
        if self.attention_norm not in ATTENTION_NORMS:
            raise ConfigError(f"attention.normalize must be one of {ATTENTION_NORMS}", key="attention.normalize")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout.rate must be in [0, 1)", key="dropout.rate")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("model.dtype must be float64 or float32", key="model.dtype")
        self.stream_a.validate()
        self.stream_b.validate()
        if (self.stream_a.input_size, self.stream_a.input_channels) != \
                (self.stream_b.input_size, self.stream_b.input_channels):
            raise ConfigError("both streams must take the same input size and channels", key="stream_b.input_size")
        if abs(self.stream_a.out_size - self.stream_b.out_size) > 1:
            raise ConfigError(
                f"stream grids {self.stream_a.out_size} and {self.stream_b.out_size} differ by more than one",
                key="stream_b.out_size")
        check_dim(self.stream_a.channels, self.stream_b.channels)
        return self

    @property
    def grid(self):
        return min(self.stream_a.out_size, self.stream_b.out_size)

    @property
    def bilinear_dim(self):
        return self.stream_a.channels * self.stream_b.channels

    @property
    def input_shape(self):
        return (self.stream_a.input_size, self.stream_a.input_size, self.stream_a.input_channels)

    @property
    def feature_dim(self):
        if self.mode == "baseline":
            return self.bilinear_dim
        return self.grid * self.grid * self.hidden


@dataclass
class ForwardResult:
    logits: "T.Tensor"
    probs: "T.Tensor"
    features: "T.Tensor"
    maps: list = None           # per-step attention maps, attention mode only
    sweep: object = None


class Model:
    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.seed = seed
        self.store = T.ParameterStore(np.dtype(config.dtype))
        seeds = np.random.SeedSequence(seed).spawn(4)
        self.stream_a = build_stream(config.stream_a, seeds[0], self.store, "stream_a")
        self.stream_b = build_stream(config.stream_b, seeds[1], self.store, "stream_b")
        rng = np.random.default_rng(seeds[2])
        K, D, H = config.grid, config.bilinear_dim, config.hidden
        self.layers = []
        self.attention = None
        self.init_mlp = None
        if config.mode == "attention":
            for k in range(config.layers):
                self.layers.append(SpatialLstmLayer(self.store, f"lstm{k + 1}", D if k == 0 else H, H, rng,
                                                    biases=config.biases))
            self.attention = AttentionParams(self.store, "attention", K, H, rng)
            self.init_mlp = InitMlp(self.store, "init", D, H, config.init_width, rng)
        head_rng = np.random.default_rng(seeds[3])
        F = config.feature_dim
        bound = 1.0 / np.sqrt(F)
        self.store.add("head.W", head_rng.uniform(-bound, bound, (F, config.num_classes)))

    @property
    def head_names(self):
        return self.store.names("head.")

    @property
    def grid(self):
        return self.config.grid

    def tube(self, images):
        x = T.as_tensor(np.asarray(images, dtype=self.store.dtype))
        a = extract(self.stream_a, x)
        b = extract(self.stream_b, x)
        a, b = align_grids(a, b)
        return bilinear(a, b)

    def forward(self, images, training=False, rng=None, record_gates=False):
        cfg = self.config
        tube = self.tube(images)
        if cfg.mode == "baseline":
            pooled = sum_pool_baseline(tube)
            feats = normalize_signed_sqrt_l2(pooled) if cfg.baseline_norm else pooled
            feats = T.dropout(feats, cfg.dropout, rng, training)
            logits = class_logits(feats, self.store["head.W"])
            return ForwardResult(logits, T.softmax(logits, axis=-1), feats)
        res = sweep(tube, self.layers, self.attention, self.init_mlp, cfg.support,
                    dropout_rate=cfg.dropout, rng=rng, training=training,
                    attention_norm=cfg.attention_norm, record_gates=record_gates)
        feats = T.dropout(flatten_features(res.hidden), cfg.dropout, rng, training)
        logits = class_logits(feats, self.store["head.W"])
        return ForwardResult(logits, T.softmax(logits, axis=-1), feats, res.maps, res)

    def predict(self, images, batch_size=64):
        out = []
        for lo in range(0, len(images), batch_size):
            out.append(np.argmax(self.forward(images[lo:lo + batch_size]).logits.data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)
