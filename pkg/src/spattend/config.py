"""Experiment configuration files.

Grammar (one setting per line)::

    line    := blank | comment | setting
    comment := optional whitespace, "#", anything
    setting := key "=" value [ "#" comment ]
    key     := name ("." name)*          e.g. attention.lambda
    value   := the rest of the line, surrounding whitespace stripped

Keys are case-sensitive and must be listed in :data:`KEYS`; unknown or
repeated keys are errors.  Values are read according to the key's type:
integers, floats (``1e-5`` allowed), booleans (``true``/``false``/``yes``/
``no``/``1``/``0``), ``none`` for optional numbers, or plain text.  Every
error message names the offending key and, for file input, the line.
"""

import hashlib
from dataclasses import dataclass

from .attention import parse_support
from .data import SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig
from .objective import LossConfig
from .streams import StreamConfig, desk_stream_a, desk_stream_b, dnet_config, mnet_config, parse_layers
from .training import SvmConfig, TrainSchedule

STREAM_PRESETS = {
    "desk_a": desk_stream_a,
    "desk_b": desk_stream_b,
    "mnet": lambda size=448, ch=3: mnet_config(size),
    "dnet": lambda size=448, ch=3: dnet_config(size),
}

# key -> (type, default).  "opt_float" accepts "none".
KEYS = {
    "run.seed": ("int", 0),
    "run.out": ("str", "runs/default"),
    "model.mode": ("str", "attention"),
    "model.classes": ("int", 4),
    "model.hidden": ("int", 64),
    "model.layers": ("int", 2),
    "model.init_width": ("int", 64),
    "model.biases": ("bool", True),
    "model.baseline_norm": ("bool", True),
    "model.dtype": ("str", "float64"),
    "attention.support": ("str", "causal_prefix"),
    "attention.lambda": ("float", 1.0),
    "attention.tau": ("opt_float", None),
    "attention.normalize": ("str", "off"),
    "decay.gamma": ("float", 1e-5),
    "dropout.rate": ("float", 0.5),
    "train.phase1_epochs": ("int", 10),
    "train.phase2_epochs": ("int", 50),
    "train.lr": ("float", 0.001),
    "train.head_lr": ("opt_float", None),
    "train.momentum": ("float", 0.9),
    "train.batch_size": ("int", 32),
    "train.augment_flip": ("bool", False),
    "train.augment_shift": ("bool", False),
    "train.val_fraction": ("float", 0.2),
    "train.patience": ("int", 20),
    "train.clip_norm": ("float", 0.0),
    "svm.c": ("float", 1.0),
    "svm.epochs": ("int", 100),
    "svm.lr": ("float", 0.01),
    "data.source": ("str", "synthetic"),
    "data.root": ("str", ""),
    "data.synthetic.image_size": ("int", 64),
    "data.synthetic.classes": ("int", 4),
    "data.synthetic.patch_size": ("int", 12),
    "data.synthetic.contrast": ("float", 1.0),
    "data.synthetic.layout": ("str", "single"),
    "data.synthetic.part_gap": ("int", 24),
    "data.synthetic.placement": ("str", "random"),
    "data.synthetic.clutter": ("float", 0.0),
    "data.synthetic.decoys": ("int", 0),
    "data.synthetic.noise": ("float", 0.0),
    "data.synthetic.n_train": ("int", 64),
    "data.synthetic.n_test": ("int", 64),
    "data.synthetic.seed": ("int", 0),
    "data.synthetic.template_cells": ("int", 4),
    "ablate.seeds": ("int", 5),
    "ablate.control": ("bool", True),
    "ablate.control_seeds": ("int", 1),
    "baseline.lr": ("opt_float", None),
    "baseline.head_lr": ("opt_float", None),
}
for _s in ("stream_a", "stream_b"):
    KEYS[f"{_s}.preset"] = ("str", "desk_a" if _s == "stream_a" else "desk_b")
    KEYS[f"{_s}.layers"] = ("str", "")
    KEYS[f"{_s}.input_size"] = ("int", 64)
    KEYS[f"{_s}.input_channels"] = ("int", 1)
    KEYS[f"{_s}.out_size"] = ("opt_int", None)
    KEYS[f"{_s}.channels"] = ("opt_int", None)

# excluded from the config hash: where results go does not change them
UNHASHED = ("run.out",)

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _coerce(key, raw):
    kind = KEYS[key][0]
    text = raw.strip()
    try:
        if kind.startswith("opt_") and text.lower() == "none":
            return None
        if kind in ("int", "opt_int"):
            return int(text)
        if kind in ("float", "opt_float"):
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.replace('opt_', '')} ({exc})", key=key) from None
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def parse_text(text, source="<config>"):
    """Parse config text into ``{key: raw string}``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}", key=key)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice", key=key)
        values[key] = raw
    return values


@dataclass
class ExperimentConfig:
    settings: dict

    # construction ------------------------------------------------------------
    @classmethod
    def from_text(cls, text, source="<config>", overrides=None):
        raw = parse_text(text, source)
        for key, value in (overrides or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}", key=key)
            raw[key] = str(value)
        settings = {key: default for key, (_, default) in KEYS.items()}
        for key, value in raw.items():
            settings[key] = _coerce(key, value)
        return cls(settings).validate()

    @classmethod
    def load(cls, path, overrides=None):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path), overrides)

    @classmethod
    def default(cls, overrides=None):
        return cls.from_text("", overrides=overrides)

    def __getitem__(self, key):
        return self.settings[key]

    def with_overrides(self, overrides):
        """New config with ``{"dotted.key": value}`` overrides applied."""
        settings = dict(self.settings)
        for key, value in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}", key=key)
            settings[key] = value
        return ExperimentConfig(settings).validate()

    # typed views -------------------------------------------------------------
    def stream(self, which):
        s = self.settings
        preset = s[f"{which}.preset"]
        size, ch = s[f"{which}.input_size"], s[f"{which}.input_channels"]
        if preset == "custom":
            if not s[f"{which}.layers"]:
                raise ConfigError(f"{which}.layers is required for a custom stream", key=f"{which}.layers")
            base = StreamConfig(parse_layers(s[f"{which}.layers"]), size, ch, 0, 0, name=which)
        elif preset in STREAM_PRESETS:
            base = STREAM_PRESETS[preset](size, ch)
            base.name = which
            if s[f"{which}.layers"]:
                base.layers = parse_layers(s[f"{which}.layers"])
        else:
            raise ConfigError(f"{which}.preset must be one of {sorted(STREAM_PRESETS) + ['custom']}",
                              key=f"{which}.preset")
        if s[f"{which}.out_size"] is not None:
            base.out_size = s[f"{which}.out_size"]
        if s[f"{which}.channels"] is not None:
            base.channels = s[f"{which}.channels"]
        if preset == "custom" or s[f"{which}.layers"]:
            # undeclared output shape: take whatever the chain computes
            _, (h, _, c) = base.shape_chain()[-1]
            if s[f"{which}.out_size"] is None:
                base.out_size = h
            if s[f"{which}.channels"] is None:
                base.channels = c
        return base

    def model(self):
        s = self.settings
        return ModelConfig(
            stream_a=self.stream("stream_a"), stream_b=self.stream("stream_b"),
            mode=s["model.mode"], num_classes=s["model.classes"], hidden=s["model.hidden"],
            layers=s["model.layers"], init_width=s["model.init_width"],
            support=parse_support(s["attention.support"]), attention_norm=s["attention.normalize"],
            baseline_norm=s["model.baseline_norm"], biases=s["model.biases"],
            dropout=s["dropout.rate"], dtype=s["model.dtype"])

    def loss(self):
        s = self.settings
        return LossConfig(lam=s["attention.lambda"], gamma=s["decay.gamma"], tau=s["attention.tau"])

    def schedule(self):
        s = self.settings
        return TrainSchedule(
            phase1_epochs=s["train.phase1_epochs"], phase2_epochs=s["train.phase2_epochs"],
            lr=s["train.lr"], head_lr=s["train.head_lr"], momentum=s["train.momentum"],
            batch_size=s["train.batch_size"], seed=s["run.seed"],
            augment_flip=s["train.augment_flip"], augment_shift=s["train.augment_shift"],
            val_fraction=s["train.val_fraction"], patience=s["train.patience"],
            clip_norm=s["train.clip_norm"])

    def svm(self):
        s = self.settings
        return SvmConfig(c_reg=s["svm.c"], epochs=s["svm.epochs"], lr=s["svm.lr"])

    def synthetic(self):
        s = self.settings
        p = "data.synthetic."
        return SyntheticSpec(
            image_size=s[p + "image_size"], num_classes=s[p + "classes"], patch_size=s[p + "patch_size"],
            contrast=s[p + "contrast"], layout=s[p + "layout"], part_gap=s[p + "part_gap"],
            placement=s[p + "placement"], clutter_density=s[p + "clutter"], decoys=s[p + "decoys"],
            noise=s[p + "noise"], n_train=s[p + "n_train"], n_test=s[p + "n_test"], seed=s[p + "seed"],
            template_cells=s[p + "template_cells"])

    # validation and identity ---------------------------------------------------
    def validate(self):
        s = self.settings
        model = self.model().validate()
        loss = self.loss().validate()
        self.schedule().validate()
        if s["svm.c"] <= 0:
            raise ConfigError("svm.c must be > 0", key="svm.c")
        if s["svm.epochs"] < 1 or s["svm.lr"] <= 0:
            raise ConfigError("svm.epochs must be >= 1 and svm.lr > 0", key="svm.epochs")
        if s["ablate.seeds"] < 1 or s["ablate.control_seeds"] < 0:
            raise ConfigError("ablate.seeds must be >= 1", key="ablate.seeds")
        if s["data.source"] not in ("synthetic", "directory"):
            raise ConfigError("data.source must be synthetic or directory", key="data.source")
        if s["data.source"] == "directory" and not s["data.root"]:
            raise ConfigError("data.root is required when data.source = directory", key="data.root")
        if s["data.source"] == "synthetic":
            spec = self.synthetic().validate()
            if spec.num_classes != model.num_classes:
                raise ConfigError(f"data.synthetic.classes ({spec.num_classes}) != model.classes "
                                  f"({model.num_classes})", key="model.classes")
            if (spec.image_size, 1) != model.input_shape[1:]:
                raise ConfigError(f"stream input {model.input_shape} does not match synthetic "
                                  f"{spec.image_size}x{spec.image_size}x1 images", key="stream_a.input_size")
        if s["attention.tau"] is not None:
            loss.validate(model.grid, model.bilinear_dim)  # warns below the K^2/D bound
        return self

    def canonical_text(self, hashed_only=False):
        lines = []
        for key in sorted(self.settings):
            if hashed_only and key in UNHASHED:
                continue
            lines.append(f"{key} = {_format(self.settings[key])}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.canonical_text(hashed_only=True).encode()).hexdigest()


def describe_keys():
    """Human-readable key listing (used by the docs and ``--help``)."""
    return "\n".join(f"{k} ({t.replace('opt_', 'optional ')}, default {_format(d)})"
                     for k, (t, d) in sorted(KEYS.items()))

