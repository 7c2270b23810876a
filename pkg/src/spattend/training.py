"""Two-phase training, evaluation and per-epoch checkpointing.

Phase 1 fits only the classifier head (every other parameter frozen);
phase 2 fine-tunes everything with SGD + momentum, early-stopping on a
stratified validation split.  Afterwards one-vs-all linear SVMs are fitted on
the extracted features of the full training set (train + validation).
"""

import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import augment_dataset, stratified_split
from .errors import DataError, DivergenceError
from .objective import LossConfig, aggregate_attention, loss, onehot, svm_train

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "train_loss", "nll", "penalty", "decay", "train_acc", "val_acc", "wall_ms")


@dataclass
class TrainSchedule:
    phase1_epochs: int = 10
    phase2_epochs: int = 50
    lr: float = 0.001
    head_lr: float = None          # phase-1 step size; None -> lr
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    augment_flip: bool = False
    augment_shift: bool = False
    val_fraction: float = 0.2
    patience: int = 20
    clip_norm: float = 0.0         # global gradient-norm clip, 0 disables

    def validate(self):
        from .errors import ConfigError
        if not self.lr >= 0:
            raise ConfigError("train.lr must be >= 0", key="train.lr")
        if self.head_lr is not None and not self.head_lr >= 0:
            raise ConfigError("train.head_lr must be >= 0", key="train.head_lr")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("phase epochs must be >= 0", key="train.phase1_epochs")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1", key="train.batch_size")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum must be in [0, 1)", key="train.momentum")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must be in [0, 1)", key="train.val_fraction")
        return self


@dataclass
class SvmConfig:
    c_reg: float = 1.0
    epochs: int = 100
    lr: float = 0.01


class Sgd:
    """SGD with heavy-ball momentum: ``v = mu*v + g; theta -= lr*v``."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, lr):
        for name, t in params:
            if t.grad is None:
                continue
            v = self.velocity.get(name)
            v = t.grad.copy() if v is None else self.momentum * v + t.grad
            self.velocity[name] = v
            t.data = t.data - lr * v


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    train_loss: float
    nll: float
    penalty: float
    decay: float
    train_acc: float
    val_acc: float
    wall_ms: float

    def tsv(self):
        vals = [str(self.epoch), str(self.phase)]
        vals += [f"{getattr(self, k):.6f}" for k in LOG_FIELDS[2:8]]
        vals.append(f"{self.wall_ms:.0f}")
        return "\t".join(vals)


@dataclass
class Metrics:
    accuracy: float
    svm_accuracy: float
    mean_loss: float
    per_class: list
    n: int
    predictions: np.ndarray = None
    svm_predictions: np.ndarray = None
    masses: np.ndarray = None      # (N, K*K) aggregated attention, attention models only
    features: np.ndarray = None

    def summary(self):
        return {"accuracy": self.accuracy, "svm_accuracy": self.svm_accuracy,
                "mean_loss": self.mean_loss, "per_class": list(self.per_class), "n": self.n}


@dataclass
class TrainResult:
    model: object
    log: list
    metrics: Metrics
    svm: object = None
    best_epoch: int = 0
    stopped_early: bool = False


def _first_bad_parameter(store):
    for name, t in store.items():
        if not np.all(np.isfinite(t.data)):
            return name
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return name
    return None


def _clip(params, max_norm):
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in params if t.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / total
        for _, t in params:
            if t.grad is not None:
                t.grad *= scale


def model_arrays(model, svm=None):
    arrays = OrderedDict(model.store.state())
    if svm is not None:
        arrays["svm.W"] = svm.weights
        arrays["svm.b"] = svm.bias
    return arrays


def save_checkpoint(path, model, config_hash, svm=None):
    ckpt.save(path, model_arrays(model, svm), config_hash)


def load_checkpoint(path, model):
    """Load parameters into ``model``; returns ``(svm_or_None, config_hash)``."""
    from .objective import LinearSvm
    arrays, digest, _ = ckpt.load(path)
    svm = None
    if "svm.W" in arrays:
        svm = LinearSvm(arrays.pop("svm.W"), arrays.pop("svm.b"))
    model.store.load_state(arrays)
    return svm, digest


def extract_features(model, images, batch_size=64):
    feats = []
    for lo in range(0, len(images), batch_size):
        feats.append(model.forward(images[lo:lo + batch_size]).features.data)
    return np.concatenate(feats).astype(np.float64)


def evaluate(model, data, svm=None, loss_cfg=None, batch_size=64):
    """Top-1 accuracy (softmax and SVM head), mean loss and per-class accuracy.

    Dropout is off; parameters are never touched.  The mean loss is the
    per-sample NLL plus the attention penalty term (no weight decay).
    """
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    loss_cfg = loss_cfg or LossConfig()
    C = model.config.num_classes
    preds, feats, masses, losses = [], [], [], []
    for lo in range(0, len(data), batch_size):
        x = data.images[lo:lo + batch_size]
        y = data.labels[lo:lo + batch_size]
        out = model.forward(x)
        terms = loss(out.probs, onehot(y, C), out.maps, None, loss_cfg, grid=model.grid)
        losses.append(float(terms.total.data) * len(y))
        preds.append(np.argmax(out.logits.data, axis=1))
        feats.append(out.features.data.astype(np.float64))
        if out.maps is not None:
            masses.append(aggregate_attention(out.maps).data)
    preds = np.concatenate(preds)
    feats = np.concatenate(feats)
    labels = data.labels
    per_class = [float(np.mean(preds[labels == c] == c)) if np.any(labels == c) else float("nan")
                 for c in range(C)]
    svm_preds = svm.predict(feats) if svm is not None else None
    return Metrics(
        accuracy=float(np.mean(preds == labels)),
        svm_accuracy=float(np.mean(svm_preds == labels)) if svm is not None else float("nan"),
        mean_loss=float(np.sum(losses) / len(data)),
        per_class=per_class,
        n=len(data),
        predictions=preds,
        svm_predictions=svm_preds,
        masses=np.concatenate(masses) if masses else None,
        features=feats,
    )


def train(model, data, schedule=None, loss_cfg=None, svm_cfg=None, out_dir=None, config_hash=None,
          log_stream=None):
    """Train ``model`` in place on ``data``; deterministic in ``schedule.seed``.

    With ``out_dir`` a checkpoint is rewritten after every epoch and the TSV
    log is appended line by line.
    """
    schedule = (schedule or TrainSchedule()).validate()
    loss_cfg = (loss_cfg or LossConfig()).validate()
    svm_cfg = svm_cfg or SvmConfig()
    if len(data) == 0:
        raise DataError("empty training set")
    config_hash = config_hash or "0" * 64
    store = model.store
    C = model.config.num_classes
    seeds = np.random.SeedSequence(schedule.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    counts = np.bincount(data.labels, minlength=C)
    if schedule.val_fraction > 0 and np.all(counts >= 2):
        keep, held = stratified_split(data.labels, schedule.val_fraction, seeds[0])
        fit_data, val_data = data.subset(keep), data.subset(held)
    else:
        fit_data, val_data = data, None
    if schedule.augment_flip or schedule.augment_shift:
        fit_data = augment_dataset(fit_data, flip=schedule.augment_flip, shift=schedule.augment_shift)

    ckpt_path = os.path.join(out_dir, "checkpoint.bin") if out_dir else None
    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train_log.tsv"), "w")
        log_file.write("\t".join(LOG_FIELDS) + "\n")

    head = set(model.head_names)
    all_params = list(store.items())
    opt = Sgd(schedule.momentum)
    records = []
    best = (-1.0, None, 0)
    stale = 0
    stopped_early = False
    epoch = 0
    phases = [(1, schedule.phase1_epochs), (2, schedule.phase2_epochs)]
    try:
        for phase, n_epochs in phases:
            for name, t in all_params:
                t.requires_grad = phase == 2 or name in head
            active = [(n, t) for n, t in all_params if t.requires_grad]
            lr = schedule.lr if phase == 2 or schedule.head_lr is None else schedule.head_lr
            for _ in range(n_epochs):
                epoch += 1
                t0 = time.perf_counter()
                order = shuffle_rng.permutation(len(fit_data))
                sums = np.zeros(4)
                correct = 0
                for lo in range(0, len(order), schedule.batch_size):
                    idx = order[lo:lo + schedule.batch_size]
                    x, y = fit_data.images[idx], fit_data.labels[idx]
                    store.zero_grad()
                    with T.Tape() as tape:
                        out = model.forward(x, training=True, rng=dropout_rng)
                        terms = loss(out.probs, onehot(y, C), out.maps, store, loss_cfg, grid=model.grid)
                    total = float(terms.total.data)
                    if not math.isfinite(total):
                        tape.backward(terms.total)
                        bad = _first_bad_parameter(store) or "loss"
                        raise DivergenceError(f"non-finite loss at epoch {epoch}; first offending: {bad}", bad)
                    tape.backward(terms.total)
                    if schedule.clip_norm > 0:
                        _clip(active, schedule.clip_norm)
                    opt.step(active, lr)
                    bad = _first_bad_parameter(store)
                    if bad is not None:
                        raise DivergenceError(f"non-finite parameter after epoch {epoch} update: {bad}", bad)
                    w = len(idx)
                    sums += w * np.array([total, terms.nll, terms.penalty, terms.decay])
                    correct += int(np.sum(np.argmax(out.logits.data, axis=1) == y))
                sums /= len(order)
                val_acc = evaluate(model, val_data, loss_cfg=loss_cfg).accuracy if val_data is not None else float("nan")
                rec = EpochRecord(epoch, phase, *sums, correct / len(order), val_acc,
                                  (time.perf_counter() - t0) * 1000.0)
                records.append(rec)
                log.info("epoch %d phase %d loss %.4f acc %.3f val %.3f", epoch, phase,
                         rec.train_loss, rec.train_acc, val_acc)
                if log_file:
                    log_file.write(rec.tsv() + "\n")
                    log_file.flush()
                if log_stream is not None:
                    log_stream(rec)
                if ckpt_path:
                    save_checkpoint(ckpt_path, model, config_hash)
                if phase == 2 and val_data is not None:
                    if val_acc > best[0]:
                        best = (val_acc, store.state(), epoch)
                        stale = 0
                    else:
                        stale += 1
                        if stale >= schedule.patience:
                            stopped_early = True
                            break
    finally:
        for _, t in all_params:
            t.requires_grad = True
        if log_file:
            log_file.close()

    if best[1] is not None:
        store.load_state(best[1])
    best_epoch = best[2] if best[1] is not None else epoch

    feats = extract_features(model, data.images)
    svm = svm_train(feats, data.labels, svm_cfg.c_reg, svm_cfg.epochs, svm_cfg.lr, schedule.seed, C) \
        if np.all(np.bincount(data.labels, minlength=C) > 0) else None
    metrics = evaluate(model, data, svm, loss_cfg)
    if ckpt_path:
        save_checkpoint(ckpt_path, model, config_hash, svm)
    return TrainResult(model, records, metrics, svm, best_epoch, stopped_early)
