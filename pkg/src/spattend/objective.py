"""Classifier head, penalized training loss and one-vs-all linear SVMs."""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError

LOG_EPS = 1e-12


@dataclass
class LossConfig:
    lam: float = 1.0      # attention penalty coefficient
    gamma: float = 1e-5   # weight decay coefficient
    tau: float = None     # target aggregated mass per cell; None -> 1/K^2

    def validate(self, grid=None, bilinear_dim=None):
        if not self.lam >= 0:
            raise ConfigError(f"attention.lambda must be >= 0, got {self.lam}", key="attention.lambda")
        if not self.gamma >= 0:
            raise ConfigError(f"decay.gamma must be >= 0, got {self.gamma}", key="decay.gamma")
        if self.tau is not None and not self.tau >= 0:
            raise ConfigError(f"attention.tau must be >= 0, got {self.tau}", key="attention.tau")
        if grid and bilinear_dim:
            bound = grid * grid / bilinear_dim
            if self.resolved_tau(grid) < bound:
                warnings.warn(f"attention.tau={self.resolved_tau(grid)} is below K^2/D = {bound}", stacklevel=2)
        return self

    def resolved_tau(self, grid):
        return 1.0 / (grid * grid) if self.tau is None else self.tau


def class_logits(x, weights):
    """``x . w_c`` for every class; ``weights`` is ``(F, C)`` with column ``c`` = ``w_c``."""
    x, weights = T.as_tensor(x), T.as_tensor(weights)
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"feature dim {x.shape[-1]} != classifier input dim {weights.shape[0]}")
    return T.matmul(x, weights)


def class_probabilities(x, weights):
    return T.softmax(class_logits(x, weights), axis=-1)


def aggregate_attention(maps):
    """Mean over sweep steps of the per-step maps: ``(N, S, K*K) -> (N, K*K)``.

    Each step's map is zero outside its support, so the result sums to 1.
    ``maps`` may also be a list of ``(N, K*K)`` tensors.
    """
    if isinstance(maps, (list, tuple)):
        maps = T.stack(maps, axis=1)
    return T.mean(maps, axis=1)


def attention_penalty(mass, tau):
    """``sum_{u,v} (tau - M[u,v])^2`` per sample."""
    mass = T.as_tensor(mass)
    return T.sum_(T.square(T.sub(mass, tau)), axis=-1)


def nll(probs, onehot, eps=LOG_EPS):
    """Cross-entropy ``-sum_i y_i log p_i`` per sample, with ``p`` clamped at ``eps``."""
    logp = T.log(T.clamp_min(probs, eps))
    return T.scale(T.sum_(T.mul(logp, onehot), axis=-1), -1.0)


def weight_decay(store):
    terms = [T.sum_(T.square(t)) for t in store.decayed()]
    if not terms:
        return T.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def onehot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class LossTerms:
    total: "T.Tensor"
    nll: float
    penalty: float
    decay: float


def loss(probs, y, maps, store, cfg, grid=None):
    """Batch-mean penalized cross-entropy.

    ``total = mean_n[NLL] + lam * mean_n[penalty] + gamma * sum(Theta^2)``.
    ``maps`` may be ``None`` (no attention, e.g. the sum-pooled baseline).
    ``y`` is a one-hot ``(N, C)`` array.
    """
    probs = T.as_tensor(probs)
    y = np.asarray(y, dtype=probs.dtype)
    data_term = T.mean(nll(probs, y))
    total = data_term
    pen_value = 0.0
    if maps is not None and cfg.lam > 0:
        mass = aggregate_attention(maps)
        K = grid or int(round(np.sqrt(mass.shape[-1])))
        pen = T.mean(attention_penalty(mass, cfg.resolved_tau(K)))
        pen_value = float(pen.data)
        total = T.add(total, T.scale(pen, cfg.lam))
    decay_value = 0.0
    if store is not None and cfg.gamma > 0:
        dec = weight_decay(store)
        decay_value = float(dec.data)
        total = T.add(total, T.scale(dec, cfg.gamma))
    return LossTerms(total, float(data_term.data), pen_value, decay_value)


# one-vs-all linear SVMs -----------------------------------------------------

@dataclass
class LinearSvm:
    weights: np.ndarray   # (F, C)
    bias: np.ndarray      # (C,)

    def scores(self, features):
        return np.asarray(features) @ self.weights + self.bias

    def predict(self, features):
        return np.argmax(self.scores(features), axis=1)


def svm_train(features, labels, c_reg=1.0, epochs=100, lr=0.01, seed=0, num_classes=None):
    """One hinge-loss linear classifier per class, full-batch subgradient descent.

    Each binary problem minimizes ``0.5*|w|^2 + c_reg * mean_n max(0, 1 - y_n (w.x_n + b))``
    with step ``lr / t`` at epoch ``t``.  Full-batch steps make the result
    independent of sample order and of duplicating every sample.  Every
    run starts from zero weights, so ``seed`` is accepted for interface
    symmetry with the other trainers but cannot change the result.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.size:
        raise DimensionError(f"features {X.shape} do not match {labels.size} labels")
    C = int(num_classes if num_classes is not None else labels.max() + 1)
    if C < 2:
        raise DataError("need at least two classes")
    missing = [c for c in range(C) if not np.any(labels == c)]
    if missing:
        raise DataError(f"classes absent from training data: {missing}")
    n, f = X.shape
    W = np.zeros((f, C))
    b = np.zeros(C)
    for c in range(C):
        y = np.where(labels == c, 1.0, -1.0)
        w = W[:, c]
        bc = 0.0
        for t in range(1, epochs + 1):
            margin = y * (X @ w + bc)
            active = margin < 1.0
            gw = w - c_reg * (y[active] @ X[active]) / n
            gb = -c_reg * y[active].sum() / n
            eta = lr / t
            w = w - eta * gw
            bc = bc - eta * gb
        W[:, c] = w
        b[c] = bc
    return LinearSvm(W, b)
