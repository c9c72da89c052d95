"""Loss, class balancing, SGD and the epoch loop."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.preprocessing import StandardScaler

from .batching import iter_batches
from .model import save_checkpoint, tree_backward, tree_forward

log = logging.getLogger(__name__)

EPS = 1e-12


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class ClassWeights:
    w_pos: np.ndarray
    w_neg: np.ndarray
    n_pos: np.ndarray
    n_neg: np.ndarray


def class_weights(targets):
    """Balance weights from an ``(n_nodes, n_classes)`` 0/1 target matrix.

    ``w_pos = N_neg / (N_neg + N_pos)`` and ``w_neg = N_pos / (N_neg + N_pos)``;
    a class that never occurs gets ``w_pos = 1, w_neg = 0``.
    """
    targets = np.asarray(targets)
    if targets.ndim != 2 or targets.shape[0] == 0:
        raise ValueError("class_weights needs a non-empty (n, classes) target matrix")
    n_pos = targets.sum(axis=0).astype(np.float64)
    n_neg = targets.shape[0] - n_pos
    return weights_from_counts(n_pos, n_neg)


def weights_from_counts(n_pos, n_neg):
    n_pos = np.asarray(n_pos, dtype=np.float64)
    n_neg = np.asarray(n_neg, dtype=np.float64)
    total = n_pos + n_neg
    w_pos = np.where(n_pos > 0, n_neg / np.where(total > 0, total, 1.0), 1.0)
    return ClassWeights(w_pos, 1.0 - w_pos, n_pos, n_neg)


def weighted_bce(probs, targets, weights, m=None):
    """Class-balanced multi-label binary cross-entropy.

    ``L = sum_u -(1/m) sum_i [w_pos[u] t log o + w_neg[u] (1 - t) log(1 - o)]``
    with ``o`` clamped to ``[EPS, 1 - EPS]``. ``m`` defaults to the number of
    rows. Returns ``(loss, dL/dprobs)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if probs.shape != t.shape:
        raise ValueError("probs {} and targets {} differ in shape".format(probs.shape, t.shape))
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be 0 or 1")
    m = probs.shape[0] if m is None else m
    o = np.clip(probs, EPS, 1.0 - EPS)
    wp, wn = weights.w_pos, weights.w_neg
    loss = -(wp * t * np.log(o) + wn * (1.0 - t) * np.log1p(-o)).sum() / m
    grad = -(wp * t / o - wn * (1.0 - t) / (1.0 - o)) / m
    return float(loss), grad


def sgd_step(params, grads, lr, clip_threshold=None):
    """Return ``params - lr * g`` with ``g`` rescaled to at most
    ``clip_threshold`` in global L2 norm."""
    g = grads.flat
    if g.shape != params.flat.shape:
        raise ValueError("gradient shape {} != parameter shape {}".format(g.shape, params.flat.shape))
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("non-finite gradient at step {}".format(params.step))
    norm = float(np.sqrt(g @ g))
    if clip_threshold is not None and norm > clip_threshold:
        g = g * (clip_threshold / norm)
    new = params.with_flat(params.flat - lr * g)
    new.step = params.step + 1
    return new


def feature_standardize(train_embeddings, *others):
    """Per-dimension ``(x - mean) / std`` fitted on the training rows; constant
    dimensions map to 0. Returns the fitted scaler and transformed arrays."""
    scaler = StandardScaler().fit(np.asarray(train_embeddings, dtype=np.float64))
    return scaler, [scaler.transform(np.asarray(x, dtype=np.float64))
                    for x in (train_embeddings,) + others]


@dataclass
class TrainConfig:
    lr_initial: float = 0.2
    lr_reduced: float = 0.02
    plateau_patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 60
    batch_size: int = 32
    dropout_rate: float = 0.5
    seed: int = 0
    clip_threshold: float = 5.0

    def __post_init__(self):
        if not self.lr_initial > self.lr_reduced >= 0:
            # lr 0 is allowed so frozen-parameter runs can be expressed
            if not (self.lr_initial == self.lr_reduced == 0):
                raise ValueError("need lr_initial > lr_reduced >= 0")
        if self.max_epochs < 0 or self.batch_size < 1 or self.plateau_patience < 1:
            raise ValueError("invalid epoch / batch / patience settings")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float

    def line(self):
        return "{}\t{!r}\t{!r}\t{!r}\t{:.3f}".format(
            self.epoch, self.train_loss, self.val_loss, self.lr, self.wall_seconds)


@dataclass
class TrainResult:
    params: object
    log: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_val_loss: float = float("nan")
    diverged: bool = False
    stop_reason: str = ""


def dataset_loss(params, trees, weights, batch_size=256):
    """Eval-mode loss over a whole split, with ``m`` = all of its nodes."""
    m = sum(t.size for t in trees)
    total = 0.0
    for batch in iter_batches(trees, batch_size):
        probs, _ = tree_forward(params, batch)
        loss, _ = weighted_bce(probs, batch.targets, weights, m=m)
        total += loss
    return total


def train_epoch(params, trees, weights, lr, config, shuffle_rng, dropout_rng):
    losses, nodes = 0.0, 0
    for batch in iter_batches(trees, config.batch_size, shuffle_rng):
        probs, cache = tree_forward(params, batch, train=True, rng=dropout_rng,
                                    rate=config.dropout_rate)
        loss, dprobs = weighted_bce(probs, batch.targets, weights)
        if not np.isfinite(loss):
            raise NonFiniteGradient("non-finite training loss")
        grads = tree_backward(params, cache, dprobs)
        params = sgd_step(params, grads, lr, config.clip_threshold)
        losses += loss * batch.n_nodes
        nodes += batch.n_nodes
    return params, losses / max(nodes, 1)


def train(params, train_trees, val_trees, weights, config, checkpoint_path=None,
          log_path=None, on_epoch=None):
    """SGD with a two-stage learning rate.

    Runs at ``lr_initial`` until validation loss fails to improve by a relative
    ``min_delta`` for ``plateau_patience`` epochs, then at ``lr_reduced`` until
    a second plateau or ``max_epochs``. Returns the best-validation weights.
    """
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    best = params.copy()
    best_val = dataset_loss(params, val_trees, weights)
    result = TrainResult(best, initial_val_loss=best_val, best_val_loss=best_val)
    if log_path is not None:
        open(log_path, "w", encoding="utf-8").close()
    if not np.isfinite(best_val):
        result.diverged = True
        result.stop_reason = "non-finite initial validation loss"
        return result
    lr = config.lr_initial
    stale = 0
    result.stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        try:
            params, train_loss = train_epoch(params, train_trees, weights, lr, config,
                                             shuffle_rng, dropout_rng)
            val = dataset_loss(params, val_trees, weights)
        except (NonFiniteGradient, FloatingPointError) as exc:
            log.warning("training diverged at epoch %d: %s", epoch, exc)
            result.diverged = True
            result.stop_reason = str(exc)
            break
        rec = EpochRecord(epoch, train_loss, val, lr, time.perf_counter() - t0)
        result.log.append(rec)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.line() + "\n")
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d train %.5f val %.5f lr %g", epoch, train_loss, val, lr)
        if not np.isfinite(val) or not params.all_finite():
            result.diverged = True
            result.stop_reason = "non-finite validation loss"
            break
        if val < best_val - config.min_delta * abs(best_val):
            best_val = val
            best = params.copy()
            stale = 0
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best)
        else:
            stale += 1
        if stale >= config.plateau_patience:
            if lr == config.lr_initial and config.lr_reduced != config.lr_initial:
                lr = config.lr_reduced
                stale = 0
            else:
                result.stop_reason = "second plateau"
                break
    result.params = best
    result.best_val_loss = best_val
    return result
