"""Training procedure: batched epochs, AdamW, plateau LR decay, early stop.

The loop is fully deterministic: shuffling, dropout, and any augmentation
draw from child streams keyed by (seed, purpose, epoch, sample id), so a
given (config, seed, data) triple fixes the whole history bit for bit and
worker parallelism cannot change results. Inputs here are precomputed
feature sequences, so the audio-domain steps (crop, augment) do not apply;
they run in the waveform pipeline before feature extraction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataio import Sample, class_names_for, fuse_modalities
from .errors import ConfigError, TrainingError
from .model import (
    CheckpointMeta,
    compute_class_weights,
    init_model,
    model_backward,
    model_forward,
    save_checkpoint,
    weighted_cross_entropy,
)
from .numerics import AdamW, Rng, get_dtype


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 5e-5
    lr_decay_factor: float = 0.9
    plateau_epochs: int = 5
    weight_decay: float = 0.01
    dropout: float = 0.1
    aug_probability: float = 0.3
    window_seconds: float = 5.5
    hidden_width: int = 256
    hidden_layers: int = 2
    max_epochs: int = 100
    early_stop_patience: int = 15
    seed: int = 0
    class_weighting: str = "balanced"  # "balanced" or "uniform"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        if self.plateau_epochs < 1:
            raise ConfigError(f"plateau_epochs must be >= 1, got {self.plateau_epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.aug_probability <= 1.0:
            raise ConfigError(f"aug_probability must be in [0, 1], got {self.aug_probability}")
        if self.class_weighting not in ("balanced", "uniform"):
            raise ConfigError(f"class_weighting must be 'balanced' or 'uniform', got {self.class_weighting!r}")


@dataclass
class TrainState:
    """Mutable schedule / early-stop / checkpoint bookkeeping."""

    lr: float
    lr_decay_factor: float = 0.9
    plateau_epochs: int = 5
    epoch: int = 0
    best_val_f1: float = float("-inf")
    best_epoch: int = 0
    plateau_counter: int = 0
    since_improvement: int = 0


def lr_schedule_step(state: TrainState, val_f1: float) -> bool:
    """Apply one epoch's schedule decision; returns True on strict improvement.

    Improvement resets both counters. Every `plateau_epochs` consecutive
    non-improvements the lr is multiplied by the decay factor and the plateau
    counter restarts; the early-stop counter keeps accumulating.
    """
    if val_f1 > state.best_val_f1:
        state.best_val_f1 = val_f1
        state.best_epoch = state.epoch
        state.plateau_counter = 0
        state.since_improvement = 0
        return True
    state.plateau_counter += 1
    state.since_improvement += 1
    if state.plateau_counter >= state.plateau_epochs:
        state.lr *= state.lr_decay_factor
        state.plateau_counter = 0
    return False


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    accuracy: float
    confusion: np.ndarray


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[t, p] += 1
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    """Per-class precision/recall/F1 (0/0 terms are 0), macro F1, accuracy."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise TrainingError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=tp + fp > 0)
    recall = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=tp + fn > 0)
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return Metrics(precision, recall, f1, float(f1.mean()), float(tp.sum() / total), cm)


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1 scores."""
    return metrics_from_confusion(cm).macro_f1


def _predict_one(params: dict[str, np.ndarray], sample: Sample) -> int:
    logits, _ = model_forward(fuse_modalities(sample.speech, sample.text), params)
    return int(np.argmax(logits))


def evaluate(params: dict[str, np.ndarray], samples: list[Sample], workers: int = 1) -> Metrics:
    """Eval-mode metrics: no dropout, full sequences, argmax ties to lower index."""
    if not samples:
        raise TrainingError("cannot evaluate an empty dataset")
    n_classes = params["out.b"].shape[0]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(lambda s: _predict_one(params, s), samples))
    else:
        preds = [_predict_one(params, s) for s in samples]
    cm = confusion_matrix([s.label for s in samples], preds, n_classes)
    return metrics_from_confusion(cm)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_macro_f1: float
    lr: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[HistoryRow]
    state: TrainState
    best_val_f1: float
    best_epoch: int


def _sample_losses_and_grads(params, sample, weights, cfg, root, epoch):
    """Forward + backward for one sample; dlogits unscaled (batch scales later)."""
    h = fuse_modalities(sample.speech, sample.text)
    rng = root.child("dropout", epoch, sample.id)
    logits, cache = model_forward(h, params, cfg.dropout, "train", rng)
    loss, dlogits = weighted_cross_entropy(logits, sample.label, weights)
    _, grads = model_backward(params, cache, dlogits)
    return loss, float(weights[sample.label]), grads


def train(
    train_set: list[Sample],
    val_set: list[Sample],
    config: TrainConfig,
    class_names: list[str] | None = None,
    checkpoint_path=None,
    config_hash: str = "",
    workers: int = 1,
) -> TrainResult:
    """Run the full procedure and return the best parameters plus history.

    Per epoch: seeded shuffle, per-sample forward/backward with weighted CE
    (batch loss = sum loss_i / sum w_i), one AdamW step per batch, then a
    validation pass. Strict macro-F1 improvement checkpoints the model; the
    plateau schedule decays lr; early stopping fires after
    `early_stop_patience` epochs without improvement.
    """
    if not train_set or not val_set:
        raise TrainingError("train and validation splits must both be nonempty")
    labels = [s.label for s in train_set]
    if class_names is None:
        class_names = class_names_for(max(labels + [s.label for s in val_set]) + 1)
    n_classes = len(class_names)
    counts = np.bincount(labels, minlength=n_classes)
    for k in range(n_classes):
        if counts[k] == 0:
            raise TrainingError(f"class {class_names[k]!r} absent from the training split")

    if config.class_weighting == "balanced":
        weights = compute_class_weights(counts)
    else:
        weights = np.ones(n_classes, dtype=get_dtype())

    root = Rng(config.seed)
    embed_dim = fuse_modalities(train_set[0].speech, train_set[0].text).shape[1]
    params = init_model(embed_dim, config.hidden_width, config.hidden_layers, n_classes, root.child("init"))
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    state = TrainState(
        lr=config.lr, lr_decay_factor=config.lr_decay_factor, plateau_epochs=config.plateau_epochs
    )

    best_params = {k: v.copy() for k, v in params.items()}
    history: list[HistoryRow] = []
    n = len(train_set)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    try:
        for epoch in range(1, config.max_epochs + 1):
            state.epoch = epoch
            lr_this_epoch = state.lr
            optimizer.lr = state.lr
            order = root.child("shuffle", epoch).permutation(n)
            epoch_loss_sum = 0.0
            epoch_weight_sum = 0.0

            for start in range(0, n, config.batch_size):
                batch = [train_set[i] for i in order[start : start + config.batch_size]]
                work = lambda s: _sample_losses_and_grads(params, s, weights, config, root, epoch)
                results = list(pool.map(work, batch)) if pool else [work(s) for s in batch]
                batch_weight = sum(r[1] for r in results)
                batch_loss = sum(r[0] for r in results) / batch_weight
                if not np.isfinite(batch_loss):
                    raise TrainingError(
                        f"non-finite loss {batch_loss} at epoch {epoch}, batch starting at {start}"
                    )
                scale = np.asarray(1.0 / batch_weight, dtype=get_dtype())
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                for _, _, g in results:  # fixed index order keeps float sums deterministic
                    for k in grads:
                        grads[k] += g[k]
                for k in grads:
                    grads[k] *= scale
                optimizer.step(params, grads)
                epoch_loss_sum += sum(r[0] for r in results)
                epoch_weight_sum += batch_weight

            val_f1 = evaluate(params, val_set, workers).macro_f1
            improved = lr_schedule_step(state, val_f1)
            if improved:
                best_params = {k: v.copy() for k, v in params.items()}
                if checkpoint_path is not None:
                    save_checkpoint(
                        checkpoint_path, best_params, CheckpointMeta(config_hash, state.best_val_f1, epoch)
                    )
            history.append(HistoryRow(epoch, epoch_loss_sum / epoch_weight_sum, val_f1, lr_this_epoch))
            if state.since_improvement >= config.early_stop_patience:
                break
    finally:
        if pool:
            pool.shutdown()

    return TrainResult(best_params, history, state, state.best_val_f1, state.best_epoch)
