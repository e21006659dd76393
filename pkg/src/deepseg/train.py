"""Weighted cross-entropy, Adam, cross-validation splits and the training loop."""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from deepseg.augment import AugmentSpec, augment_sample
from deepseg.metrics import dice
from deepseg.nn.layers import RunContext
from deepseg.nn.model import ModelGraph
from deepseg.tensor_core import RngStream

LOG_CLAMP = 1e-12
# fraction of cases held out for validation: 66 of 336
VAL_NUMERATOR, VAL_DENOMINATOR = 66, 336

# child-stream keys under the master seed
_SHUFFLE_KEY, _AUGMENT_KEY, _DROPOUT_KEY = 11, 12, 13


class TrainError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient; ``batch_index`` locates the offending batch."""

    def __init__(self, message: str, batch_index: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


@dataclass(frozen=True)
class LossSpec:
    class_weights: tuple[float, ...] = (0.05, 0.95)

    def __post_init__(self):
        w = tuple(float(x) for x in self.class_weights)
        object.__setattr__(self, "class_weights", w)
        if len(w) < 2:
            raise TrainError("need a weight for every class, including background")
        if not all(x > 0 and math.isfinite(x) for x in w):
            raise TrainError(f"class weights must be positive and finite, got {w}")

    @property
    def num_classes(self) -> int:
        return len(self.class_weights)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 35
    batch_size: int = 16
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        # zero epochs is allowed as a no-op run
        if self.epochs < 0:
            raise TrainError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise TrainError("Adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise TrainError("adam_eps must be > 0")
        if not 0 <= self.dropout_rate < 1:
            raise TrainError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(n, h, w) integer labels -> (n, num_classes, h, w) float32 one-hot."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise TrainError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes, *labels.shape[1:]), dtype=np.float32)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


def weighted_cross_entropy(probs, labels, spec: LossSpec = LossSpec()):
    """Mean over pixels of ``-w_c log p_c`` at each pixel's true class ``c``.

    Returns ``(loss, grad_logits)``, where the gradient is taken with respect
    to the pre-softmax logits: ``w_c (p - y) / n_pixels``.
    """
    p = np.asarray(probs)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 4:
        raise TrainError(f"probs {p.shape} and labels {y.shape} must be equal NCHW shapes")
    if p.shape[1] != spec.num_classes:
        raise TrainError(f"{p.shape[1]} classes but {spec.num_classes} class weights")
    if not (np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()):
        raise TrainError("labels must be one-hot along the channel axis")
    w = np.asarray(spec.class_weights, dtype=np.float64).reshape(1, -1, 1, 1)
    pixel_w = (y * w).sum(axis=1, keepdims=True)  # weight of each pixel's true class
    p_true = (y * p).sum(axis=1, keepdims=True, dtype=np.float64)
    n_pix = p.shape[0] * p.shape[2] * p.shape[3]
    loss = float((-pixel_w * np.log(np.maximum(p_true, LOG_CLAMP))).sum() / n_pix)
    grad = (pixel_w * (p.astype(np.float64) - y) / n_pix).astype(p.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_parameters(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params}, {k: np.zeros_like(a) for k, a in params}, 0)


def adam_step(params, grads: dict, state: OptimizerState, config: TrainConfig) -> OptimizerState:
    """In-place Adam update of ``params`` (a list of (key, array)).

    The step counter is incremented before bias correction. Raises
    NumericalError on any non-finite gradient, leaving parameters untouched.
    """
    params = list(params)
    for key, arr in params:
        g = grads.get(key)
        if g is None or g.shape != arr.shape:
            raise TrainError(f"gradient for {key} missing or misshapen")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {key}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for key, arr in params:
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(arr)
            state.v[key] = np.zeros_like(arr)
        m, v = state.m[key], state.v[key]
        # a huge finite gradient can overflow g*g to inf; that only zeroes the
        # step for the entry (m/inf), it never yields NaN
        with np.errstate(over="ignore"):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            arr -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(arr.dtype)
    return state


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def validation_size(n: int) -> int:
    """Validation count at the 66:336 ratio, rounded half up, at least 1."""
    return max(1, (2 * n * VAL_NUMERATOR + VAL_DENOMINATOR) // (2 * VAL_DENOMINATOR))


def crossval_split(case_ids, fold: int, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then hold out ``validation_size`` ids.

    Fold 0 validates on the first block of the shuffled order and fold 1 on
    the next block, so the two validation sets are disjoint.
    """
    ids = list(case_ids)
    if len(ids) < 2:
        raise TrainError("cross-validation needs at least 2 cases")
    if len(set(ids)) != len(ids):
        raise TrainError("case ids must be unique")
    if fold not in (0, 1):
        raise TrainError(f"fold must be 0 or 1, got {fold}")
    # 66/336 < 1/2, so two validation blocks always fit for n >= 2
    n_val = validation_size(len(ids))
    order = RngStream(int(seed)).child(_SHUFFLE_KEY).generator().permutation(len(ids))
    shuffled = [ids[i] for i in order]
    lo = fold * n_val
    val = shuffled[lo : lo + n_val]
    train = shuffled[:lo] + shuffled[lo + n_val :]
    return train, val


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dsc: float | None
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def rows(self, with_time: bool = True):
        for r in self.records:
            row = [str(r.epoch), repr(r.train_loss), "NA" if r.val_dsc is None else repr(r.val_dsc)]
            yield row + ([f"{r.seconds:.3f}"] if with_time else [])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_dsc", "seconds"])
            w.writerows(self.rows())


def worker_count() -> int:
    """Augmentation threads: DEEPSEG_THREADS if set, else the CPU count (max 8)."""
    env = os.environ.get("DEEPSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise TrainError(f"DEEPSEG_THREADS must be an integer, got {env!r}") from None
    return max(1, min(8, os.cpu_count() or 1))


def sample_seed(seed: int, epoch: int, index: int) -> int:
    return RngStream(int(seed)).child(_AUGMENT_KEY, epoch, index).seed


def _assemble_batch(records, indices, epoch, config, augment, pool, num_classes):
    def prep(idx):
        rec = records[idx]
        if augment is None or not augment.enabled:
            return rec.image, rec.mask
        return augment_sample(rec.image, rec.mask, augment, sample_seed(config.seed, epoch, idx))

    pairs = list(pool.map(prep, indices)) if pool is not None else [prep(i) for i in indices]
    x = np.stack([p[0] for p in pairs])[:, None].astype(np.float32)
    y = one_hot(np.stack([p[1] for p in pairs]), num_classes)
    return x, y


def predict_masks(model: ModelGraph, images, batch_size: int = 8) -> list[np.ndarray]:
    """Argmax label maps in inference mode for a list of 2-D images."""
    out = []
    for i in range(0, len(images), batch_size):
        x = np.stack(images[i : i + batch_size])[:, None].astype(np.float32)
        probs = model.predict_proba(x)
        out.extend(np.argmax(probs, axis=1).astype(np.uint8))
    return out


def validation_dsc(model: ModelGraph, records, batch_size: int = 8) -> float | None:
    """Mean over cases of the DSC of each case's stacked slices."""
    if not records:
        return None
    preds = predict_masks(model, [r.image for r in records], batch_size)
    by_case: dict[str, list] = {}
    for r, p in zip(records, preds):
        by_case.setdefault(r.case_id, []).append((p, r.mask))
    scores = [dice(np.stack([p for p, _ in v]), np.stack([m for _, m in v])) for _, v in sorted(by_case.items())]
    return float(np.mean(scores))


def train_loop(
    model: ModelGraph,
    dataset,
    config: TrainConfig = TrainConfig(),
    loss_spec: LossSpec = LossSpec(),
    augment: AugmentSpec | None = None,
    val_dataset=None,
    max_steps: int | None = None,
    on_step=None,
):
    """Train ``model`` in place on a list of SliceRecords.

    Each epoch shuffles with a seeded permutation, assembles batches
    (augmenting each sample from a seed derived from (seed, epoch, index)),
    and takes one Adam step per batch. Validation DSC is computed in
    inference mode after every epoch. ``max_steps`` stops early (the partial
    epoch is still recorded); ``on_step(step, loss)`` is called after every
    update.
    """
    records = list(dataset)
    if config.epochs == 0:
        return model, TrainHistory()
    if not records:
        raise TrainError("training set is empty after filtering")
    if model.config.num_classes != loss_spec.num_classes:
        raise TrainError(f"model has {model.config.num_classes} classes, loss has {loss_spec.num_classes} weights")
    params = model.parameters()
    state = OptimizerState.for_parameters(params)
    history = TrainHistory()
    master = RngStream(int(config.seed))
    workers = worker_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 and augment is not None and augment.enabled else None
    step = 0
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = master.child(_SHUFFLE_KEY, epoch).generator().permutation(len(records))
            ctx_base = dict(train=True, progress=epoch / config.epochs, dropout_rate=config.dropout_rate)
            losses = []
            for b, lo in enumerate(range(0, len(records), config.batch_size)):
                idx = order[lo : lo + config.batch_size]
                x, y = _assemble_batch(records, idx, epoch, config, augment, pool, loss_spec.num_classes)
                ctx = RunContext(rng=master.child(_DROPOUT_KEY, epoch, b), **ctx_base)
                probs, trace = model.forward(x, ctx)
                loss, grad_logits = weighted_cross_entropy(probs, y, loss_spec)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss in epoch {epoch}, batch {b}", b, epoch)
                _, grads = model.backward_from_logits(trace, grad_logits)
                try:
                    adam_step(params, grads, state, config)
                except NumericalError as exc:
                    raise NumericalError(f"{exc} in epoch {epoch}, batch {b}", b, epoch) from exc
                losses.append(loss)
                history.step_losses.append(loss)
                step += 1
                if on_step is not None:
                    on_step(step, loss)
                if max_steps is not None and step >= max_steps:
                    break
            val = validation_dsc(model, list(val_dataset)) if val_dataset else None
            history.records.append(EpochRecord(epoch + 1, float(np.mean(losses)), val, time.perf_counter() - t0))
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return model, history


def smoothed(values, window: int = 10) -> np.ndarray:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)
