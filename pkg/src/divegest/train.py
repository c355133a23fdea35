"""Training recipe: Adam with bias correction, stepped learning-rate decay,
rotation/zoom augmentation, transfer-learning freeze modes, and evaluation.

The learning rate starts at 1e-3 and is multiplied by sqrt(0.1) every 7
epochs. Augmentation rotates by a uniform angle in [0, 20] degrees, zooms
by a uniform factor in [0.9, 1.1], then normalizes per channel; both
resampling steps are bilinear with edge-value fill. All randomness flows
from explicit seeds, so identical seeds give bit-identical runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from divegest import tensor as T
from divegest.dataset import LabeledDataset
from divegest.model import ModelGraph, freeze_mask
from divegest.tensor import NonFiniteError, ShapeError, Tape

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message names the epoch and batch."""


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied only to the gradient'd params."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter "
                             f"{name!r} shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class StepLrSchedule:
    base_lr: float = 1e-3
    decay: float = math.sqrt(0.1)
    period: int = 7


def lr_at(schedule: StepLrSchedule, epoch: int) -> float:
    """base_lr * decay ** floor(epoch / period); piecewise constant."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return schedule.base_lr * schedule.decay ** (epoch // schedule.period)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    rotation_deg: tuple[float, float] = (0.0, 20.0)
    zoom: tuple[float, float] = (0.9, 1.1)
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD
    seed: int = 0


def normalize(image: np.ndarray, mean: Sequence[float] = DEFAULT_MEAN,
              std: Sequence[float] = DEFAULT_STD) -> np.ndarray:
    """Per-channel (x - mean) / std for a (3, H, W) image."""
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return (np.asarray(image, dtype=np.float64) - m) / s


def _bilinear(image: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Sample (3, H, W) at fractional coords, clamped to the edges."""
    h, w = image.shape[1], image.shape[2]
    r = np.clip(src_r, 0.0, h - 1.0)
    c = np.clip(src_c, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = image[:, r0, c0] * (1.0 - fc) + image[:, r0, c1] * fc
    bot = image[:, r1, c0] * (1.0 - fc) + image[:, r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the center, counter-clockwise positive, bilinear, edge fill."""
    h, w = image.shape[1], image.shape[2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    # inverse of a visually-CCW rotation in row-down screen coordinates
    src_c = cx + cos_t * dx - sin_t * dy
    src_r = cy + sin_t * dx + cos_t * dy
    return _bilinear(image, src_r, src_c)


def zoom_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the center (>1 zooms in), bilinear, edge fill."""
    if factor <= 0:
        raise ValueError(f"zoom factor must be positive, got {factor}")
    h, w = image.shape[1], image.shape[2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    src_r = cy + dy / factor + 0.0 * dx
    src_c = cx + dx / factor + 0.0 * dy
    return _bilinear(image, src_r, src_c)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotate, then random zoom, then normalize. Shape-preserving."""
    angle = rng.uniform(*cfg.rotation_deg)
    factor = rng.uniform(*cfg.zoom)
    out = rotate_image(np.asarray(image, dtype=np.float64), angle)
    out = zoom_image(out, factor)
    return normalize(out, cfg.mean, cfg.std)


# ---------------------------------------------------------------------------
# the epoch loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    test_accuracy: Optional[float]
    wall_time_s: float


def train(model: ModelGraph, data: LabeledDataset, *, epochs: int, batch_size: int,
          mode: str = "fine-tuning", schedule: StepLrSchedule | None = None,
          augment_cfg: AugmentConfig | None = None, seed: int = 0,
          test_data: LabeledDataset | None = None) -> TrainReport:
    """Train in place with seeded shuffling and per-epoch stepped LR.

    ``augment_cfg=None`` disables rotation/zoom; images are still
    normalized with the default statistics. The last partial batch of each
    epoch is kept. Frozen parameters are never touched.
    """
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    schedule = schedule or StepLrSchedule()
    freeze_mask(model, mode)
    mean = augment_cfg.mean if augment_cfg else DEFAULT_MEAN
    std = augment_cfg.std if augment_cfg else DEFAULT_STD

    state = AdamState()
    shuffle_rng = np.random.default_rng(seed)
    aug_rng = np.random.default_rng(augment_cfg.seed) if augment_cfg else None
    n = len(data)
    records: list[EpochRecord] = []
    started = time.perf_counter()

    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            if augment_cfg is not None:
                batch = np.stack([augment(data.images[i], augment_cfg, aug_rng) for i in idx])
            else:
                batch = np.stack([normalize(data.images[i], mean, std) for i in idx])
            labels = data.labels[idx]

            tape = Tape()
            x = tape.leaf(batch)
            leaves = model.param_leaves(tape, trainable=True)
            try:
                logits = model.forward_nodes(tape, x, leaves)
                loss = T.cross_entropy(logits, labels)
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch}, batch {b}: {err}") from err
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads_by_node = tape.backward(loss)
            grads = {name: grads_by_node[node]
                     for name, node in leaves.items() if node in grads_by_node}
            adam_step(model.params, grads, state, lr)

            loss_sum += float(loss.value) * len(idx)
            correct += int((np.argmax(logits.value, axis=1) == labels).sum())
        records.append(EpochRecord(epoch, lr, loss_sum / n, correct / n))

    test_acc = None
    if test_data is not None:
        test_acc, _ = evaluate(model, test_data, mean=mean, std=std)
    return TrainReport(records, test_acc, time.perf_counter() - started)


def evaluate(model: ModelGraph, data: LabeledDataset, *,
             mean: Sequence[float] = DEFAULT_MEAN, std: Sequence[float] = DEFAULT_STD,
             batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Accuracy and a KxK confusion matrix (rows true, columns predicted)."""
    if len(data) == 0:
        raise ValueError("evaluation dataset is empty")
    k = len(model.vocab)
    if data.labels.min() < 0 or data.labels.max() >= k:
        raise ValueError("dataset labels fall outside the model vocabulary")
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(data), batch_size):
        images = data.images[start:start + batch_size]
        batch = np.stack([normalize(im, mean, std) for im in images])
        pred = np.argmax(model.logits(batch), axis=1)
        for t_lbl, p_lbl in zip(data.labels[start:start + batch_size], pred):
            confusion[t_lbl, p_lbl] += 1
    accuracy = float(np.trace(confusion)) / len(data)
    return accuracy, confusion
