"""Ordered frame-stream classification with rolling-average smoothing.

Classifying every frame independently makes the reported label flicker on
hard frames; averaging the last Q probability vectors suppresses that. The
smoothed label for frame t is the argmax of the element-wise mean of the
most recent min(t+1, Q) per-frame softmax vectors.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from divegest.dataset import VOCAB_SIZE, load_image
from divegest.model import ModelGraph
from divegest.ppm import DecodeError
from divegest.train import DEFAULT_MEAN, DEFAULT_STD, normalize

log = logging.getLogger(__name__)


class RollingWindow:
    """Fixed-capacity queue of probability vectors with a running sum."""

    def __init__(self, capacity: int, n_classes: int = VOCAB_SIZE):
        if capacity < 1:
            raise ValueError(f"window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.n_classes = n_classes
        self._queue: deque[np.ndarray] = deque()
        self._sum = np.zeros(n_classes, dtype=np.float64)

    def __len__(self) -> int:
        return len(self._queue)

    def push(self, probs) -> np.ndarray:
        """Append one probability vector (evicting the oldest at capacity)
        and return the element-wise mean of the current queue."""
        p = np.ascontiguousarray(probs, dtype=np.float64)
        if p.shape != (self.n_classes,):
            raise ValueError(f"probability vector must have shape ({self.n_classes},), got {p.shape}")
        if p.min() < 0.0:
            raise ValueError(f"probability vector has negative entry {p.min()}")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"probability vector sums to {p.sum()!r}, expected 1")
        if len(self._queue) == self.capacity:
            self._sum = self._sum - self._queue.popleft()
        self._queue.append(p)
        self._sum = self._sum + p
        return self._sum / len(self._queue)


def push_frame(window: RollingWindow, probs) -> tuple[int, float]:
    """Push one frame's probabilities; returns (smoothed label index,
    smoothed confidence). Ties break to the lowest class index."""
    mean = window.push(probs)
    idx = int(np.argmax(mean))
    return idx, float(mean[idx])


@dataclass
class AnnotatedFrame:
    index: int
    file: str
    raw_label: str
    smoothed_label: str
    confidence_pct: float  # 100 * max of the smoothed mean vector


def classify_stream(model: ModelGraph, frame_paths: Sequence, window: int = 5, *,
                    strict: bool = True, mean=DEFAULT_MEAN, std=DEFAULT_STD
                    ) -> list[AnnotatedFrame]:
    """Classify an ordered frame sequence with rolling-average smoothing.

    Unreadable frames abort when ``strict``, otherwise they are skipped
    with a warning (their indices still count). With window=1 the smoothed
    label equals the per-frame prediction.
    """
    paths = list(frame_paths)
    if not paths:
        raise ValueError("frame source yielded no frames")
    win = RollingWindow(window, len(model.vocab))
    frames: list[AnnotatedFrame] = []
    for index, path in enumerate(paths):
        try:
            image = load_image(path)
        except (DecodeError, OSError) as err:
            if strict:
                raise
            log.warning("skipping unreadable frame %s: %s", path, err)
            continue
        probs = model.probs_batch(normalize(image, mean, std)[None])[0]
        raw_idx = int(np.argmax(probs))
        smoothed_idx, confidence = push_frame(win, probs)
        frames.append(AnnotatedFrame(
            index=index,
            file=str(Path(path).name),
            raw_label=model.vocab[raw_idx],
            smoothed_label=model.vocab[smoothed_idx],
            confidence_pct=100.0 * confidence,
        ))
    if not frames:
        raise ValueError("no readable frames in the stream")
    return frames


def count_switches(annotations: Iterable) -> int:
    """Number of positions whose smoothed label differs from the previous one."""
    labels = [getattr(a, "smoothed_label", a) for a in annotations]
    return sum(1 for prev, cur in zip(labels, labels[1:]) if cur != prev)


def write_annotations_csv(path, frames: Sequence[AnnotatedFrame]) -> None:
    """``annotations.csv``: one row per frame, confidence as a two-decimal percent."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_index", "file", "raw_label", "smoothed_label", "confidence_pct"])
        for f in frames:
            writer.writerow([f.index, f.file, f.raw_label, f.smoothed_label,
                             f"{f.confidence_pct:.2f}"])


def flicker_fixture(n_frames: int = 200, seed: int = 117) -> np.ndarray:
    """Adversarial alternating probability stream, (n_frames, 17).

    Dominance alternates between two classes every frame with seeded
    margins, so an unsmoothed reader switches labels at every step while
    longer windows lock onto whichever class accumulated more mass.
    """
    rng = np.random.default_rng(seed)
    a, b = 4, 16  # "down" vs "up"
    probs = np.zeros((n_frames, VOCAB_SIZE), dtype=np.float64)
    spread = 0.02
    rest = spread / (VOCAB_SIZE - 2)
    for t in range(n_frames):
        margin = rng.uniform(0.01, 0.30)
        lead, trail = (a, b) if t % 2 == 0 else (b, a)
        probs[t, :] = rest
        probs[t, lead] = 0.5 + margin - spread / 2
        probs[t, trail] = 0.5 - margin - spread / 2
    return probs


def smooth_labels(prob_stream: np.ndarray, window: int) -> list[int]:
    """Smoothed label index per frame of a (N, 17) probability stream."""
    win = RollingWindow(window, prob_stream.shape[1])
    return [push_frame(win, p)[0] for p in prob_stream]
