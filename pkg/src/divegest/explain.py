"""Prediction attribution: integrated gradients and occlusion sensitivity.

Both methods score the softmax probability of one target class, so an
attribution total is interpretable as probability mass. They accept any
object exposing

    class_prob_batch(images, target)      -> (B,) probabilities
    class_prob_grad_batch(images, target) -> ((B,), (B, C, H, W)) values+grads

which :class:`~divegest.model.ModelGraph` implements; analytic stand-ins
used by the test suite implement the same two calls.

Integrated gradients integrates the input gradient along the straight path
from a baseline x' to the image x with a midpoint Riemann sum:

    attr_i = (x_i - x'_i) * (1/n) * sum_k dF(x' + a_k (x - x')) / dx_i,
    a_k = (k - 1/2) / n

and reports |sum_i attr_i - (F(x) - F(x'))| as the completeness gap, a
built-in audit of the sum's convergence. Occlusion slides a fill-valued
patch over the image and records the per-window probability drop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from divegest.tensor import ShapeError

_CHUNK = 64


@dataclass
class IgConfig:
    target: int
    steps: int = 64
    baseline: Optional[np.ndarray] = None  # default: all-zero image (normalized space)


@dataclass
class AttributionMap:
    """Signed per-pixel attributions for one image and target class."""

    values: np.ndarray  # (C, H, W)
    target: int
    score_input: float
    score_baseline: float
    completeness_gap: float


@dataclass
class OcclusionConfig:
    target: int
    patch: int = 8
    stride: int = 4
    fill: float | tuple = 0.0  # scalar or per-channel fill, model input space


@dataclass
class Heatmap:
    """Per-window importance scores with geometry to map back to pixels."""

    values: np.ndarray  # (grid_h, grid_w) probability drops
    patch: int
    stride: int
    image_shape: tuple[int, int]
    target: int
    score_original: float

    def max_drop_cell(self) -> tuple[int, int]:
        """Grid cell of the largest drop; ties go to the first in row order."""
        flat = int(np.argmax(self.values))
        return flat // self.values.shape[1], flat % self.values.shape[1]

    def cell_origin(self, row: int, col: int) -> tuple[int, int]:
        return row * self.stride, col * self.stride


def integrated_gradients(model, image: np.ndarray, cfg: IgConfig) -> AttributionMap:
    """Midpoint-rule integrated gradients of the target softmax probability.

    Interpolation points are evaluated in ascending order (batched in
    fixed-size chunks), so results are deterministic.
    """
    img = np.ascontiguousarray(image, dtype=np.float64)
    if cfg.steps < 1:
        raise ValueError(f"steps must be >= 1, got {cfg.steps}")
    baseline = cfg.baseline
    if baseline is None:
        baseline = np.zeros_like(img)
    else:
        baseline = np.ascontiguousarray(baseline, dtype=np.float64)
    if baseline.shape != img.shape:
        raise ShapeError(f"baseline shape {baseline.shape} != image shape {img.shape}")

    diff = img - baseline
    alphas = (np.arange(cfg.steps, dtype=np.float64) + 0.5) / cfg.steps
    grad_total = np.zeros_like(img)
    for start in range(0, cfg.steps, _CHUNK):
        chunk = alphas[start:start + _CHUNK]
        points = baseline[None] + chunk[:, None, None, None] * diff[None]
        _, grads = model.class_prob_grad_batch(points, cfg.target)
        grad_total += grads.sum(axis=0)
    values = diff * (grad_total / cfg.steps)

    scores = model.class_prob_batch(np.stack([img, baseline]), cfg.target)
    f_input, f_baseline = float(scores[0]), float(scores[1])
    gap = abs(float(values.sum()) - (f_input - f_baseline))
    return AttributionMap(values, cfg.target, f_input, f_baseline, gap)


def occlusion_map(model, image: np.ndarray, cfg: OcclusionConfig) -> Heatmap:
    """Probability drop per occluded window, swept with the configured stride.

    Each grid cell covers the patch whose top-left corner is
    (row * stride, col * stride); all channels of the patch are replaced by
    the fill value. One forward pass per window (batched internally).
    """
    img = np.ascontiguousarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected one (C, H, W) image, got shape {img.shape}")
    h, w = img.shape[1], img.shape[2]
    if not 1 <= cfg.stride <= cfg.patch:
        raise ValueError(f"stride must satisfy 1 <= stride <= patch, got "
                         f"stride={cfg.stride}, patch={cfg.patch}")
    if cfg.patch > min(h, w):
        raise ShapeError(f"patch {cfg.patch} exceeds image size {h}x{w}")
    grid_h = (h - cfg.patch) // cfg.stride + 1
    grid_w = (w - cfg.patch) // cfg.stride + 1
    fill = np.asarray(cfg.fill, dtype=np.float64)
    if fill.ndim == 1:
        if fill.shape[0] != img.shape[0]:
            raise ShapeError(f"fill has {fill.shape[0]} channels, image has {img.shape[0]}")
        fill = fill[:, None, None]
    elif fill.ndim != 0:
        raise ShapeError(f"fill must be a scalar or per-channel vector, got shape {fill.shape}")

    f_orig = float(model.class_prob_batch(img[None], cfg.target)[0])

    occluded = np.empty((grid_h * grid_w,) + img.shape, dtype=np.float64)
    pos = 0
    for gy in range(grid_h):
        for gx in range(grid_w):
            r0, c0 = gy * cfg.stride, gx * cfg.stride
            occluded[pos] = img
            occluded[pos, :, r0:r0 + cfg.patch, c0:c0 + cfg.patch] = fill
            pos += 1
    probs = np.empty(grid_h * grid_w, dtype=np.float64)
    for start in range(0, len(occluded), _CHUNK):
        probs[start:start + _CHUNK] = model.class_prob_batch(
            occluded[start:start + _CHUNK], cfg.target)
    drops = (f_orig - probs).reshape(grid_h, grid_w)
    return Heatmap(drops, cfg.patch, cfg.stride, (h, w), cfg.target, f_orig)


def _importance_field(source: AttributionMap | Heatmap, mode: str) -> np.ndarray:
    if mode not in ("magnitude", "signed"):
        raise ValueError(f"unknown render mode {mode!r}, expected 'magnitude' or 'signed'")
    if isinstance(source, AttributionMap):
        values = source.values.sum(axis=0) if mode == "signed" else np.abs(source.values).sum(axis=0)
        return values
    values = source.values if mode == "signed" else np.abs(source.values)
    h, w = source.image_shape
    gh, gw = values.shape
    rows = np.minimum(np.arange(h) * gh // h, gh - 1)
    cols = np.minimum(np.arange(w) * gw // w, gw - 1)
    return values[np.ix_(rows, cols)]


def render_heatmap(source: AttributionMap | Heatmap, mode: str = "magnitude",
                   binary_top_percent: float | None = None) -> np.ndarray:
    """8-bit grayscale raster of an attribution map or occlusion heatmap.

    Min-max normalized with high importance rendered dark (low luminance);
    an all-equal field degenerates to uniform mid-gray 128. Occlusion grids
    are nearest-neighbor upsampled to the image size. With
    ``binary_top_percent`` set, pixels whose importance falls in the top
    percentile are black and the rest white.
    """
    field = _importance_field(source, mode)
    if binary_top_percent is not None:
        if not 0 < binary_top_percent <= 100:
            raise ValueError(f"binary_top_percent must be in (0, 100], got {binary_top_percent}")
        cutoff = np.percentile(field, 100.0 - binary_top_percent)
        return np.where(field >= cutoff, 0, 255).astype(np.uint8)
    lo, hi = float(field.min()), float(field.max())
    if hi == lo:
        return np.full(field.shape, 128, dtype=np.uint8)
    norm = (field - lo) / (hi - lo)
    return np.rint(255.0 * (1.0 - norm)).astype(np.uint8)
