import numpy as np
import pytest

import oracles
from divegest.explain import (AttributionMap, Heatmap, IgConfig, OcclusionConfig,
                              integrated_gradients, occlusion_map, render_heatmap)
from divegest.model import build_model
from divegest.tensor import ShapeError


class LinearModel:
    """Analytic stand-in whose class score is a plain dot product w . x."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def class_prob_batch(self, batch, target):
        return (batch * self.w).sum(axis=(1, 2, 3))

    def class_prob_grad_batch(self, batch, target):
        grads = np.broadcast_to(self.w, batch.shape).copy()
        return self.class_prob_batch(batch, target), grads


class CountingModel:
    """Wrapper that counts forward evaluations of non-original images."""

    def __init__(self, inner, original):
        self.inner = inner
        self.original = np.asarray(original)
        self.occluded_forwards = 0

    def class_prob_batch(self, batch, target):
        for row in batch:
            if not np.array_equal(row, self.original):
                self.occluded_forwards += 1
        return self.inner.class_prob_batch(batch, target)


SHAPE = (3, 8, 8)


def _rng_image(seed):
    return np.random.default_rng(seed).normal(size=SHAPE)


# ---------------------------------------------------------------------------
# integrated gradients

def test_constant_model_gives_zero_attributions():
    model = LinearModel(np.zeros(SHAPE))
    out = integrated_gradients(model, _rng_image(0), IgConfig(target=0, steps=16))
    assert not out.values.any()
    assert out.completeness_gap == 0.0


def test_linear_model_attribution_is_w_times_x():
    w = _rng_image(1)
    x = _rng_image(2)
    out = integrated_gradients(LinearModel(w), x, IgConfig(target=0, steps=8))
    # gradient is constant along the path, so the midpoint sum is exact
    np.testing.assert_allclose(out.values, w * x, atol=1e-12)
    assert out.completeness_gap <= 1e-12


def test_baseline_equal_to_image_gives_exact_zero():
    w, x = _rng_image(3), _rng_image(4)
    out = integrated_gradients(LinearModel(w), x, IgConfig(target=0, steps=4, baseline=x.copy()))
    assert not out.values.any()
    assert out.completeness_gap == 0.0


def test_completeness_on_fresh_tiny_resnet():
    cfg = """
    input c=3 h=8 w=8
    conv out=8 kernel=3 stride=1 pad=1
    batch-norm-lite
    relu
    residual-block out=8 stride=1
    global-avg-pool
    dense out=17
    """
    model = build_model(cfg, seed=5)
    image = np.random.default_rng(6).normal(size=(3, 8, 8))
    out = integrated_gradients(model, image, IgConfig(target=3, steps=256))
    delta = abs(out.score_input - out.score_baseline)
    assert out.completeness_gap <= 1e-3 * delta + 1e-6
    # doubling the steps keeps the audit tight as well
    out2 = integrated_gradients(model, image, IgConfig(target=3, steps=512))
    assert out2.completeness_gap <= 1e-3 * delta + 1e-6


def test_ig_gradient_source_is_interchangeable():
    # swapping tape gradients for finite differences moves attributions by
    # less than 0.1% of their scale
    cfg = """
    input c=3 h=6 w=6
    conv out=4 kernel=3 stride=1 pad=1
    relu
    global-avg-pool
    dense out=17
    """
    model = build_model(cfg, seed=8)

    class FdModel:
        def class_prob_batch(self, batch, target):
            return model.class_prob_batch(batch, target)

        def class_prob_grad_batch(self, batch, target, h=1e-6):
            grads = np.empty_like(batch)
            for i, img in enumerate(batch):
                grads[i] = oracles.fd_grad(
                    lambda a: float(model.class_prob_batch(a[None], target)[0]), img, h=h)
            return self.class_prob_batch(batch, target), grads

    for seed in range(3):
        image = np.random.default_rng(20 + seed).normal(size=(3, 6, 6))
        tape_attr = integrated_gradients(model, image, IgConfig(target=2, steps=16)).values
        fd_attr = integrated_gradients(FdModel(), image, IgConfig(target=2, steps=16)).values
        scale = np.abs(tape_attr).max()
        assert np.abs(tape_attr - fd_attr).max() <= 1e-3 * scale


def test_ig_rejects_bad_config():
    model = LinearModel(np.zeros(SHAPE))
    with pytest.raises(ValueError, match="steps"):
        integrated_gradients(model, _rng_image(0), IgConfig(target=0, steps=0))
    with pytest.raises(ShapeError, match="baseline shape"):
        integrated_gradients(model, _rng_image(0),
                             IgConfig(target=0, baseline=np.zeros((3, 4, 4))))


# ---------------------------------------------------------------------------
# occlusion

def test_occlusion_noop_when_patch_equals_fill():
    w = _rng_image(7)
    x = _rng_image(8)
    x[:, 0:4, 0:4] = 0.25  # first window exactly equals the fill value
    cfg = OcclusionConfig(target=0, patch=4, stride=4, fill=0.25)
    heat = occlusion_map(LinearModel(w), x, cfg)
    assert heat.values[0, 0] == 0.0


def test_occlusion_linear_model_closed_form():
    w, x = _rng_image(9), _rng_image(10)
    fill = 0.1
    cfg = OcclusionConfig(target=0, patch=4, stride=2, fill=fill)
    heat = occlusion_map(LinearModel(w), x, cfg)
    assert heat.values.shape == (3, 3)
    for gy in range(3):
        for gx in range(3):
            r, c = gy * 2, gx * 2
            expected = (w[:, r:r + 4, c:c + 4] * (x[:, r:r + 4, c:c + 4] - fill)).sum()
            assert abs(heat.values[gy, gx] - expected) <= 1e-9


def test_occlusion_per_channel_fill():
    w, x = _rng_image(30), _rng_image(31)
    fill = (0.1, -0.2, 0.3)
    heat = occlusion_map(LinearModel(w), x,
                         OcclusionConfig(target=0, patch=4, stride=4, fill=fill))
    f = np.asarray(fill)[:, None, None]
    for gy in range(2):
        for gx in range(2):
            r, c = gy * 4, gx * 4
            expected = (w[:, r:r + 4, c:c + 4] * (x[:, r:r + 4, c:c + 4] - f)).sum()
            assert abs(heat.values[gy, gx] - expected) <= 1e-9


def test_occlusion_forward_pass_count():
    x = _rng_image(11)
    counter = CountingModel(LinearModel(_rng_image(12)), x)
    heat = occlusion_map(counter, x, OcclusionConfig(target=0, patch=4, stride=2))
    gh, gw = heat.values.shape
    assert (gh, gw) == (3, 3)
    assert counter.occluded_forwards == gh * gw


def test_occlusion_grid_geometry_32x32():
    heat = occlusion_map(LinearModel(np.zeros((3, 32, 32))),
                         np.zeros((3, 32, 32)), OcclusionConfig(target=0, patch=8, stride=4))
    assert heat.values.shape == (7, 7)  # floor((32 - 8) / 4) + 1


def test_occlusion_stride_equal_patch_tiles_the_image():
    cfg = OcclusionConfig(target=0, patch=4, stride=4)
    covered = np.zeros((8, 8), dtype=int)
    heat = occlusion_map(LinearModel(np.zeros(SHAPE)), np.zeros(SHAPE), cfg)
    gh, gw = heat.values.shape
    for gy in range(gh):
        for gx in range(gw):
            r, c = heat.cell_origin(gy, gx)
            covered[r:r + cfg.patch, c:c + cfg.patch] += 1
    np.testing.assert_array_equal(covered, 1)


def test_occlusion_rejects_bad_geometry():
    model = LinearModel(np.zeros(SHAPE))
    with pytest.raises(ShapeError, match="patch 16 exceeds"):
        occlusion_map(model, np.zeros(SHAPE), OcclusionConfig(target=0, patch=16, stride=4))
    with pytest.raises(ValueError, match="stride"):
        occlusion_map(model, np.zeros(SHAPE), OcclusionConfig(target=0, patch=4, stride=5))


def test_max_drop_cell_prefers_first_tie():
    heat = Heatmap(values=np.array([[1.0, 2.0], [2.0, 0.0]]), patch=4, stride=4,
                   image_shape=(8, 8), target=0, score_original=0.5)
    assert heat.max_drop_cell() == (0, 1)


# ---------------------------------------------------------------------------
# rendering

def _attr(values):
    return AttributionMap(values=np.asarray(values, dtype=np.float64), target=0,
                          score_input=0.0, score_baseline=0.0, completeness_gap=0.0)


def test_render_constant_map_is_mid_gray():
    raster = render_heatmap(_attr(np.full((3, 4, 4), 0.3)))
    np.testing.assert_array_equal(raster, np.full((4, 4), 128, dtype=np.uint8))


def test_render_max_cell_is_darkest():
    values = np.zeros((3, 4, 4))
    values[:, 2, 1] = 5.0
    raster = render_heatmap(_attr(values), mode="magnitude")
    assert raster[2, 1] == 0
    assert raster.max() == 255


def test_render_is_deterministic():
    rng = np.random.default_rng(13)
    amap = _attr(rng.normal(size=(3, 5, 5)))
    assert render_heatmap(amap).tobytes() == render_heatmap(amap).tobytes()


def test_render_signed_vs_magnitude_differ_on_signed_data():
    values = np.zeros((3, 2, 2))
    values[:, 0, 0] = -3.0
    values[:, 1, 1] = 1.0
    mag = render_heatmap(_attr(values), mode="magnitude")
    signed = render_heatmap(_attr(values), mode="signed")
    assert mag[0, 0] == 0       # largest magnitude is darkest
    assert signed[0, 0] == 255  # most negative is lightest in signed mode


def test_render_upsamples_occlusion_grid_nearest_neighbor():
    heat = Heatmap(values=np.array([[0.0, 1.0], [1.0, 0.0]]), patch=4, stride=4,
                   image_shape=(8, 8), target=0, score_original=0.0)
    raster = render_heatmap(heat)
    assert raster.shape == (8, 8)
    assert raster[0, 0] == 255 and raster[0, 7] == 0
    assert raster[7, 0] == 0 and raster[7, 7] == 255
    # each 4x4 block is uniform
    for bi in range(2):
        for bj in range(2):
            block = raster[bi * 4:(bi + 1) * 4, bj * 4:(bj + 1) * 4]
            assert len(np.unique(block)) == 1


def test_render_binary_top_percent():
    values = np.zeros((3, 10, 10))
    values[:, 0, 0] = 10.0
    raster = render_heatmap(_attr(values), binary_top_percent=1.0)
    assert raster[0, 0] == 0
    assert (raster == 255).sum() == 99
