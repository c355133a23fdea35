import numpy as np
import pytest

from divegest import tensor as T
from divegest.model import (TINY_RESNET_CONFIG, CheckpointError, ConfigError,
                            build_model, config_digest, forward, freeze_mask,
                            load_checkpoint, parse_config, predict, save_checkpoint)
from divegest.tensor import ShapeError, Tape
from divegest.train import AdamState, adam_step


def rng_image(seed=0, shape=(1, 3, 32, 32)):
    return np.random.default_rng(seed).normal(size=shape)


# ---------------------------------------------------------------------------
# config parsing and building

def test_tiny_resnet_builds_and_runs():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    logits = forward(model, rng_image())
    assert logits.shape == (1, 17)


def test_dense_input_mismatch_names_both_layers():
    cfg = """
    input c=3 h=8 w=8
    conv out=128 kernel=3 stride=1 pad=1
    global-avg-pool
    dense in=64 out=17
    """
    with pytest.raises(ConfigError) as err:
        build_model(cfg)
    msg = str(err.value)
    assert "dense" in msg and "in=64" in msg and "128" in msg and "global-avg-pool" in msg


def test_build_is_deterministic():
    a = build_model(TINY_RESNET_CONFIG, seed=12)
    b = build_model(TINY_RESNET_CONFIG, seed=12)
    assert a.params.keys() == b.params.keys()
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    c = build_model(TINY_RESNET_CONFIG, seed=13)
    assert any(a.params[n].tobytes() != c.params[n].tobytes() for n in a.params)


def test_unknown_layer_kind():
    with pytest.raises(ConfigError, match="unknown layer kind 'convv'"):
        parse_config("input c=3 h=8 w=8\nconvv out=4\ndense out=17")


def test_head_must_match_vocabulary():
    with pytest.raises(ConfigError, match="17 units"):
        build_model("input c=3 h=4 w=4\nglobal-avg-pool\ndense out=5")


def test_config_requires_input_line():
    with pytest.raises(ConfigError, match="must declare 'input"):
        parse_config("dense out=17")


def test_digest_ignores_comments_and_spacing():
    noisy = TINY_RESNET_CONFIG.replace("input c=3", "input   c=3") + "\n# trailing comment\n"
    assert config_digest(noisy) == config_digest(TINY_RESNET_CONFIG)
    assert config_digest(TINY_RESNET_CONFIG) != config_digest(
        TINY_RESNET_CONFIG.replace("out=16", "out=8", 1))


# ---------------------------------------------------------------------------
# residual block semantics

BLOCK_CFG = """
input c=3 h=8 w=8
residual-block out=3 stride=1
global-avg-pool
dense out=17
"""


def _block_output(model, x):
    tape = Tape()
    leaves = model.param_leaves(tape, trainable=False)
    node = model._residual(tape, tape.leaf(x), "L00.residual-block",
                           model.blocks[0], leaves)
    return node.value


def test_fresh_block_is_identity():
    # conv2 is zero-initialized, so an untrained block passes input through
    model = build_model(BLOCK_CFG, seed=1)
    x = rng_image(3, (2, 3, 8, 8))
    np.testing.assert_allclose(_block_output(model, x), x, atol=1e-12)


def test_zeroed_block_is_identity():
    model = build_model(BLOCK_CFG, seed=1)
    model.params["L00.residual-block.conv1.weight"][:] = 0.0
    model.params["L00.residual-block.conv2.weight"][:] = 0.0
    x = rng_image(4, (1, 3, 8, 8))
    np.testing.assert_allclose(_block_output(model, x), x, atol=1e-12)


def test_projection_block_downsamples():
    cfg = "input c=3 h=8 w=8\nresidual-block out=6 stride=2\nglobal-avg-pool\ndense out=17"
    model = build_model(cfg, seed=0)
    assert model.blocks[0].projection
    assert "L00.residual-block.proj.weight" in model.params
    out = _block_output(model, rng_image(5, (1, 3, 8, 8)))
    assert out.shape == (1, 6, 4, 4)


# ---------------------------------------------------------------------------
# forward / predict

def test_identical_rows_give_identical_logits():
    model = build_model(TINY_RESNET_CONFIG, seed=2)
    img = rng_image(9, (3, 32, 32))
    logits = forward(model, np.stack([img, img]))
    np.testing.assert_array_equal(logits[0], logits[1])


def test_forward_rejects_wrong_shape():
    model = build_model(TINY_RESNET_CONFIG, seed=2)
    with pytest.raises(ShapeError, match="expected input shape"):
        forward(model, np.zeros((1, 3, 16, 16)))


def test_predict_uniform_logits_breaks_tie_to_class_zero():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    model.params["L09.dense.weight"][:] = 0.0
    model.params["L09.dense.bias"][:] = 0.0
    idx, name, conf = predict(model, rng_image(1, (3, 32, 32)))
    assert idx == 0 and name == "backward"
    assert conf == pytest.approx(1 / 17, abs=1e-12)


def test_predict_dominant_class_is_mosaic():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    model.params["L09.dense.weight"][:] = 0.0
    model.params["L09.dense.bias"][:] = 0.0
    model.params["L09.dense.bias"][9] = 50.0
    idx, name, conf = predict(model, rng_image(2, (3, 32, 32)))
    assert (idx, name) == (9, "mosaic")
    assert conf > 0.999999


def test_predict_matches_forward_plus_softmax():
    model = build_model(TINY_RESNET_CONFIG, seed=4)
    for seed in range(3):
        img = rng_image(seed, (3, 32, 32))
        idx, _, conf = predict(model, img)
        probs = T.softmax_values(forward(model, img[None]))[0]
        assert idx == int(np.argmax(probs))
        assert conf == pytest.approx(float(probs.max()), rel=1e-12)


def test_predict_argmax_shift_invariant():
    model = build_model(TINY_RESNET_CONFIG, seed=4)
    img = rng_image(11, (3, 32, 32))
    idx, _, _ = predict(model, img)
    model.params["L09.dense.bias"][:] += 3.7  # shifts every logit equally
    idx_shifted, _, _ = predict(model, img)
    assert idx == idx_shifted


# ---------------------------------------------------------------------------
# freeze modes

def test_feature_extraction_freezes_everything_but_dense():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    mask = freeze_mask(model, "feature-extraction")
    assert set(mask) == set(model.params)
    for name, frozen in mask.items():
        assert frozen == (".dense." not in name)
    assert not mask["L09.dense.weight"] and not mask["L09.dense.bias"]


def test_fine_tuning_freezes_nothing():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    assert not any(freeze_mask(model, "fine-tuning").values())


def test_all_frozen():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    assert all(freeze_mask(model, "all-frozen").values())


def test_unknown_mode_rejected():
    model = build_model(TINY_RESNET_CONFIG, seed=0)
    with pytest.raises(ValueError, match="unknown freeze mode"):
        freeze_mask(model, "partial")


def test_frozen_params_survive_update_steps():
    model = build_model(TINY_RESNET_CONFIG, seed=6)
    freeze_mask(model, "feature-extraction")
    before = {n: v.tobytes() for n, v in model.params.items()}
    state = AdamState()
    rng = np.random.default_rng(0)
    for _ in range(3):
        tape = Tape()
        leaves = model.param_leaves(tape, trainable=True)
        logits = model.forward_nodes(tape, tape.leaf(rng.normal(size=(4, 3, 32, 32))), leaves)
        loss = T.cross_entropy(logits, rng.integers(0, 17, size=4))
        grads_by_node = tape.backward(loss)
        grads = {n: grads_by_node[node] for n, node in leaves.items() if node in grads_by_node}
        adam_step(model.params, grads, state, lr=0.01)
    for name, frozen in model.freeze.items():
        if frozen:
            assert model.params[name].tobytes() == before[name]
        else:
            assert model.params[name].tobytes() != before[name]


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_model(TINY_RESNET_CONFIG, seed=8)
    batch = rng_image(20, (2, 3, 32, 32))
    logits_before = forward(model, batch)
    save_checkpoint(model, tmp_path / "ckpt", epoch=5, lr=1e-3, seed=8)
    restored, meta = load_checkpoint(tmp_path / "ckpt", TINY_RESNET_CONFIG)
    assert meta["epoch"] == "5" and meta["seed"] == "8"
    logits_after = forward(restored, batch)
    assert logits_before.tobytes() == logits_after.tobytes()


def test_checkpoint_digest_mismatch(tmp_path):
    model = build_model(TINY_RESNET_CONFIG, seed=8)
    save_checkpoint(model, tmp_path / "ckpt", epoch=1, lr=1e-3, seed=8)
    other = TINY_RESNET_CONFIG.replace("out=16", "out=8", 1)
    with pytest.raises(CheckpointError, match="digest mismatch"):
        load_checkpoint(tmp_path / "ckpt", other)


def test_checkpoint_missing_param_file(tmp_path):
    model = build_model(TINY_RESNET_CONFIG, seed=8)
    out = save_checkpoint(model, tmp_path / "ckpt", epoch=1, lr=1e-3, seed=8)
    (out / "L09.dense.bias.gten").unlink()
    with pytest.raises(CheckpointError, match="missing parameter file"):
        load_checkpoint(out, TINY_RESNET_CONFIG)
