import dataclasses

import numpy as np
import pytest

from devias import tensor as tn
from devias.baselines import baseline_forward, baseline_loss
from devias.model import (VARIANTS, ModelConfig, Targets, block_probs, devias_forward, devias_losses,
                          init_model, match_batch, predict)
from devias.objectives import LossWeights
from devias.tensor import Tape


@pytest.fixture
def batch(small_train):
    return small_train.subset(np.arange(4))


def _soft(n, k, seed=0):
    return np.random.default_rng(seed).dirichlet(np.ones(k), n)


def test_unknown_variant():
    with pytest.raises(ValueError):
        ModelConfig(variant="three_token")


def test_init_is_seeded_and_sorted(tiny_model):
    a, b = init_model(tiny_model, 3), init_model(tiny_model, 3)
    assert list(a) == sorted(a)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_model(tiny_model, 4)
    assert not np.array_equal(a["encoder.patch.weight"], c["encoder.patch.weight"])


@pytest.mark.parametrize("variant, expected", [
    ("devias", {"disentangle.slots", "head.weight", "mask_head.fc1.weight"}),
    ("one_token", {"tokens", "head_action.weight", "head_scene.weight"}),
    ("two_token", {"tokens", "head_action.weight", "head_scene.weight"}),
    ("two_token_unified", {"tokens", "head.weight"}),
])
def test_variant_parameters(tiny_model, variant, expected):
    params = init_model(dataclasses.replace(tiny_model, variant=variant), 0)
    assert expected <= set(params)


def test_devias_forward_shapes(tiny_model, batch):
    out = devias_forward(batch.frames, tn.constants(init_model(tiny_model, 0)), tiny_model)
    assert out.features.shape == (4, 16, 16)
    assert out.logits.shape == (4, 2, 8)
    assert out.state.attn.shape == (4, 16, 2)


def test_targets_tokenize(batch):
    t = Targets(batch.actions, _soft(4, 4), batch.masks).tokenize(8)
    assert t.h_hat.shape == (4, 16)
    np.testing.assert_allclose(t.h_hat.sum(1) * 128, batch.masks.sum(axis=(1, 2, 3)))


def test_match_batch_is_per_clip():
    logits = np.zeros((2, 3, 4))
    logits[0, 2, 0] = 9.0  # clip 0: slot 2 is the confident action slot
    logits[1, 1, 1] = 9.0  # clip 1: slot 1
    ka, ks, costs = match_batch(logits, np.array([0, 1]), np.full((2, 2), 0.5), 2, 2)
    np.testing.assert_array_equal(ka, [2, 1])
    assert np.all(ka != ks) and costs.shape == (2, 3, 2)


def test_losses_parts_follow_weights(tiny_model, batch):
    P = tn.constants(init_model(tiny_model, 0))
    out = devias_forward(batch.frames, P, tiny_model)
    t = Targets(batch.actions, _soft(4, 4), batch.masks).tokenize(8)
    total, parts, ka, ks = devias_losses(out, t, P, tiny_model, LossWeights())
    assert set(parts) == {"L_D", "L_AG", "L_MP", "L_cos"}
    assert total.data == pytest.approx(sum(p.data for p in parts.values()), rel=1e-5)
    _, parts, _, _ = devias_losses(out, t, P, tiny_model, LossWeights(0.0, 0.0, 1.0))
    assert set(parts) == {"L_D", "L_cos"}


def test_every_parameter_gets_gradient(tiny_model, batch):
    tape = Tape(np.float32)
    P = tape.watch_all(init_model(tiny_model, 0))
    out = devias_forward(batch.frames, P, tiny_model)
    t = Targets(batch.actions, _soft(4, 4), batch.masks).tokenize(8)
    total, *_ = devias_losses(out, t, P, tiny_model, LossWeights())
    grads = tape.backward(total)
    silent = [k for k, g in grads.items() if not np.any(g)]
    assert silent == []


def test_block_probs():
    a, s = block_probs(np.array([[0.0, 0.0, 5.0, 1.0, 1.0]]), 2)
    np.testing.assert_allclose(a, [[0.5, 0.5]])
    np.testing.assert_allclose(s.sum(), 1.0)
    assert s[0, 0] > s[0, 1]


@pytest.mark.parametrize("variant", VARIANTS)
def test_predict_all_variants(tiny_model, batch, variant):
    cfg = dataclasses.replace(tiny_model, variant=variant)
    pred = predict(batch.frames, init_model(cfg, 0), cfg)
    assert pred.action_probs.shape == (4, 4) and pred.scene_probs.shape == (4, 4)
    np.testing.assert_allclose(pred.action_probs.sum(1), 1.0)
    assert pred.action_features.shape == (4, 16)
    if variant == "devias":
        assert np.all(pred.k_action != pred.k_scene)
    else:
        assert pred.k_action is None


def test_predict_is_deterministic(tiny_model, batch):
    params = init_model(tiny_model, 0)
    a = predict(batch.frames, params, tiny_model)
    b = predict(batch.frames, params, tiny_model)
    assert a.action_probs.tobytes() == b.action_probs.tobytes()


@pytest.mark.parametrize("variant", ["one_token", "two_token", "two_token_unified"])
def test_baseline_losses(tiny_model, batch, variant):
    cfg = dataclasses.replace(tiny_model, variant=variant)
    P = tn.constants(init_model(cfg, 0))
    a, s, _ = baseline_forward(batch.frames, P, cfg)
    loss, parts = baseline_loss(a, s, batch.actions, _soft(4, 4), cfg)
    assert np.isfinite(loss.data) and "L_D" in parts
    width = cfg.n_classes if variant == "two_token_unified" else cfg.n_actions
    assert a.shape == (4, width)
    # near-uniform logits at init
    expected = 2 * np.log(width if variant == "two_token_unified" else 4)
    assert loss.data == pytest.approx(expected, rel=0.05)
