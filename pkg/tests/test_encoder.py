import numpy as np
import pytest

from devias import encoder as E
from devias import tensor as tn
from devias.tensor import Tape, Tensor, finite_diff_check


@pytest.fixture
def cfg():
    return E.EncoderConfig(dim=16, heads=2, depth=2, patch=8, mlp_ratio=2, frames=8, height=16, width=16)


def test_config_derived_sizes(cfg):
    assert cfg.grid == (4, 2, 2)
    assert cfg.n_spatial == 4 and cfg.n_tokens == 16
    assert cfg.tubelet_size == 2 * 8 * 8
    assert E.EncoderConfig().n_tokens == 64


@pytest.mark.parametrize("kwargs", [{"dim": 10, "heads": 4}, {"height": 20}, {"frames": 7}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        E.EncoderConfig(**kwargs)


def test_tubelet_order_is_time_then_row_major():
    # each pixel holds its own coordinates so the flattening order is visible
    t, h, w = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    frames = (100 * t + 10 * h + w).astype(np.float32)[None, ..., None]
    tok = E.tubelets(frames, 2)
    assert tok.shape == (1, 2 * 2 * 2, 2 * 2 * 2)
    # token 0 = group 0, patch (0,0); first element is (t0, y0, x0), second (t0, y0, x1)
    np.testing.assert_array_equal(tok[0, 0, :4], [0, 1, 10, 11])
    np.testing.assert_array_equal(tok[0, 1, :2], [2, 3])  # next patch to the right
    np.testing.assert_array_equal(tok[0, 2, :2], [20, 21])  # next patch row
    np.testing.assert_array_equal(tok[0, 4, :2], [200, 201])  # next tubelet group
    assert tok[0, 0, 4] == 100  # second frame of the group


def test_tubelets_reject_indivisible():
    with pytest.raises(ValueError):
        E.tubelets(np.zeros((1, 3, 8, 8, 1)), 4)


def test_tokenize_mask_is_mean_pool():
    masks = np.zeros((1, 8, 16, 16), np.uint8)
    masks[0, 0:2, 0:8, 0:8] = 1
    masks[0, 2, 8:12, 0:8] = 1
    h = E.tokenize_mask(masks, 8)
    assert h.shape == (1, 16)
    assert h[0, 0] == 1.0
    assert h[0, 6] == pytest.approx(32 / 128)
    assert h.sum() == pytest.approx(1.25)


def test_positional_table_properties():
    pe = E.positional_table(16, 8)
    assert pe.shape == (16, 8)
    np.testing.assert_allclose(pe[0, 0::2], 0.0)
    np.testing.assert_allclose(pe[0, 1::2], 1.0)
    np.testing.assert_allclose(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2, 1.0, atol=1e-6)
    assert not pe.flags.writeable
    with pytest.raises(tn.DimensionError):
        E.add_positional(np.zeros((1, 15, 8)), pe)


def test_trunc_normal_bounds(rng):
    w = E.trunc_normal(rng, (200, 50), std=0.02)
    assert w.dtype == np.float32 and np.abs(w).max() <= 0.04
    assert 0.01 < w.std() < 0.02


def test_init_names_and_shapes(cfg, rng):
    p = E.init_encoder(cfg, rng)
    assert p["encoder.patch.weight"].shape == (128, 16)
    assert p["encoder.blocks.1.mlp.fc1.weight"].shape == (16, 32)
    assert len(p) == 2 + cfg.depth * 16
    assert all(v.dtype == np.float32 for v in p.values())


def test_encode_shapes_and_tokens(cfg, rng):
    P = {k: Tensor(v) for k, v in E.init_encoder(cfg, rng).items()}
    frames = rng.uniform(size=(3, 8, 16, 16, 1)).astype(np.float32)
    assert E.encode(frames, P, cfg).shape == (3, 16, 16)
    assert E.encode(frames[0], P, cfg).shape == (1, 16, 16)
    out = E.encode(frames, P, cfg, tokens=Tensor(np.zeros((2, 16), np.float32)))
    assert out.shape == (3, 18, 16)
    assert out.data.dtype == np.float32


def test_encode_is_permutation_equivariant_over_batch(cfg, rng):
    P = {k: Tensor(v) for k, v in E.init_encoder(cfg, rng).items()}
    frames = rng.uniform(size=(4, 8, 16, 16, 1)).astype(np.float32)
    a = E.encode(frames, P, cfg).data
    b = E.encode(frames[::-1], P, cfg).data
    np.testing.assert_allclose(a[::-1], b, atol=1e-5)


def test_attention_rows_sum_to_one(rng):
    d = 8
    P = {f"a.{p}.{s}": Tensor(rng.normal(size=(d, d)) if s == "weight" else np.zeros(d))
         for p in ("q", "k", "v", "proj") for s in ("weight", "bias")}
    _, w = E.attention(Tensor(rng.normal(size=(2, 5, d))), P, "a", 2, return_weights=True)
    assert w.shape == (2, 2, 5, 5)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_encoder_gradient(cfg, rng):
    params = {k: v.astype(np.float64) for k, v in E.init_encoder(cfg, rng).items()}
    params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in params.items()}
    frames = rng.uniform(size=(1, 8, 16, 16, 1))
    w = rng.normal(size=(1, 16, 16))

    def f(P):
        x = E.tubelets(frames, cfg.patch)
        h = tn.linear(x, P["encoder.patch.weight"], P["encoder.patch.bias"])
        h = E.add_positional(h, E.positional_table(16, 16).astype(np.float64))
        for i in range(cfg.depth):
            h = E.transformer_block(h, P, f"encoder.blocks.{i}", cfg.heads)
        return (h * w).sum()

    assert finite_diff_check(f, params, max_coords=4, rng=np.random.default_rng(0)) <= 1e-6
