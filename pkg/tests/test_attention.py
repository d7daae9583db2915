import numpy as np
import pytest

from xcos import autodiff as ad
from xcos.attention import AttentionNet, learned_attention
from xcos.autodiff import ShapeError
from xcos.backbone import GridFeature
from xcos.config import ConfigError
from xcos.metric import cosine_map_tensor, frobenius, patched_cosine_map, xcos


def feats(rng, shape=(32, 7, 7)):
    return GridFeature(rng.normal(size=shape)), GridFeature(rng.normal(size=shape))


def test_zero_final_layer_gives_uniform_map():
    net = AttentionNet((32, 7, 7), np.random.default_rng(0))
    net.fuse_conv2.weight.data[:] = 0.0
    net.fuse_conv2.bias.data[:] = 0.0
    fa, fb = feats(np.random.default_rng(1))
    np.testing.assert_allclose(learned_attention(fa, fb, net).values, 1 / 49, atol=1e-15)


def test_channel_layout_for_32_channel_grid():
    net = AttentionNet((32, 7, 7))
    p = net.named_parameters()
    assert p["reduce_conv.weight"].shape == (16, 32, 3, 3)
    assert p["fuse_conv1.weight"].shape == (16, 32, 3, 3)
    assert p["fuse_conv2.weight"].shape == (1, 16, 3, 3)
    fa, fb = feats(np.random.default_rng(0))
    fused = ad.concat_channels(net.reduce_conv(fa.values), net.reduce_conv(fb.values))
    assert fused.shape == (32, 7, 7)


def test_reduction_is_shared():
    names = list(AttentionNet((8, 7, 7)).named_parameters())
    assert names == ["reduce_conv.weight", "reduce_conv.bias", "fuse_conv1.weight", "fuse_conv1.bias",
                     "fuse_conv2.weight", "fuse_conv2.bias"]


def test_output_positive_and_normalised_over_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = AttentionNet((32, 7, 7), rng)
        for p in net.parameters():
            p.data = p.data * rng.uniform(0.1, 20)
        fa, fb = feats(rng)
        w = learned_attention(fa, fb, net).values
        assert (w > 0).all()
        assert abs(w.sum() - 1) < 1e-9


def test_spatial_size_preserved_for_other_grids():
    net = AttentionNet((8, 5, 9))
    rng = np.random.default_rng(0)
    w = net(rng.normal(size=(8, 5, 9)), rng.normal(size=(8, 5, 9)))
    assert w.shape == (5, 9)


def test_batched_matches_single():
    rng = np.random.default_rng(2)
    net = AttentionNet((8, 7, 7), rng)
    fa, fb = rng.normal(size=(4, 8, 7, 7)), rng.normal(size=(4, 8, 7, 7))
    batched = net(fa, fb).data
    for k in range(4):
        np.testing.assert_allclose(batched[k], net(fa[k], fb[k]).data, atol=1e-15, rtol=0)


def test_odd_channels_rejected():
    with pytest.raises(ConfigError):
        AttentionNet((7, 7, 7))


def test_wrong_input_shape_rejected():
    net = AttentionNet((8, 7, 7))
    with pytest.raises(ShapeError):
        net(np.zeros((8, 6, 6)), np.zeros((8, 6, 6)))


def test_pair_order_matters_but_stays_valid():
    rng = np.random.default_rng(3)
    net = AttentionNet((8, 7, 7), rng)
    fa, fb = feats(rng, (8, 7, 7))
    ab, ba = learned_attention(fa, fb, net).values, learned_attention(fb, fa, net).values
    assert not np.allclose(ab, ba)
    assert abs(ba.sum() - 1) < 1e-12


def test_scale_smoke():
    rng = np.random.default_rng(4)
    net = AttentionNet((8, 7, 7), rng)
    fa, fb = feats(rng, (8, 7, 7))
    prev = None
    for scale in np.geomspace(0.1, 10, 10):
        w = learned_attention(GridFeature(fa.values * scale), GridFeature(fb.values * scale), net).values
        assert np.isfinite(w).all()
        if prev is not None:
            assert np.abs(w - prev).max() < 0.5
        prev = w


def test_grad_check_attention_xcos_composite():
    rng = np.random.default_rng(5)
    net = AttentionNet((8, 7, 7), rng)
    fa, fb = rng.normal(size=(2, 8, 7, 7)), rng.normal(size=(2, 8, 7, 7))
    s = cosine_map_tensor(fa, fb)

    def f():
        return frobenius(s, net(fa, fb)).sum()

    assert ad.grad_check(f, net.parameters()) < 1e-4


def test_learned_xcos_in_cosine_range():
    rng = np.random.default_rng(6)
    net = AttentionNet((8, 7, 7), rng)
    fa, fb = feats(rng, (8, 7, 7))
    s = patched_cosine_map(fa, fb)
    score = xcos(s, learned_attention(fa, fb, net))
    assert s.values.min() <= score.value <= s.values.max()
