import math

import numpy as np
import pytest

from xcos import autodiff as ad
from xcos.backbone import (ClassWeights, GridBackbone, GridFeature, class_cosines, extract_grid,
                           extract_grids, flatten, unflatten)
from xcos.autodiff import ShapeError
from xcos.config import BackboneConfig, ConfigError
from xcos.layers import glorot_uniform


def random_images(n, size, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 3, *size))


def test_full_scale_grid_shape():
    cfg = BackboneConfig.full_scale()
    grid = extract_grid(random_images(1, (112, 112))[0], GridBackbone(cfg))
    assert grid.shape == (32, 7, 7)


def test_desk_configuration_grid_shape():
    cfg = BackboneConfig((56, 56), (16, 32, 64), 32)
    assert cfg.grid_extent == (7, 7)
    assert extract_grid(random_images(1, (56, 56))[0], GridBackbone(cfg)).shape == (32, 7, 7)


@pytest.mark.parametrize("size,blocks", [(56, (8, 16, 32)), (112, (8, 16, 32, 64))])
@pytest.mark.parametrize("c_f", [8, 32])
def test_grid_shape_matrix(size, blocks, c_f):
    cfg = BackboneConfig((size, size), blocks, c_f)
    out = GridBackbone(cfg)(random_images(2, (size, size)))
    assert out.shape == (2, c_f, 7, 7)


def test_identical_images_identical_grids():
    cfg = BackboneConfig()
    net = GridBackbone(cfg, np.random.default_rng(3))
    img = random_images(1, (56, 56), seed=4)[0]
    a, b = extract_grid(img, net), extract_grid(img.copy(), net)
    np.testing.assert_array_equal(a.values, b.values)


def test_batch_and_single_agree():
    net = GridBackbone(BackboneConfig())
    imgs = random_images(3, (56, 56), seed=1)
    batched = extract_grids(imgs, net, batch=2)
    for k in range(3):
        np.testing.assert_allclose(batched[k], extract_grid(imgs[k], net).values, atol=1e-13, rtol=0)


def test_size_mismatch_names_shapes():
    net = GridBackbone(BackboneConfig())
    with pytest.raises(ShapeError, match=r"\(3, 56, 56\)"):
        extract_grid(np.zeros((3, 28, 28)), net)
    with pytest.raises(ShapeError, match="56"):
        net(np.zeros((1, 3, 60, 60)))


def test_final_layer_is_one_by_one_conv():
    net = GridBackbone(BackboneConfig.full_scale())
    params = net.named_parameters()
    last_weight = [k for k in params if k.endswith("weight")][-1]
    assert last_weight == "head.weight"
    assert params["head.weight"].shape == (32, 128, 1, 1)
    assert params["head.bias"].shape == (32,)


def test_identity_head_preserves_spatial_geometry():
    cfg = BackboneConfig((56, 56), (8, 16, 16), 16)
    net = GridBackbone(cfg)
    net.head.weight.data = np.eye(16).reshape(16, 16, 1, 1)
    net.head.bias.data = np.zeros(16)
    x = random_images(2, (56, 56))
    trunk = net.trunk(ad.Tensor(x)).data
    out = net(x).data
    assert out.shape[-2:] == trunk.shape[-2:] == (7, 7)
    np.testing.assert_array_equal(out, trunk)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig((60, 60), (8, 16), 8)
    with pytest.raises(ConfigError):
        BackboneConfig((28, 28), (8, 16, 32), 8)  # 28 / 8 is not 7
    with pytest.raises(ConfigError):
        BackboneConfig((56, 56), (8, 16, 32), 1)


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = glorot_uniform((200, 300), 300, 200, rng)
    a = math.sqrt(6 / 500)
    assert np.abs(w).max() <= a
    assert np.abs(w).max() > 0.95 * a


def test_flatten_full_scale_dimension():
    g = GridFeature(np.random.default_rng(0).normal(size=(32, 7, 7)))
    v = flatten(g)
    assert v.shape == (1568,)
    np.testing.assert_array_equal(unflatten(v, g.shape).values, g.values)
    np.testing.assert_array_equal(np.sort(v), np.sort(g.values.ravel()))


def test_flatten_is_row_major():
    g = GridFeature(np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4))
    np.testing.assert_array_equal(flatten(g), np.arange(24.0))
    assert g.grid(1, 2).tolist() == [6.0, 18.0]


def test_unflatten_rejects_wrong_size():
    with pytest.raises(ShapeError):
        unflatten(np.zeros(10), (2, 2, 2))


def test_grid_feature_rejects_non_finite():
    with pytest.raises(ValueError):
        GridFeature(np.full((2, 2, 2), np.nan))


def test_class_cosines_examples():
    w = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 0.0]])
    out = class_cosines(np.array([0.0, 3.0, 0.0]), w).data
    assert out[1] == pytest.approx(1.0, abs=1e-15)
    assert out[0] == 0.0


def test_class_cosines_matches_row_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        emb, w = rng.normal(size=(4, 12)), rng.normal(size=(6, 12))
        got = class_cosines(emb, w).data
        for i in range(4):
            for j in range(6):
                ref = emb[i] @ w[j] / (np.linalg.norm(emb[i]) * np.linalg.norm(w[j]))
                assert got[i, j] == pytest.approx(ref, abs=1e-12)
        assert np.all(np.abs(got) <= 1 + 1e-12)


def test_class_cosines_scale_invariant():
    rng = np.random.default_rng(6)
    emb, w = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    base = np.arccos(np.clip(class_cosines(emb, w).data, -1, 1))
    scaled_w = w * rng.uniform(0.1, 10, size=(5, 1))
    scaled = np.arccos(np.clip(class_cosines(emb * 7.5, scaled_w).data, -1, 1))
    np.testing.assert_allclose(scaled, base, atol=1e-7)
    np.testing.assert_allclose(class_cosines(emb * 7.5, scaled_w).data, class_cosines(emb, w).data,
                               atol=1e-12, rtol=0)


def test_class_weights_rows_equal_identities():
    assert ClassWeights(17, 40).weight.shape == (17, 40)
    assert ClassWeights(17, 40).n_classes == 17
