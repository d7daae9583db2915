
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xcos import autodiff as ad
from xcos.autodiff import Parameter, ShapeError, Tensor

from oracles import conv_oracle, scalar_cosine, scalar_softmax


finite = st.floats(-5, 5, allow_nan=False)


# conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 6))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_averaging_constant():
    x = np.full((1, 6, 6), 3.25)
    out = ad.conv2d(x, np.ones((1, 1, 3, 3)) / 9, padding=1).data
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 3.25, atol=1e-14)


def test_conv_matches_loop_oracle_small():
    rng = np.random.default_rng(1)
    x, k = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3))
    np.testing.assert_allclose(ad.conv2d(x, k).data, conv_oracle(x, k, None, 1, 0), atol=1e-12, rtol=0)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
def test_conv_matches_loop_oracle_matrix(stride, padding):
    rng = np.random.default_rng(10 * stride + padding)
    for _ in range(10):
        c_in, c_out = rng.integers(1, 5, size=2)
        h, w = rng.integers(3, 9, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        x, k, b = rng.normal(size=(c_in, h, w)), rng.normal(size=(c_out, c_in, kh, kw)), rng.normal(size=c_out)
        got = ad.conv2d(x, k, b, stride=stride, padding=padding).data
        np.testing.assert_allclose(got, conv_oracle(x, k, b, stride, padding), atol=1e-12, rtol=0)


def test_conv_output_shape_formula():
    out = ad.conv2d(np.zeros((2, 7, 9)), np.zeros((3, 2, 3, 2)), stride=2, padding=1)
    assert out.shape == (3, (7 + 2 - 3) // 2 + 1, (9 + 2 - 2) // 2 + 1)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3))
    batched = ad.conv2d(x, k, stride=2, padding=1).data
    for n in range(3):
        np.testing.assert_array_equal(batched[n], ad.conv2d(x[n], k, stride=2, padding=1).data)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="channel"):
        ad.conv2d(np.zeros((3, 5, 5)), np.zeros((2, 4, 3, 3)))


def test_conv_oversize_kernel_rejected():
    with pytest.raises(ShapeError):
        ad.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)))


# relu

def test_relu_examples():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not ad.relu(Tensor(-np.arange(1.0, 6.0))).data.any()


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_relu_matches_elementwise(x):
    assert list(ad.relu(Tensor(x)).data) == [v if v > 0 else 0.0 for v in x]


def test_relu_gradient_is_step():
    p = Parameter([-2.0, -0.5, 0.5, 3.0])
    ad.backward(ad.relu(p).sum())
    np.testing.assert_array_equal(p.grad, [0, 0, 1, 1])


# l2_normalize and cosine

def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    unit = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(ad.l2_normalize(Tensor(unit)).data, unit)
    np.testing.assert_array_equal(ad.l2_normalize(Tensor(np.zeros(4)), epsilon=1e-12).data, 0.0)


def test_l2_normalize_no_gradient_inside_guard():
    v = Parameter(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]]))
    ad.backward(ad.l2_normalize(v, axis=1).sum())
    assert not v.grad[0].any()
    assert np.abs(v.grad[1]).max() > 0 and np.isfinite(v.grad).all()


def test_cosine_examples():
    v = Tensor([0.3, -1.2, 2.0])
    assert ad.cosine(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert ad.cosine(Tensor(np.zeros(3)), v).item() == 0.0


def test_cosine_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        u, v = rng.normal(size=32), rng.normal(size=32)
        assert ad.cosine(Tensor(u), Tensor(v)).item() == pytest.approx(scalar_cosine(u, v), abs=1e-12)


@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=finite),
       st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(u, v, alpha):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    c = ad.cosine(Tensor(u), Tensor(v)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert ad.cosine(Tensor(v), Tensor(u)).item() == pytest.approx(c, abs=1e-12)
    assert ad.cosine(Tensor(alpha * u), Tensor(v)).item() == pytest.approx(c, abs=1e-12)


# softmax

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_flat(Tensor(np.full(49, 0.7))).data, 1 / 49, atol=1e-15)
    out = ad.softmax_flat(Tensor([0.0, 800.0])).data
    assert out[0] < 1e-300 and out[1] == pytest.approx(1.0)
    assert np.isfinite(out).all()


def test_softmax_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.normal(scale=3, size=49)
        np.testing.assert_allclose(ad.softmax_flat(Tensor(x)).data, scalar_softmax(x), atol=1e-12, rtol=0)


@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, shift):
    out = ad.softmax_flat(Tensor(x)).data
    assert (out > 0).all()
    assert abs(out.sum() - 1) < 1e-12
    np.testing.assert_allclose(ad.softmax_flat(Tensor(x + shift)).data, out, atol=1e-12, rtol=0)


def test_softmax_flat_keeps_shape():
    out = ad.softmax_flat(Tensor(np.zeros((7, 7))))
    assert out.shape == (7, 7)


# concat_channels

def test_concat_full_scale_shape():
    assert ad.concat_channels(Tensor(np.zeros((16, 7, 7))), Tensor(np.ones((16, 7, 7)))).shape == (32, 7, 7)


def test_concat_round_trip():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 4, 5))
    out = ad.concat_channels(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(out[:3], a)
    np.testing.assert_array_equal(out[3:], b)


def test_concat_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((2, 4, 5))), Tensor(np.zeros((2, 4, 6))))
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((0, 4, 5))), Tensor(np.zeros((2, 4, 5))))


# backward

def test_backward_sum_of_squares():
    x = np.random.default_rng(6).normal(size=(3, 4))
    p = Parameter(x)
    ad.backward((p * p).sum())
    np.testing.assert_array_equal(p.grad, 2 * x)


def test_backward_rejects_non_scalar():
    p = Parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(p * 2.0)


def test_backward_accumulates():
    p = Parameter([1.0, 2.0])
    ad.backward(p.sum())
    ad.backward((3.0 * p).sum())
    np.testing.assert_array_equal(p.grad, [4.0, 4.0])


def test_backward_visits_shared_node_once():
    # y used twice: d/dp (y + y) with y = p^2 is 4p, not 8p or 2p
    p = Parameter([1.5])
    y = p * p
    ad.backward((y + y).sum())
    np.testing.assert_allclose(p.grad, [6.0])


def test_forward_backward_leaves_values_unchanged():
    rng = np.random.default_rng(7)
    k = Parameter(rng.normal(size=(2, 3, 3, 3)))
    x = Tensor(rng.normal(size=(3, 6, 6)))
    before_k, before_x = k.data.copy(), x.data.copy()
    out = ad.conv2d(x, k, padding=1)
    snapshot = out.data.copy()
    ad.backward(ad.relu(out).sum())
    np.testing.assert_array_equal(k.data, before_k)
    np.testing.assert_array_equal(x.data, before_x)
    np.testing.assert_array_equal(out.data, snapshot)
    assert k.grad.shape == k.data.shape


# sgd

def test_sgd_examples():
    w = Parameter([1.0])
    ad.sgd_step([w], 0.1)
    assert w.data[0] == 1.0
    w.grad = np.array([2.0])
    ad.sgd_step([w], 0.1)
    assert w.data[0] == pytest.approx(0.8, abs=1e-15)
    assert w.grad[0] == 0.0


def test_sgd_quadratic_bowl():
    w = Parameter([0.0])
    for _ in range(100):
        ad.backward(((w - 3.0) ** 2).sum())
        ad.sgd_step([w], 0.1)
    assert abs(w.data[0] - 3.0) < 1e-6


def test_sgd_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        ad.sgd_step([Parameter([1.0])], 0.0)


# grad_check

def test_grad_check_linear_is_exact():
    # dyadic values and step keep every float operation exact
    p = Parameter([1.0, -2.0, 3.0, 0.5, 4.0])
    c = np.array([0.5, 2.0, -1.0, 4.0, 0.25])
    assert ad.grad_check(lambda: (p * c).sum(), [p], eps=2.0 ** -20) < 1e-10


def test_grad_check_linear_random_is_tight():
    rng = np.random.default_rng(8)
    p = Parameter(rng.normal(size=5))
    c = rng.normal(size=5)
    assert ad.grad_check(lambda: (p * c).sum(), [p]) < 1e-7


def test_grad_check_rejects_bad_eps():
    p = Parameter([1.0])
    with pytest.raises(ValueError):
        ad.grad_check(lambda: p.sum(), [p], eps=1e-2)


def test_grad_check_cosine():
    rng = np.random.default_rng(9)
    u, v = Parameter(rng.normal(size=8)), Parameter(rng.normal(size=8))
    assert ad.grad_check(lambda: ad.cosine(u, v), [u, v]) < 1e-6


def test_grad_check_detects_wrong_gradient():
    p = Parameter([0.7, -0.4])

    def broken():
        out = ad.exp(p)
        out._backward = lambda g: (2 * g,)  # wrong on purpose
        return out.sum()

    assert ad.grad_check(broken, [p]) > 0.1


def _op_cases(rng):
    """(name, scalar function, parameters) for every differentiable op."""
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(3, 4)))
    pos = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    m = Parameter(rng.normal(size=(4, 5)))
    k = Parameter(rng.normal(size=(2, 3, 3, 3)))
    bias = Parameter(rng.normal(size=2))
    x = Parameter(rng.normal(size=(2, 3, 6, 6)))
    inside = Parameter(rng.uniform(-0.9, 0.9, size=(3, 4)))
    # keep relu/clip inputs away from their kinks so central differences are valid
    kinked = Parameter(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return [
        ("add", lambda: ((a + b) * w).sum(), [a, b]),
        ("sub", lambda: ((a - b) * w).sum(), [a, b]),
        ("mul", lambda: (a * b).sum(), [a, b]),
        ("div", lambda: (a / pos).sum(), [a, pos]),
        ("power", lambda: (pos ** 1.7).sum(), [pos]),
        ("exp", lambda: (ad.exp(a) * w).sum(), [a]),
        ("log", lambda: (ad.log(pos) * w).sum(), [pos]),
        ("relu", lambda: (ad.relu(kinked) * w).sum(), [kinked]),
        ("clip", lambda: (ad.clip(kinked, -0.05, 0.05) * w + kinked * 0.0).sum(), [kinked]),
        ("arccos", lambda: (ad.arccos(inside) * w).sum(), [inside]),
        ("cos", lambda: (ad.cos(pos) * w).sum(), [pos]),
        ("sum_axis", lambda: (a.sum(axis=1) ** 2).sum(), [a]),
        ("mean", lambda: (a.mean(axis=0) ** 2).sum(), [a]),
        ("reshape", lambda: (a.reshape(4, 3) * w.reshape(4, 3)).sum(), [a]),
        ("transpose", lambda: (a.transpose() * w.T).sum(), [a]),
        ("getitem", lambda: (a[1:, ::2] ** 2).sum(), [a]),
        ("matmul", lambda: ((a @ m) ** 2).sum(), [a, m]),
        ("concat", lambda: (ad.concat([a, b], axis=1) ** 2 * 0.5).sum(), [a, b]),
        ("l2_normalize", lambda: (ad.l2_normalize(a, axis=1) * w).sum(), [a]),
        ("cosine", lambda: (ad.cosine(a, b, axis=1) * w[:, 0]).sum(), [a, b]),
        ("softmax", lambda: (ad.softmax(a, axis=1) * w).sum(), [a]),
        ("softmax_flat", lambda: (ad.softmax_flat(a) * w).sum(), [a]),
        ("log_softmax", lambda: (ad.log_softmax(a, axis=1) * w).sum(), [a]),
        ("conv2d", lambda: (ad.conv2d(x, k, bias, stride=2, padding=1) ** 2).sum(), [x, k, bias]),
        ("concat_channels", lambda: (ad.concat_channels(x, x * 2.0) ** 2).sum(), [x]),
    ]


@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(seed):
    rng = np.random.default_rng(100 + seed)
    for name, f, params in _op_cases(rng):
        err = ad.grad_check(f, params)
        assert err < 1e-5, f"{name}: relative error {err:.2e}"


def test_parameter_grad_shape_matches_value():
    p = Parameter(np.zeros((2, 3)))
    assert p.grad.shape == p.data.shape
    ad.backward((p * 2).sum())
    assert p.grad.shape == p.data.shape
    p.zero_grad()
    assert not p.grad.any()


def test_finite_outputs_for_finite_inputs():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(scale=50, size=(4, 6)))
    for out in (ad.softmax(x, 1), ad.log_softmax(x, 1), ad.l2_normalize(x, 1), ad.relu(x), ad.cos(x)):
        assert np.isfinite(out.data).all()
