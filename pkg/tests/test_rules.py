import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpa import tensor as T
from bpa.rules import (
    BackwardPolicy,
    PolicyError,
    PoolRule,
    ReluRule,
    ResidualRule,
    grad_mask,
    maxpool_backward,
    relu_backward,
    relu_derivative,
    residual_backward,
    silu_derivative,
    softmax_window_weights,
)
from bpa.tensor import ParameterError, ShapeError, WindowSpec

from helpers import brute_bpa_pool

FIG3 = np.array(
    [[0.1, -0.2, 1.9, 1.4], [0.0, -0.5, 2.3, 0.7], [-0.4, 0.9, 1.0, -2.0], [0.7, 0.6, 0.5, 1.7]],
    dtype=np.float32,
)


def _silu(z):
    return z / (1 + np.exp(-z))


# ---------------------------------------------------------------------------
# ReLU


def test_bpa_relu_point_values():
    z = np.array([0.0, 10.0, -10.0])
    d = silu_derivative(z)
    assert d[0] == 0.5
    h = 1e-5
    fd = (_silu(z + h) - _silu(z - h)) / (2 * h)
    assert np.allclose(d, fd, atol=1e-9)
    assert abs(d[1] - 1.000408) < 1e-6
    # negative: SiLU dips below zero for z < 0
    assert abs(d[2] - (-4.0856e-4)) < 1e-7


def test_bpa_relu_matches_finite_differences_on_grid():
    z = np.round(np.arange(-10.0, 10.0 + 1e-9, 0.01), 10)
    h = 1e-5
    fd = (_silu(z + h) - _silu(z - h)) / (2 * h)
    assert np.max(np.abs(silu_derivative(z) - fd)) < 1e-6


def test_bpa_relu_bounded():
    z = np.linspace(-50, 50, 100001)
    d = silu_derivative(z)
    assert np.abs(d).max() <= 1.1
    assert d.min() > -0.1 and d.max() < 1.1


def test_vanilla_relu_zero_at_zero():
    z = np.array([-1.0, 0.0, 1e-12, 2.0], np.float32)
    assert relu_derivative(ReluRule(), z).tolist() == [0, 0, 1, 1]
    assert relu_derivative(ReluRule("linbp"), z).tolist() == [1, 1, 1, 1]


def test_recover_degenerate_probabilities_bit_exact():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3, 5, 5)).astype(np.float32)
    up = rng.normal(size=z.shape).astype(np.float32)
    g0 = relu_backward(ReluRule("recover", 0.0), z, up, np.random.default_rng(1))
    g1 = relu_backward(ReluRule("recover", 1.0), z, up, np.random.default_rng(1))
    assert np.array_equal(g0, relu_backward(ReluRule(), z, up))
    assert np.array_equal(g1, relu_backward(ReluRule("linbp"), z, up))


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_recover_flip_rate_and_determinism(p):
    z = -np.abs(np.random.default_rng(5).normal(size=10000))  # all zeros of the derivative
    a = relu_derivative(ReluRule("recover", p), z, np.random.default_rng(7))
    b = relu_derivative(ReluRule("recover", p), z, np.random.default_rng(7))
    assert np.array_equal(a, b)
    assert abs(a.mean() - p) <= 0.02


def test_relu_shape_mismatch():
    with pytest.raises(ShapeError):
        relu_backward(ReluRule(), np.zeros(3), np.zeros(4))


def test_rule_parameter_validation():
    with pytest.raises(ParameterError):
        ReluRule("recover", 1.5)
    with pytest.raises(ParameterError):
        PoolRule("bpa", temperature=-1)
    with pytest.raises(ParameterError):
        ResidualRule("sgm", gamma=0.0)
    with pytest.raises(PolicyError):
        ReluRule("gelu")
    with pytest.raises(PolicyError):
        BackwardPolicy(relu_start=-1)


def test_relu_start_scope():
    p = BackwardPolicy(relu=ReluRule("bpa"), relu_start=3)
    assert p.relu_rule_for(2).kind == "vanilla"
    assert p.relu_rule_for(3).kind == "bpa"
    assert p.relu_rule_for(10**6).kind == "bpa"


# ---------------------------------------------------------------------------
# max-pool


def _pool_inputs(seed, shape=(2, 3, 7, 7)):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


@pytest.mark.parametrize("t", [0.0, 1.0, 10.0, 100.0])
def test_bpa_window_weights_sum_to_one(t):
    x = _pool_inputs(0) * 5
    for spec in (WindowSpec.square(3, 2), WindowSpec.square(3, 2, 1), WindowSpec.square(2, 2)):
        w = softmax_window_weights(x, spec, t)
        assert np.max(np.abs(w.sum(axis=(-2, -1)) - 1)) <= 1e-5


def test_bpa_t0_is_exactly_uniform():
    x = _pool_inputs(1)
    w = softmax_window_weights(x, WindowSpec.square(3, 2), 0.0)
    assert np.array_equal(w, np.full_like(w, 1 / 9))
    w2 = softmax_window_weights(x, WindowSpec.square(2, 2), 0.0)
    assert np.array_equal(w2, np.full_like(w2, 0.25))


def test_bpa_large_t_concentrates_on_argmax():
    rng = np.random.default_rng(2)
    spec = WindowSpec.square(2, 2)
    # distinct values on a 0.1 lattice -> every window has a unique max separated by >= 0.1
    x = (rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.1).astype(np.float32)
    w = softmax_window_weights(x, spec, 1000.0)
    _, arg = T.maxpool_forward(x, spec)
    routed = maxpool_backward(PoolRule("bpa", 1000.0), x, spec, arg, np.ones_like(arg, dtype=np.float32))
    vanilla = maxpool_backward(PoolRule(), x, spec, arg, np.ones_like(arg, dtype=np.float32))
    assert w.max(axis=(-2, -1)).min() >= 0.999
    assert np.max(np.abs(routed - vanilla)) <= 1e-3


def test_bpa_constant_window_uniform_share():
    x = np.full((1, 1, 4, 4), 0.3, np.float32)
    spec = WindowSpec.square(2, 2)
    _, arg = T.maxpool_forward(x, spec)
    up = np.array([[[[1.0, 2.0], [4.0, 8.0]]]], np.float32)
    for t in (0.0, 1.0, 10.0, 1e4):
        g = maxpool_backward(PoolRule("bpa", t), x, spec, arg, up)
        assert np.allclose(g[0, 0, :2, :2], 0.25) and np.allclose(g[0, 0, 2:, 2:], 2.0)


def test_fig3_window_weights():
    w = softmax_window_weights(FIG3[None, None], WindowSpec.square(2, 2), 10.0)
    top_left = w[0, 0, 0, 0].ravel()
    # brute-force per-window softmax oracle
    v = np.array([0.1, -0.2, 0.0, -0.5])
    ref = np.exp(10 * v) / np.exp(10 * v).sum()
    assert np.allclose(top_left, ref, atol=1e-6)
    assert np.allclose(top_left, [0.70415, 0.03506, 0.25904, 0.00175], atol=1e-5)


@pytest.mark.parametrize("t", [0.0, 1.0, 10.0, 100.0])
@pytest.mark.parametrize("pad", [0, 1])
def test_bpa_fold_matches_brute_force(t, pad):
    x = _pool_inputs(3)
    spec = WindowSpec.square(3, 2, pad)
    _, arg = T.maxpool_forward(x, spec)
    up = np.random.default_rng(4).normal(size=arg.shape).astype(np.float32)
    got = maxpool_backward(PoolRule("bpa", t), x, spec, arg, up)
    ref = brute_bpa_pool(x, up, 3, 2, t, pad)
    assert np.max(np.abs(got - ref)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 10**6),
    st.sampled_from([0.0, 0.5, 1.0, 10.0, 100.0]),
    st.sampled_from([(2, 2, 0), (3, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)]),
)
def test_bpa_gradient_flow_conservation(seed, t, kps):
    k, s, p = kps
    x = _pool_inputs(seed, (1, 2, 7, 7)) * 3
    spec = WindowSpec.square(k, s, p)
    _, arg = T.maxpool_forward(x, spec)
    g = maxpool_backward(PoolRule("bpa", t), x.astype(np.float64), spec, arg, np.ones(arg.shape))
    assert abs(g.sum() - arg.size) < 1e-9


def test_bpa_pool_ignores_argmax():
    x = _pool_inputs(5)
    spec = WindowSpec.square(3, 2)
    _, arg = T.maxpool_forward(x, spec)
    up = np.ones(arg.shape, np.float32)
    a = maxpool_backward(PoolRule("bpa", 10), x, spec, arg, up)
    b = maxpool_backward(PoolRule("bpa", 10), x, spec, np.zeros_like(arg), up)
    assert np.array_equal(a, b)


def test_vanilla_pool_routes_and_accumulates_overlaps():
    x = np.array([[[[0, 0, 0], [0, 5, 0], [0, 0, 0]]]], np.float32)
    spec = WindowSpec.square(2, 1)
    _, arg = T.maxpool_forward(x, spec)
    g = maxpool_backward(PoolRule(), x, spec, arg, np.ones(arg.shape, np.float32))
    assert g[0, 0, 1, 1] == 4 and g.sum() == 4


def test_pool_recover_degenerate():
    x = _pool_inputs(6)
    spec = WindowSpec.square(3, 2, 1)
    _, arg = T.maxpool_forward(x, spec)
    up = np.random.default_rng(0).normal(size=arg.shape).astype(np.float32)
    v = maxpool_backward(PoolRule(), x, spec, arg, up)
    r0 = maxpool_backward(PoolRule("recover", prob=0.0), x, spec, arg, up, np.random.default_rng(0))
    r1 = maxpool_backward(PoolRule("recover", prob=1.0), x, spec, arg, up, np.random.default_rng(0))
    ones = T.fold_windows(np.broadcast_to(up[..., None, None], up.shape + (3, 3)), x.shape, spec)
    assert np.allclose(r0, v, atol=1e-6)
    assert np.allclose(r1, ones, atol=1e-6)


def test_pool_shape_mismatch():
    x = _pool_inputs(0)
    spec = WindowSpec.square(2, 2)
    _, arg = T.maxpool_forward(x, spec)
    with pytest.raises(ShapeError):
        maxpool_backward(PoolRule(), x, spec, arg, np.ones((2, 3, 2, 2), np.float32))


# ---------------------------------------------------------------------------
# residual and mask


def test_residual_rules():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(3, 4, 5, 5)).astype(np.float32)
    s = rng.normal(size=g.shape).astype(np.float32)
    assert np.array_equal(residual_backward(ResidualRule("sgm", 1.0), g, s), residual_backward(ResidualRule(), g, s))
    assert np.allclose(residual_backward(ResidualRule("sgm", 0.5), g, g), 1.5 * g)
    zero = np.zeros_like(g)
    for rule in (ResidualRule(), ResidualRule("sgm", 0.5), ResidualRule("linbp")):
        assert np.array_equal(residual_backward(rule, zero, s, zero), s)
    with pytest.raises(ShapeError):
        residual_backward(ResidualRule(), g, s[:, :2])


def test_linbp_rescale_formula():
    rng = np.random.default_rng(1)
    skip = rng.normal(size=(3, 4, 5, 5))
    lin = rng.normal(size=skip.shape) * 3
    van = rng.normal(size=skip.shape)
    out = residual_backward(ResidualRule("linbp"), lin, skip, van)
    for i in range(3):
        c = np.linalg.norm(skip[i] + van[i]) / np.linalg.norm(skip[i] + lin[i])
        assert np.allclose(out[i], skip[i] + c * lin[i])
    # identical branches: c = 1
    assert np.allclose(residual_backward(ResidualRule("linbp"), van, skip, van), skip + van)


def test_grad_mask():
    g = np.random.default_rng(0).normal(size=(4, 100)).astype(np.float32)
    assert np.array_equal(grad_mask(g, 0.0, np.random.default_rng(1)), g)
    assert not grad_mask(g, 1.0, np.random.default_rng(1)).any()
    a = grad_mask(g, 0.3, np.random.default_rng(2))
    assert np.array_equal(a, grad_mask(g, 0.3, np.random.default_rng(2)))
    kept = a != 0
    assert np.array_equal(a[kept], g[kept])  # no rescaling
    assert abs(kept.mean() - 0.7) < 0.05
    with pytest.raises(ParameterError):
        grad_mask(g, 1.2, np.random.default_rng(0))
