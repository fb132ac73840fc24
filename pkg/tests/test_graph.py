import numpy as np
import pytest

from bpa import graph
from bpa.graph import CrossEntropy, GraphError, NegTargetLogit
from bpa.models import build, init_weights
from bpa.rules import (
    VANILLA,
    BackwardPolicy,
    GradMask,
    PolicyError,
    PoolRule,
    ReluRule,
    ResidualRule,
)
from bpa.tensor import ShapeError

from helpers import activation_pattern, central_diff, loss_fn, max_rel_error, random_net, random_weights

POLICIES = [
    BackwardPolicy(relu=ReluRule("bpa"), pool=PoolRule("bpa", 10.0)),
    BackwardPolicy(relu=ReluRule("linbp"), residual=ResidualRule("linbp")),
    BackwardPolicy(residual=ResidualRule("sgm", 0.5)),
    BackwardPolicy(relu=ReluRule("recover", 0.5), pool=PoolRule("recover", prob=0.5)),
    BackwardPolicy(relu=ReluRule("bpa"), relu_start=5, pool=PoolRule("bpa", 1.0), mask=GradMask(3, 0.5)),
]


def _vanilla_grad(model, weights, x, labels):
    tape = graph.forward(model, weights, x)
    _, d = graph.loss_and_grad(tape, CrossEntropy(labels))
    return graph.backward(tape, VANILLA, d)


@pytest.mark.parametrize("seed", range(24))
def test_vanilla_gradient_matches_finite_differences(seed):
    model = random_net(seed)
    w = random_weights(model, seed)
    x = np.random.default_rng(seed).normal(size=(1,) + model.input_shape)
    labels = np.array([seed % model.num_classes])
    g = _vanilla_grad(model, w, x, labels)
    num, smooth = central_diff(loss_fn(model, w, labels), x.copy(), 1e-3, lambda z: activation_pattern(model, w, z))
    assert smooth.mean() > 0.75  # the kink filter must leave most coordinates checked
    assert max_rel_error(g, num, 1e-6, smooth) < 1e-3


def test_three_layer_net_on_8x8():
    from bpa.models import _Builder

    b = _Builder(1, 8)
    b.conv(3, 3, bn=False, bias=True)
    b.maxpool(2, 2)
    b.head(3)
    model = b.finish("three-layer", 3)
    w = random_weights(model, 0)
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 8))
    g = _vanilla_grad(model, w, x, np.array([2]))
    num, smooth = central_diff(loss_fn(model, w, np.array([2])), x.copy(), 1e-3, lambda z: activation_pattern(model, w, z))
    assert max_rel_error(g, num, 1e-6, smooth) < 1e-3


def test_weight_gradients_match_finite_differences():
    model = random_net(3)
    w = random_weights(model, 3)
    x = np.random.default_rng(0).normal(size=(2,) + model.input_shape)
    labels = np.array([0, 1])
    for training in (False, True):
        tape = graph.forward(model, w, x, training=training)
        _, d = graph.loss_and_grad(tape, CrossEntropy(labels))
        grads = {}
        graph.backward(tape, VANILLA, d, param_grads=grads)
        for name in sorted(grads)[:6]:
            def f(p, name=name):
                ww = dict(w, **{name: p})
                logits = graph.forward(model, ww, x, training=training).logits
                return graph.loss_values(logits, CrossEntropy(labels)).sum()

            num = central_diff(f, w[name].copy(), 1e-6)
            assert np.allclose(grads[name], num, rtol=1e-4, atol=1e-6), (name, training)


def test_batchnorm_training_input_gradient():
    model = random_net(2)
    w = random_weights(model, 2)
    x = np.random.default_rng(1).normal(size=(3,) + model.input_shape)
    labels = np.array([0, 1, 2])
    tape = graph.forward(model, w, x, training=True)
    _, d = graph.loss_and_grad(tape, CrossEntropy(labels))
    g = graph.backward(tape, VANILLA, d)

    def f(z):
        return graph.loss_values(graph.forward(model, w, z, training=True).logits, CrossEntropy(labels)).sum()

    num = central_diff(f, x.copy(), 1e-6)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("arch", ["resnet-small", "vgg-small", "densenet-tiny"])
def test_forward_invariance_across_policies(arch):
    model = build(arch)
    w = init_weights(model, 0)
    x = np.random.default_rng(0).random((100,) + model.input_shape).astype(np.float32)
    labels = np.arange(100) % 10
    base = graph.forward(model, w, x)
    base_loss, _ = graph.loss_and_grad(base, CrossEntropy(labels))
    for k, policy in enumerate(POLICIES):
        g, losses, logits = graph.input_gradient(model, w, policy, x, CrossEntropy(labels), np.random.default_rng(k))
        assert np.array_equal(logits, base.logits)
        assert losses.sum() == base_loss
        assert g.shape == x.shape


def test_tape_replay_reproduces_logits():
    model = build("resnet-small")
    w = init_weights(model, 1)
    x = np.random.default_rng(2).random((4, 3, 32, 32)).astype(np.float32)
    a = graph.forward(model, w, x)
    b = graph.forward(model, w, x)
    assert np.array_equal(a.logits, b.logits)
    assert a.logits.dtype == np.float32


def test_no_dispatch_points_means_identical_gradients():
    model = build("plaincnn")  # no max-pool, no residual: only its ReLUs dispatch
    w = init_weights(model, 0)
    x = np.random.default_rng(0).random((3,) + model.input_shape).astype(np.float32)
    tape = graph.forward(model, w, x)
    _, d = graph.loss_and_grad(tape, CrossEntropy([1, 2, 3]))
    ref = graph.backward(tape, VANILLA, d)
    # every ReLU is outside the policy scope
    for policy in POLICIES[:3]:
        p = BackwardPolicy(relu=policy.relu, relu_start=model.relu_count, pool=policy.pool, residual=policy.residual)
        assert np.array_equal(graph.backward(tape, p, d), ref)


def test_policy_locality():
    model = build("vgg-small")
    w = init_weights(model, 0)
    x = np.random.default_rng(0).random((2,) + model.input_shape).astype(np.float32)
    tape = graph.forward(model, w, x)
    _, d = graph.loss_and_grad(tape, CrossEntropy([3, 4]))
    relu_at = {l.index: i for i, l in enumerate(model.layers) if isinstance(l, graph.ReLU)}
    for k in (2, 5):
        # the two policies differ only in the rule of ReLU k
        rec_a, rec_b = {}, {}
        graph.backward(tape, BackwardPolicy(relu=ReluRule("bpa"), relu_start=k), d, record=rec_a)
        graph.backward(tape, BackwardPolicy(relu=ReluRule("bpa"), relu_start=k + 1), d, record=rec_b)
        for i in rec_a:
            same = np.array_equal(rec_a[i], rec_b[i])
            assert same == (i > relu_at[k]), (k, i)


def test_ghost_forward():
    model = build("resnet-small")
    w = init_weights(model, 0)
    x = np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)
    plain = graph.forward(model, w, x).logits
    zero = graph.forward(model, w, x, ghost_lambda=0.0, rng=np.random.default_rng(1)).logits
    assert np.array_equal(plain, zero)
    a = graph.forward(model, w, x, ghost_lambda=0.22, rng=np.random.default_rng(5)).logits
    b = graph.forward(model, w, x, ghost_lambda=0.22, rng=np.random.default_rng(5)).logits
    c = graph.forward(model, w, x, ghost_lambda=0.22, rng=np.random.default_rng(6)).logits
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, plain)


def test_ghost_gradient_is_exact_for_perturbed_net():
    model = random_net(7)
    w = random_weights(model, 7)
    x = np.random.default_rng(3).normal(size=(1,) + model.input_shape)

    def tape_of(z):
        return graph.forward(model, w, z, ghost_lambda=0.22, rng=np.random.default_rng(9))

    tape = tape_of(x)
    _, d = graph.loss_and_grad(tape, CrossEntropy([1]))
    g = graph.backward(tape, VANILLA, d)
    num = central_diff(lambda z: graph.loss_values(tape_of(z).logits, CrossEntropy([1])).sum(), x.copy(), 1e-6)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("arch", ["resnet-small", "vgg-small"])
def test_degenerate_policies_bit_exact(arch):
    model = build(arch)
    w = init_weights(model, 0)
    x = np.random.default_rng(0).random((4,) + model.input_shape).astype(np.float32)
    tape = graph.forward(model, w, x)
    _, d = graph.loss_and_grad(tape, CrossEntropy([0, 1, 2, 3]))

    def run(policy, seed=11):
        return graph.backward(tape, policy, d, np.random.default_rng(seed))

    vanilla = run(VANILLA)
    assert np.array_equal(run(BackwardPolicy(relu=ReluRule("recover", 0.0))), vanilla)
    assert np.array_equal(run(BackwardPolicy(relu=ReluRule("recover", 1.0))), run(BackwardPolicy(relu=ReluRule("linbp"))))
    assert np.array_equal(run(BackwardPolicy(residual=ResidualRule("sgm", 1.0))), vanilla)
    for b in model.stage_boundaries:
        assert np.array_equal(run(BackwardPolicy(mask=GradMask(b, 0.0))), vanilla)
    masked = run(BackwardPolicy(mask=GradMask(model.stage_boundaries[-1], 1.0)))
    assert not masked.any()


def test_cross_entropy_examples():
    v, d = graph.loss_and_grad(np.zeros((1, 2), np.float32), CrossEntropy([0]))
    assert np.isclose(v, np.log(2))
    assert np.allclose(d, [[-0.5, 0.5]])
    v, _ = graph.loss_and_grad(np.array([[50.0, -50.0, -50.0]]), CrossEntropy([0]))
    assert v < 1e-20


def test_neg_target_logit_example():
    v, d = graph.loss_and_grad(np.array([[1.0, 2.0, 3.0]]), NegTargetLogit([2]))
    assert v == -3.0
    assert d.tolist() == [[0, 0, -1]]


def test_label_range_checked():
    with pytest.raises(ValueError, match="out of range"):
        graph.loss_and_grad(np.zeros((1, 3)), CrossEntropy([3]))


def test_errors():
    model = build("vgg-small")
    w = init_weights(model, 0)
    x = np.zeros((1, 3, 32, 32), np.float32)
    with pytest.raises(ShapeError):
        graph.forward(model, w, np.zeros((1, 3, 16, 16), np.float32))
    broken = dict(w)
    del broken["conv1.w"]
    with pytest.raises(GraphError, match="conv1.w"):
        graph.forward(model, broken, x)
    tape = graph.forward(model, w, x)
    with pytest.raises(PolicyError):
        graph.backward(tape, BackwardPolicy(mask=GradMask(len(model.layers), 0.5)), np.zeros((1, 10), np.float32))
    with pytest.raises(ShapeError):
        graph.backward(tape, VANILLA, np.zeros((1, 9), np.float32))


def test_per_sample_rng_is_batch_invariant():
    from bpa.rng import sample_rngs

    model = build("resnet-small")
    w = init_weights(model, 0)
    x = np.random.default_rng(0).random((4, 3, 32, 32)).astype(np.float32)
    policy = BackwardPolicy(relu=ReluRule("recover", 0.3), pool=PoolRule("recover", prob=0.3), ghost_lambda=0.22)
    labels = np.array([0, 1, 2, 3])
    whole, _, _ = graph.input_gradient(model, w, policy, x, CrossEntropy(labels), sample_rngs(1, range(4)))
    half, _, _ = graph.input_gradient(model, w, policy, x[2:], CrossEntropy(labels[2:]), sample_rngs(1, [2, 3]))
    assert np.allclose(whole[2:], half, atol=1e-6)
