import numpy as np
import pytest
from numpy.testing import assert_allclose

from vxadapt.exceptions import VxError
from vxadapt.tensor import (
    INFERENCE,
    TRAIN,
    RunningStats,
    Tape,
    Tensor,
    backward,
    batch_norm,
    dense,
    l1_loss,
    leaky_relu,
    reshape,
    sigmoid,
    stop_gradient,
)
from vxadapt.testing import assert_error, assert_gradients_match

# -----------------------------------------------------------------------------

SEEDS = range(20)


def away_from_zero(rng, shape, margin=1e-2):
    values = rng.uniform(-1, 1, size=shape)
    return np.sign(values) * (margin + np.abs(values))


def weighted_sum(out, weights):
    return (out * weights).sum()


# -----------------------------------------------------------------------------


def test_arithmetic():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 5.0])

    assert_allclose((a + b).data, [4, 7])
    assert_allclose((a - b).data, [-2, -3])
    assert_allclose((a * b).data, [3, 10])
    assert_allclose((a / 2).data, [0.5, 1])
    assert_allclose((-a).data, [-1, -2])
    assert_allclose((2 - a).data, [1, 0])
    assert a.sum().item() == 3
    assert a.mean().item() == 1.5


def test_scalars_keep_their_shape():
    assert Tensor(2.0).shape == ()
    assert Tensor([1.0, 2.0]).sum().shape == ()
    assert l1_loss(Tensor([1.0]), Tensor([0.0])).shape == ()


def test_operations_outside_tape_are_constants():
    out = Tensor([1.0]) + 1
    assert out.node is None
    assert out.tape is None


def test_item_requires_scalar():
    with pytest.raises(VxError) as excinfo:
        Tensor([1.0, 2.0]).item()

    assert_error(excinfo, 1, [{"code": "invalid_shape.not_scalar"}])


def test_leaky_relu():
    out = leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.2)
    assert_allclose(out.data, [-0.2, 0, 2])


def test_leaky_relu_slope_range():
    with pytest.raises(VxError) as excinfo:
        leaky_relu(Tensor([1.0]), 1.5)

    assert_error(excinfo, 1, [{"code": "invalid_value.slope"}])


def test_sigmoid_is_stable():
    out = sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
    assert_allclose(out.data, [1e-7, 0.5, 1 - 1e-7])


def test_sigmoid_stays_inside_unit_interval(make_params):
    x = np.array([-1000.0, -40.0, 40.0, 1000.0])
    out = sigmoid(Tensor(x)).data

    assert (out > 0).all()
    assert (out < 1).all()
    assert_allclose(out, [1e-7, 1e-7, 1 - 1e-7, 1 - 1e-7])

    params = make_params(x=x)
    with Tape() as tape:
        tape.watch(params)
        loss = sigmoid(params.tensor("x")).sum()
    assert not backward(tape, loss, params)["x"].any()


def test_l1_loss():
    assert l1_loss(Tensor([1.0, -1.0]), Tensor([0.0, 1.0])).item() == 1.5


def test_l1_loss_shape_mismatch():
    with pytest.raises(VxError) as excinfo:
        l1_loss(Tensor([1.0]), Tensor([1.0, 2.0]))

    assert_error(excinfo, 1, [{"code": "invalid_shape.l1_loss"}])


def test_l1_loss_gradient_is_sign_over_count(make_params):
    a = np.array([[0.5, -1.0], [2.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.5]])
    params = make_params(a=a)

    with Tape() as tape:
        tape.watch(params)
        loss = l1_loss(params.tensor("a"), b)
    grads = backward(tape, loss, params)

    assert_allclose(grads["a"], np.sign(a - b) / a.size)


def test_dense():
    out = dense(Tensor(np.ones((2, 3))), np.ones((3, 4)), np.arange(4.0))
    assert_allclose(out.data, [[3, 4, 5, 6], [3, 4, 5, 6]])


def test_dense_shape_errors():
    with pytest.raises(VxError) as excinfo:
        dense(Tensor(np.ones((2, 3))), np.ones((4, 4)), np.zeros(4))
    assert_error(excinfo, 1, [{"code": "invalid_shape.dense"}])

    with pytest.raises(VxError) as excinfo:
        dense(Tensor(np.ones((2, 3))), np.ones((3, 4)), np.zeros(3))
    assert_error(excinfo, 1, [{"code": "invalid_shape.dense_bias"}])


def test_reshape_error():
    with pytest.raises(VxError) as excinfo:
        reshape(Tensor(np.ones(6)), (4, 2))

    assert_error(excinfo, 1, [{"code": "invalid_shape.reshape"}])


def test_non_finite():
    with pytest.raises(VxError) as excinfo:
        Tensor([np.inf]) * 0

    assert_error(
        excinfo, 1, [{"code": "non_finite", "operation": "multiply"}]
    )


# -----------------------------------------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed, make_params):
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(3, 4))
    params = make_params(
        a=away_from_zero(rng, (3, 4)), b=rng.normal(size=(3, 4))
    )

    def fn(p):
        a = p.tensor("a")
        b = p.tensor("b")
        out = sigmoid(leaky_relu(a, 0.2) * b) + abs(a) - b / 3
        return weighted_sum(out, weights)

    assert_gradients_match(fn, params)


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_gradient(seed, make_params):
    rng = np.random.default_rng(seed)
    params = make_params(x=rng.normal(scale=3, size=5))
    weights = rng.normal(size=5)

    assert_gradients_match(
        lambda p: weighted_sum(sigmoid(p.tensor("x")), weights),
        params,
        rtol=1e-4,
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_l1_loss_gradients(seed, make_params):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(2, 5))
    params = make_params(a=b + away_from_zero(rng, (2, 5)), b=b)

    assert_gradients_match(
        lambda p: l1_loss(p.tensor("a"), p.tensor("b")), params
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed, make_params):
    rng = np.random.default_rng(seed)
    params = make_params(
        x=rng.normal(size=(3, 2, 2)),
        w=rng.normal(size=(4, 5)),
        b=rng.normal(size=5),
    )
    weights = rng.normal(size=(3, 5))

    assert_gradients_match(
        lambda p: weighted_sum(
            dense(p.tensor("x"), p.tensor("w"), p.tensor("b")), weights
        ),
        params,
    )


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", (TRAIN, INFERENCE))
def test_batch_norm_gradients(seed, mode, make_params):
    rng = np.random.default_rng(seed)
    params = make_params(
        x=rng.normal(size=(3, 2, 2, 2)),
        scale=rng.uniform(0.5, 2, size=2),
        shift=rng.normal(size=2),
    )
    weights = rng.normal(size=(3, 2, 2, 2))
    stats = RunningStats(rng.normal(size=2), rng.uniform(0.5, 2, size=2))

    def fn(p):
        out = batch_norm(
            p.tensor("x"),
            p.tensor("scale"),
            p.tensor("shift"),
            mode,
            RunningStats(stats.mean, stats.var),
        )
        return weighted_sum(out, weights)

    assert_gradients_match(fn, params)


# -----------------------------------------------------------------------------


def test_batch_norm_standardizes(rng):
    x = rng.normal(3, 2, size=(8, 3, 4, 4))
    out = batch_norm(x, np.ones(3), np.zeros(3), TRAIN).data

    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batch_norm_running_stats(rng):
    x = rng.normal(size=(4, 2, 3))
    stats = RunningStats(np.zeros(2), np.ones(2))
    batch_norm(x, np.ones(2), np.zeros(2), TRAIN, stats)

    assert stats.updated
    assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2)))
    assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2)))


def test_batch_norm_inference_is_pure(rng):
    x = rng.normal(size=(1, 2, 3))
    mean = np.array([0.5, -0.5])
    var = np.array([2.0, 0.5])
    stats = RunningStats(mean, var)

    out = batch_norm(x, np.ones(2), np.zeros(2), INFERENCE, stats)

    assert stats.mean is mean
    assert stats.var is var
    assert not stats.updated
    assert_allclose(
        out.data,
        (x - mean[None, :, None]) / np.sqrt(var[None, :, None] + 1e-5),
    )


def test_batch_norm_zero_variance():
    out = batch_norm(np.ones((2, 1, 2)), np.ones(1), np.zeros(1), TRAIN)
    assert_allclose(out.data, 0)


def test_batch_norm_needs_two_items():
    with pytest.raises(VxError) as excinfo:
        batch_norm(np.ones((1, 2, 3)), np.ones(2), np.zeros(2), TRAIN)

    assert_error(excinfo, 1, [{"code": "invalid_shape.batch_norm_batch"}])


def test_batch_norm_mode():
    with pytest.raises(VxError) as excinfo:
        batch_norm(np.ones((2, 2)), np.ones(2), np.zeros(2), "eval")

    assert_error(excinfo, 1, [{"code": "invalid_value.mode"}])


# -----------------------------------------------------------------------------


def test_backward_returns_zeros_for_unused(make_params):
    params = make_params(a=np.ones(3), unused=np.ones(2))

    with Tape() as tape:
        tape.watch(params)
        loss = params.tensor("a").sum()
    grads = backward(tape, loss, params)

    assert_allclose(grads["a"], 1)
    assert_allclose(grads["unused"], 0)


def test_backward_structure(make_params):
    first = make_params(a=np.ones(2))
    second = make_params(b=np.ones(2))

    with Tape() as tape:
        tape.watch(first, second)
        loss = (first.tensor("a") * second.tensor("b") * 2).sum()
    grads_first, grads_second = backward(tape, loss, [first, second])

    assert_allclose(grads_first["a"], 2)
    assert_allclose(grads_second["b"], 2)


def test_backward_accumulates_reuse(make_params):
    params = make_params(a=np.array([3.0]))

    with Tape() as tape:
        tape.watch(params)
        a = params.tensor("a")
        loss = (a * a + a).sum()
    grads = backward(tape, loss, params)

    assert_allclose(grads["a"], [7])


def test_backward_requires_scalar(make_params):
    params = make_params(a=np.ones(2))

    with Tape() as tape:
        tape.watch(params)
        out = params.tensor("a") * 2

    with pytest.raises(VxError) as excinfo:
        backward(tape, out, params)

    assert_error(excinfo, 1, [{"code": "invalid_shape.non_scalar_loss"}])


def test_stop_gradient(make_params):
    params = make_params(a=np.ones(2))

    with Tape() as tape:
        tape.watch(params)
        a = params.tensor("a")
        loss = (stop_gradient(a * 3) * a).sum()
    grads = backward(tape, loss, params)

    assert_allclose(grads["a"], 3)


def test_unwatched_params_are_constants(make_params):
    params = make_params(a=np.ones(2))

    with Tape() as tape:
        loss = params.tensor("a").sum()

    assert loss.node is None
    assert len(tape) == 0
    assert_allclose(backward(tape, loss, params)["a"], 0)


def test_buffers_get_no_gradient(make_params):
    params = make_params(["a"], a=np.ones(2), stat=np.ones(2))

    with Tape() as tape:
        tape.watch(params)
        loss = (params.tensor("a") * params.tensor("stat")).sum()
    grads = backward(tape, loss, params)

    assert set(grads) == {"a"}
