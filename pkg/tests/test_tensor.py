import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demun.optim import Adam, AdamState, adam_step
from demun.tensor import (
    BatchNormState,
    DegenerateBatchError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    batch_norm,
    concat,
    conv2d,
    matvec,
    matvec_T,
    mse,
    no_grad,
    relu,
    stack,
    tsum,
)

from _oracles import conv2d_loops, finite_difference, relative_error, sum_sq_loop


# conv2d

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(k), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv_one_by_one_scale_shift():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d(Tensor(x), Tensor([[[[2.0]]]]), Tensor([0.5]))
    np.testing.assert_array_equal(out.data, [[[[2.5, 4.5], [6.5, 8.5]]]])


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b))
    assert out.shape == (2, 4, 5, 5)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b), rtol=0, atol=1e-12)


def test_conv_5x5_kernel_without_bias(rng):
    x = rng.standard_normal((1, 2, 6, 4))
    w = rng.standard_normal((3, 2, 5, 5))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w)).data, conv2d_loops(x, w, None), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(
    b=st.integers(1, 2), ci=st.integers(1, 3), co=st.integers(1, 3),
    h=st.integers(1, 5), w=st.integers(1, 5), ksz=st.sampled_from([1, 3]), seed=st.integers(0, 2**16),
)
def test_conv_oracle_property(b, ci, co, h, w, ksz, seed):
    r = np.random.default_rng(seed)
    x, k, bias = r.standard_normal((b, ci, h, w)), r.standard_normal((co, ci, ksz, ksz)), r.standard_normal(co)
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), Tensor(bias)).data, conv2d_loops(x, k, bias), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


def test_conv_gradients_match_finite_differences(rng):
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    target = rng.standard_normal((2, 3, 4, 4))
    f = lambda: float(mse(conv2d(x, w, b), target).data)
    backward(mse(conv2d(x, w, b), target))
    for t, fd in zip((x, w, b), finite_difference(f, (x, w, b))):
        assert relative_error(t.grad, fd) < 1e-7


# batch_norm

def test_bn_already_normalized(rng):
    x = rng.standard_normal((8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(2), training=True)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-14)
    np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=0)


def test_bn_zero_gamma_gives_beta(rng):
    x = rng.standard_normal((3, 2, 3, 3))
    beta = np.array([0.7, -1.3])
    out = batch_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(beta), BatchNormState(2), training=True)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_bn_output_statistics(rng):
    x = 3.0 * rng.standard_normal((4, 2, 3, 3)) + 5.0
    out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(2), training=True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-10)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-6)


def test_bn_running_stats_and_inference(rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
    state = BatchNormState(2)
    batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True)
    N = 4 * 9
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * N / (N - 1))
    out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False).data
    expect = (x - state.running_mean[None, :, None, None]) / np.sqrt(state.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect, atol=1e-14)
    frozen = state.copy()
    batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True, update_stats=False)
    np.testing.assert_array_equal(state.running_mean, frozen.running_mean)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batch_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]), BatchNormState(1), training=True)
    out = batch_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]), BatchNormState(1), training=False)
    assert out.shape == (1, 1, 1, 1)


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients(rng, training):
    x = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    g = Tensor(rng.standard_normal(2), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    state = BatchNormState(2)
    state.running_mean, state.running_var = rng.standard_normal(2), rng.random(2) + 0.5
    target = rng.standard_normal((3, 2, 3, 3))
    f = lambda: float(mse(batch_norm(x, g, b, state, training, update_stats=False), target).data)
    backward(mse(batch_norm(x, g, b, state, training, update_stats=False), target))
    for t, fd in zip((x, g, b), finite_difference(f, (x, g, b))):
        assert relative_error(t.grad, fd) < 1e-7


# relu

def test_relu_examples():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor(-np.abs(np.arange(1.0, 6.0)), requires_grad=True)
    out = relu(x)
    np.testing.assert_array_equal(out.data, 0)
    backward(tsum(out))
    np.testing.assert_array_equal(x.grad, 0)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    backward(tsum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_abs_identity(rng):
    x = rng.standard_normal(200)
    np.testing.assert_array_equal(relu(Tensor(x)).data + relu(Tensor(-x)).data, np.abs(x))


# matvec / mse

def test_matvec_examples():
    np.testing.assert_array_equal(matvec(np.eye(3), Tensor([1.0, 2.0, 3.0])).data, [1, 2, 3])
    A = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    np.testing.assert_array_equal(matvec(A, Tensor([3.0, 4.0])).data, [3, 8, 7])


def test_matvec_normal_equations_oracle(rng):
    A = rng.standard_normal((7, 5))
    x = rng.standard_normal(5)
    got = matvec_T(A, matvec(A, Tensor(x))).data
    expect = [sum(sum(A[r, i] * A[r, j] for r in range(7)) * x[j] for j in range(5)) for i in range(5)]
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_matvec_batched_and_errors(rng):
    A = rng.standard_normal((4, 6))
    X = rng.standard_normal((3, 6))
    np.testing.assert_allclose(matvec(A, Tensor(X)).data, X @ A.T, atol=1e-14)
    with pytest.raises(ShapeError):
        matvec(A, Tensor(np.zeros(5)))
    with pytest.raises(ShapeError):
        matvec_T(A, Tensor(np.zeros(6)))


def test_matvec_gradients(rng):
    A = rng.standard_normal((4, 6))
    x = Tensor(rng.standard_normal(6), requires_grad=True)
    t = rng.standard_normal(6)
    f = lambda: float(mse(matvec_T(A, matvec(A, x)), t).data)
    backward(mse(matvec_T(A, matvec(A, x)), t))
    assert relative_error(x.grad, finite_difference(f, [x])[0]) < 1e-8


def test_mse_examples(rng):
    a = rng.standard_normal(10)
    assert mse(Tensor(a), Tensor(a)).item() == 0.0
    assert mse(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).item() == 5.0
    b = rng.standard_normal(10)
    assert abs(mse(Tensor(a), Tensor(b)).item() - sum_sq_loop(a, b)) < 1e-12
    with pytest.raises(ShapeError):
        mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


# backward

def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    backward(mse(x, np.zeros(1)))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_independent_parameter_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([5.0], requires_grad=True)
    backward(mse(x, np.zeros(2)) + 0.0 * tsum(p))
    np.testing.assert_array_equal(p.grad, [0.0])


def test_backward_accumulates_and_scales(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    backward(mse(x, np.zeros(4)))
    g1 = x.grad.copy()
    backward(mse(x, np.zeros(4)))
    np.testing.assert_array_equal(x.grad, 2 * g1)
    x.zero_grad()
    backward(mse(x, np.zeros(4)) * 3.0)
    np.testing.assert_array_equal(x.grad, 3 * g1)


def test_backward_rejects_non_scalar_and_nan():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)
    with pytest.raises(NonFiniteError):
        x * np.inf


def test_shared_subexpression_accumulates(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = x * x
    loss = tsum(y + y * 2.0)
    backward(loss)
    np.testing.assert_allclose(x.grad, 6 * x.data)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_structural_ops_gradients(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = rng.standard_normal((2, 2, 3))
    f = lambda: float(tsum(stack([a, b], axis=0) * w).data + tsum(concat([a, b], axis=1) * 0.5).data)
    backward(tsum(stack([a, b], axis=0) * w) + tsum(concat([a, b], axis=1) * 0.5))
    for t, fd in zip((a, b), finite_difference(f, (a, b))):
        assert relative_error(t.grad, fd) < 1e-8


def test_composite_graph_gradient_check(rng):
    # conv -> bn -> relu -> conv -> matvec -> mse, all parameters at once
    k1 = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    gam = Tensor(rng.random(3) + 0.5, requires_grad=True)
    bet = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    k2 = Tensor(rng.standard_normal((1, 3, 3, 3)) * 0.5, requires_grad=True)
    A = rng.standard_normal((10, 16))
    x = Tensor(rng.standard_normal((2, 1, 4, 4)))
    t = rng.standard_normal((2, 10))
    state = BatchNormState(3)

    def loss():
        h = relu(batch_norm(conv2d(x, k1, b1), gam, bet, state, True, update_stats=False))
        return mse(matvec(A, conv2d(h, k2).reshape(2, 16)), t)

    backward(loss())
    params = (k1, b1, gam, bet, k2)
    L = loss().item()
    for p, fd in zip(params, finite_difference(lambda: loss().item(), params)):
        assert relative_error(p.grad, fd, floor=1e-6 * max(1.0, abs(L))) < 1e-4


# ADAM

def test_adam_zero_gradient():
    p = Tensor([1.0, -2.0])
    state = AdamState.for_params([p], lr=0.1)
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1
    adam_step([p], [None], state)
    assert state.t == 2


def test_adam_first_step_by_hand():
    p = Tensor([0.5])
    state = AdamState.for_params([p], lr=0.1)
    adam_step([p], [np.array([1.0])], state)
    # m_hat = 1, v_hat = 1, so the step is lr * 1 / (1 + eps)
    np.testing.assert_allclose(p.data, [0.5 - 0.1 / (1 + 1e-8)], rtol=0, atol=1e-15)


def test_adam_defaults_and_shape_error():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-4, 0.9, 0.999, 1e-8)
    p = Tensor([1.0])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(2)], AdamState.for_params([p]))


def test_adam_deterministic_trajectories():
    def run():
        r = np.random.default_rng(7)
        p = Tensor(r.standard_normal(5), requires_grad=True)
        opt = Adam([p], lr=0.01)
        hist = []
        for _ in range(20):
            opt.zero_grad()
            backward(mse(p * p, np.ones(5)))
            opt.step()
            hist.append(p.data.copy())
        return np.array(hist)

    assert run().tobytes() == run().tobytes()
