import numpy as np
import pytest

from demun.dncnn import DnCNNConfig, build_projector, project
from demun.tensor import ShapeError, Tensor, backward, mse

from _oracles import finite_difference, relative_error


def test_depth_three_layer_stack():
    p = build_projector(DnCNNConfig(depth_L=3, channels=8, image_k=8), seed=0)
    assert p.in_weight.shape == (8, 1, 3, 3)
    assert len(p.blocks) == 3
    assert all(b.weight.shape == (8, 8, 3, 3) and b.gamma.shape == (8,) for b in p.blocks)
    assert p.out_weight.shape == (1, 8, 3, 3) and p.out_bias.shape == (1,)


def test_depth_zero_is_valid(rng):
    p = build_projector(DnCNNConfig(depth_L=0, channels=4, image_k=6), seed=1)
    assert p.blocks == []
    out = project(p, Tensor(rng.random((2, 1, 6, 6))))
    assert out.shape == (2, 1, 6, 6)


def test_parameter_count_enumeration():
    cfg = DnCNNConfig(depth_L=5, channels=64, kernel=3, image_k=50)
    p = build_projector(cfg, seed=0)
    counted = sum(t.size for t in p.parameters())
    c = 64
    assert counted == cfg.parameter_count() == (c * 9 + c) + 5 * (c * c * 9 + c + 2 * c) + (c * 9 + 1) == 186497


@pytest.mark.parametrize("L,c,k", [(0, 1, 1), (2, 16, 3), (3, 5, 5)])
def test_parameter_count_small(L, c, k):
    cfg = DnCNNConfig(L, c, k, 8)
    assert sum(t.size for t in build_projector(cfg, 0).parameters()) == cfg.parameter_count()


def test_uniform_init_bounds():
    p = build_projector(DnCNNConfig(depth_L=1, channels=16, image_k=8), seed=3)
    assert np.abs(p.in_weight.data).max() <= 1 / 3
    assert np.abs(p.blocks[0].weight.data).max() <= 1 / 12
    np.testing.assert_array_equal(p.blocks[0].gamma.data, 1)
    np.testing.assert_array_equal(p.blocks[0].beta.data, 0)
    q = build_projector(DnCNNConfig(depth_L=1, channels=16, image_k=8), seed=3)
    np.testing.assert_array_equal(p.in_weight.data, q.in_weight.data)


def test_residual_identity_with_zero_output_layer(rng):
    p = build_projector(DnCNNConfig(depth_L=2, channels=4, image_k=5), seed=0, residual=True)
    p.out_weight.data[:] = 0
    p.out_bias.data[:] = 0
    x = rng.random((3, 1, 5, 5))
    np.testing.assert_array_equal(project(p, Tensor(x), training=True).data, x)
    p.out_bias.data[:] = 0.25
    q = build_projector(DnCNNConfig(depth_L=2, channels=4, image_k=5), seed=0, residual=False)
    q.out_weight.data[:] = 0
    q.out_bias.data[:] = 0.25
    np.testing.assert_array_equal(project(q, Tensor(x)).data, 0.25)


def test_batch_consistency_inference(rng):
    p = build_projector(DnCNNConfig(depth_L=2, channels=6, image_k=8), seed=5)
    for b in p.blocks:
        b.bn.running_mean = rng.standard_normal(6) * 0.1
        b.bn.running_var = rng.random(6) + 0.5
    x = rng.random((2, 1, 8, 8))
    both = project(p, Tensor(x)).data
    single = np.concatenate([project(p, Tensor(x[i : i + 1])).data for i in range(2)])
    np.testing.assert_allclose(both, single, rtol=0, atol=1e-12)


def test_shape_error():
    p = build_projector(DnCNNConfig(depth_L=1, channels=2, image_k=8), seed=0)
    with pytest.raises(ShapeError):
        project(p, Tensor(np.zeros((1, 1, 6, 6))))
    with pytest.raises(ValueError):
        DnCNNConfig(kernel=2)
    with pytest.raises(ValueError):
        DnCNNConfig(depth_L=-1)


@pytest.mark.parametrize("training", [True, False])
def test_input_gradient_finite_differences(rng, training):
    p = build_projector(DnCNNConfig(depth_L=2, channels=4, image_k=8), seed=2, residual=True)
    x = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
    target = rng.random((2, 1, 8, 8))
    loss = lambda: mse(project(p, x, training=training, update_stats=False), target)
    backward(loss())
    fd = finite_difference(lambda: loss().item(), [x])[0]
    assert relative_error(x.grad, fd) < 1e-4


def test_training_mode_updates_running_stats(rng):
    p = build_projector(DnCNNConfig(depth_L=1, channels=3, image_k=4), seed=0)
    project(p, Tensor(rng.random((2, 1, 4, 4))), training=True)
    assert np.any(p.blocks[0].bn.running_mean != 0)
