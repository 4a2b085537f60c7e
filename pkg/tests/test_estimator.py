import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poseaug.errors import ShapeError
from poseaug.estimator import Estimator, estimate, network_input, per_sample_pose_loss, pose_loss
from poseaug.numerics import Tensor
from poseaug.skeleton import project
from tests.helpers import numgrad, random_poses, rel_err

CAM = np.array([1145.0, 1145.0, 500.0, 500.0])


def small(topo, seed=0, **kw):
    return Estimator(topo, np.random.default_rng(seed), width=kw.pop("width", 24), n_blocks=kw.pop("n_blocks", 2), **kw)


def inputs(rng, topo, n):
    poses = random_poses(rng, topo, n)
    return project(poses, CAM), np.tile(CAM, (n, 1))


def test_zero_output_layer_gives_origin_pose(topo, rng):
    net = small(topo)
    net.out.weight.data[:] = 0
    net.out.bias.data[:] = 0
    np.testing.assert_array_equal(estimate(net, *inputs(rng, topo, 3)), 0)


def test_root_is_exactly_zero(topo, rng):
    net = small(topo)
    net.out.bias.data[:] = 5.0
    for mode in ("eval", "train"):
        out = estimate(net, *inputs(rng, topo, 8), mode=mode)
        assert out.shape == (8, 16, 3)
        np.testing.assert_array_equal(out[:, topo.root], 0.0)
        assert np.all(out[:, topo.root + 1] != 0)


def test_eval_is_deterministic_and_train_is_not(topo, rng):
    net = small(topo)
    p2, cams = inputs(rng, topo, 6)
    np.testing.assert_array_equal(estimate(net, p2, cams), estimate(net, p2, cams))
    assert not np.array_equal(estimate(net, p2, cams, mode="train"), estimate(net, p2, cams, mode="train"))
    assert net.training  # mode restored


def test_input_width_checked(topo):
    with pytest.raises(ShapeError):
        small(topo)(Tensor(np.zeros((2, 30))))
    with pytest.raises(ValueError):
        estimate(small(topo), np.zeros((1, 16, 2)) + 500, CAM[None], mode="test")


def test_train_mode_gradient_with_replayed_masks(topo, rng):
    net = small(topo, dropout=0.25)
    x = network_input(*inputs(rng, topo, 5))
    gt = rng.normal(size=(5, 16, 3)) * 0.3
    state = net.drop_rng.bit_generator.state

    def value():
        net.drop_rng.bit_generator.state = state
        return float(pose_loss(net(Tensor(x)), gt).data)

    net.train()
    net.zero_grad()
    net.drop_rng.bit_generator.state = state
    pose_loss(net(Tensor(x)), gt).backward()
    for w in (net.inp.weight, net.blocks[1].fc2.weight, net.out.weight, net.bn_in.weight):
        coords = rng.choice(w.data.size, 6, replace=False)
        num = numgrad(value, w.data, coords=coords)
        assert rel_err(w.grad.reshape(-1)[coords], num.reshape(-1)[coords]) < 1e-5


def test_pose_loss_examples():
    gt = np.array([[3.0, 4.0, 0.0]])
    assert pose_loss(np.zeros((1, 3)), gt) == 25.0
    two = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]])
    assert pose_loss(np.zeros((2, 3)), two) == 12.5
    batch = np.stack([two, np.array([[0.0, 0, 4], [0, 0, 0]])])
    np.testing.assert_array_equal(per_sample_pose_loss(np.zeros((2, 2, 3)), batch), [12.5, 8.0])
    assert pose_loss(np.zeros((2, 2, 3)), batch) == pytest.approx(10.25)
    with pytest.raises(ShapeError):
        pose_loss(np.zeros((2, 3)), np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_pose_loss_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 4, 16, 3))
    assert pose_loss(a, b) == pytest.approx(pose_loss(b, a), rel=1e-14)
    assert pose_loss(a, b) >= 0 and pose_loss(a, a) == 0


def test_default_architecture(topo):
    net = Estimator(topo, np.random.default_rng(0))
    assert net.inp.in_features == 32 and net.inp.out_features == 1024
    assert len(net.blocks) == 4 and net.out.out_features == 48
