"""2D-to-3D lifting network and the pose estimation loss."""

import numpy as np

from .errors import ShapeError
from .numerics import BatchNorm1d, Dropout, Linear, Module, Tensor, no_grad
from .skeleton import normalize_2d


class ResidualBlock(Module):
    def __init__(self, width, dropout, rng, drop_rng):
        self.fc1 = Linear(width, width, rng, init="kaiming")
        self.bn1 = BatchNorm1d(width)
        self.fc2 = Linear(width, width, rng, init="kaiming")
        self.bn2 = BatchNorm1d(width)
        self.drop1 = Dropout(dropout, drop_rng)
        self.drop2 = Dropout(dropout, drop_rng)

    def forward(self, x):
        h = self.drop1(self.bn1(self.fc1(x)).relu())
        h = self.drop2(self.bn2(self.fc2(h)).relu())
        return x + h


class Estimator(Module):
    """Residual MLP lifter.

    Input is the flattened normalized 2D pose (2J values); output is the
    root-relative 3D pose in meters with the root row pinned to zero.
    Dropout masks come from ``drop_rng`` so that resetting its state replays
    the same masks.
    """

    def __init__(self, topo, rng, width=1024, n_blocks=4, dropout=0.25, drop_rng=None):
        self.topo = topo
        self.drop_rng = drop_rng if drop_rng is not None else np.random.default_rng(rng.integers(2**63))
        J = topo.joint_count
        self.inp = Linear(2 * J, width, rng, init="kaiming")
        self.bn_in = BatchNorm1d(width)
        self.drop_in = Dropout(dropout, self.drop_rng)
        self.blocks = [ResidualBlock(width, dropout, rng, self.drop_rng) for _ in range(n_blocks)]
        self.out = Linear(width, 3 * J, rng)
        self._mask = np.ones((J, 3))
        self._mask[topo.root] = 0.0

    def forward(self, x):
        """``x``: (N, 2J) normalized 2D; returns (N, J, 3) meters, root at origin."""
        if x.shape[-1] != 2 * self.topo.joint_count:
            raise ShapeError(f"estimator expects {2 * self.topo.joint_count} inputs, got {x.shape[-1]}")
        h = self.drop_in(self.bn_in(self.inp(x)).relu())
        for block in self.blocks:
            h = block(h)
        y = self.out(h).reshape(x.shape[0], self.topo.joint_count, 3)
        return y * self._mask


def network_input(pose2d, cams):
    """Flattened normalized 2D input, (N, 2J)."""
    z = normalize_2d(pose2d, cams)
    return z.reshape(z.shape[0], -1)


def estimate(net, pose2d, cams, mode="eval"):
    """Root-relative 3D pose in mm (plain array) for pixel-space 2D poses ``(N, J, 2)``."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    was = net.training
    net.train(mode == "train")
    try:
        with no_grad():
            out = net(network_input(pose2d, cams)).data * 1000.0
    finally:
        net.train(was)
    return out


def per_sample_pose_loss(pred, gt):
    """Per-sample mean over joints of squared Euclidean distance, shape (N,)."""
    if tuple(pred.shape) != tuple(gt.shape):
        raise ShapeError(f"pose shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    d = pred - gt
    return (d * d).sum(axis=-1).mean(axis=-1)


def pose_loss(pred, gt):
    """Mean over batch and joints of squared joint distance.

    Accepts single poses (J, 3) or batches (N, J, 3); units follow the inputs.
    """
    if pred.ndim == 2:
        pred = pred.reshape((1,) + tuple(pred.shape)) if isinstance(pred, Tensor) else pred[None]
        gt = gt.reshape((1,) + tuple(gt.shape)) if isinstance(gt, Tensor) else np.asarray(gt)[None]
    return per_sample_pose_loss(pred, gt).mean()
