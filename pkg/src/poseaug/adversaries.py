"""3D (kinematic-chain-space) and 2D pose discriminators with LS-GAN objectives."""

import numpy as np

from .errors import ShapeError, TopologyError
from .numerics import Linear, Module, Tensor, stack
from .skeleton import full_kcs, normalize_2d, part_kcs


class ResidualScorer(Module):
    """Four linear layers with leaky ReLU and one residual connection -> scalar."""

    def __init__(self, n_in, hidden, rng, slope=0.2):
        self.slope = slope
        self.fc_in = Linear(n_in, hidden, rng, init="kaiming", slope=slope)
        self.fc_a = Linear(hidden, hidden, rng, init="kaiming", slope=slope)
        self.fc_b = Linear(hidden, hidden, rng, init="kaiming", slope=slope)
        self.head = Linear(hidden, 1, rng)

    def forward(self, x):
        h = self.fc_in(x).leaky_relu(self.slope)
        r = self.fc_b(self.fc_a(h).leaky_relu(self.slope))
        h = (h + r).leaky_relu(self.slope)
        return self.head(h).reshape(x.shape[0])


class Discriminator3D(Module):
    """Scores kinematic-chain-space matrices.

    ``mode="part"`` holds one encoder per body part (separate weights) and
    averages the part scores; ``mode="full"`` scores the whole-body KCS
    with a single encoder.
    """

    def __init__(self, topo, rng, hidden=256, mode="part", slope=0.2):
        if mode not in ("part", "full"):
            raise ValueError("mode must be 'part' or 'full'")
        self.topo = topo
        self.mode = mode
        sizes = [len(topo.parts[p]) for p in topo.part_names] if mode == "part" else [topo.bone_count]
        self.sizes = sizes
        self.encoders = [ResidualScorer(n * n, hidden, rng, slope) for n in sizes]

    def kcs(self, pose_or_bones):
        if self.mode == "part":
            return part_kcs(pose_or_bones, self.topo)
        return (full_kcs(pose_or_bones, self.topo),)

    def part_scores(self, kcs):
        if len(kcs) != len(self.encoders):
            raise TopologyError(f"expected {len(self.encoders)} KCS matrices, got {len(kcs)}")
        scores = []
        for mat, enc, n in zip(kcs, self.encoders, self.sizes):
            if tuple(mat.shape[-2:]) != (n, n):
                raise TopologyError(f"KCS matrix of shape {tuple(mat.shape[-2:])}, expected {(n, n)}")
            scores.append(enc(mat.reshape(mat.shape[0], n * n)))
        return stack(scores, axis=1)

    def forward(self, kcs):
        """Mean part score per sample, shape (N,)."""
        return self.part_scores(kcs).mean(axis=1)

    def score_pose(self, pose):
        return self(self.kcs(pose))

    def zero_heads(self):
        for enc in self.encoders:
            enc.head.zero_()
        return self


class Discriminator2D(Module):
    """Scores flattened 2D poses in the normalized image frame."""

    def __init__(self, topo, rng, hidden=100, slope=0.2):
        self.topo = topo
        self.net = ResidualScorer(2 * topo.joint_count, hidden, rng, slope)

    def forward(self, pose2d, cams):
        z = normalize_2d(pose2d, cams)
        if z.shape[-2:] != (self.topo.joint_count, 2):
            raise ShapeError("2D pose does not match the topology")
        return self.net(z.reshape(z.shape[0], -1))

    def zero_heads(self):
        self.net.head.zero_()
        return self


def score_3d(d, kcs):
    return d(kcs)


def score_2d(d, pose2d, cam):
    return d(pose2d, cam)


def _mean_sq(x, target):
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    d = x - target
    return (d * d).mean()


def discriminator_loss(real_3d, fake_3d, real_2d, fake_2d):
    """LS-GAN discriminator objective from score vectors (fakes gradient-stopped)."""
    return (_mean_sq(real_3d, 1.0) + _mean_sq(fake_3d, 0.0)
            + _mean_sq(real_2d, 1.0) + _mean_sq(fake_2d, 0.0))


def generator_guidance_loss(fake_3d, fake_2d):
    """LS-GAN generator objective: push fake scores toward the real label."""
    return _mean_sq(fake_3d, 1.0) + _mean_sq(fake_2d, 1.0)


def as_scores(x):
    """Wrap plain numbers/arrays so the loss helpers accept them."""
    return x if isinstance(x, Tensor) else Tensor(np.atleast_1d(np.asarray(x, dtype=np.float64)))
