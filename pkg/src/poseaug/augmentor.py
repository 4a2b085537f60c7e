"""Learnable pose augmentor: bone-angle, bone-length and rigid-transform edits.

The network reads a root-centered pose (in meters) concatenated with a
Gaussian noise vector and regresses three groups of raw outputs.  They are
mapped to bounded augmentation parameters::

    gamma_ba = s_ba * tanh(raw_ba)                  (J-1, 3)
    gamma_bl = s_bl * tanh(raw_bl)[bone_class]      (J-1,), tied across sides
    R        = exp(raw_rot)                         axis-angle exponential map
    t        = t0 + s_t * tanh(raw_trans)           mm

and applied in sequence: directions ``normalize(B_hat + gamma_ba)``, lengths
``|B| (1 + gamma_bl)``, joints ``R H^-1(B') + t``, then reprojection with the
source camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBoneError, InvalidRatioError, NonFiniteError, ProjectionDomainError
from .numerics import BatchNorm1d, Linear, Module, Tensor, no_grad
from .numerics.functional import rodrigues
from .skeleton import (EPS_LEN, Z_MIN, BoneSet, decompose, hierarchical_transform,
                       inverse_hierarchical, project, recompose, root_center)

OPS = ("ba", "bl", "rt")


@dataclass
class AugmentationParams:
    gamma_ba: object   # (N, J-1, 3)
    gamma_bl: object   # (N, J-1)
    rotation: object   # (N, 3, 3)
    translation: object  # (N, 3)


@dataclass
class AugmentResult:
    pose3d: object      # (M, J, 3) mm, accepted samples only
    pose2d: object      # (M, J, 2) px
    params: AugmentationParams  # accepted samples only
    accepted: np.ndarray  # indices into the input batch
    rejected: int


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _col(x):
    return x.reshape(x.shape + (1,)) if isinstance(x, Tensor) else np.asarray(x)[..., None]


def apply_ba(bones: BoneSet, gamma_ba, eps=EPS_LEN) -> BoneSet:
    """Replace directions by ``normalize(directions + gamma_ba)``."""
    moved = bones.directions + gamma_ba
    norms = (moved * moved).sum(axis=-1)
    norms = norms.sqrt() if isinstance(norms, Tensor) else np.sqrt(norms)
    if np.any(_data(norms) <= eps):
        raise DegenerateBoneError("bone-angle residual cancels a bone direction")
    return BoneSet(moved / _col(norms), bones.lengths)


def apply_bl(bones: BoneSet, gamma_bl) -> BoneSet:
    """Scale lengths by ``1 + gamma_bl``."""
    if np.any(_data(gamma_bl) <= -1.0):
        raise InvalidRatioError("bone-length ratio must satisfy 1 + gamma_bl > 0")
    return BoneSet(bones.directions, bones.lengths * (1.0 + gamma_bl))


def apply_rt(bones: BoneSet, rotation, translation, topo, z_min=Z_MIN, check=True):
    """Rebuild joints with the root at the origin, rotate by R, translate by t."""
    local = inverse_hierarchical(recompose(bones), topo)
    rt = rotation.swapaxes(-1, -2)
    trans = translation.reshape(translation.shape[:-1] + (1, 3)) if isinstance(translation, Tensor) \
        else np.asarray(translation)[..., None, :]
    joints = local @ rt + trans
    if check and np.any(_data(joints)[..., 2] <= z_min):
        raise ProjectionDomainError(f"augmented joint depth at or below z_min = {z_min} mm")
    return joints


class Augmentor(Module):
    """MLP augmentor.

    The trunk is four linear layers (batch norm + leaky ReLU, width ``hidden``)
    fed with the root-centered pose in meters plus ``noise_dim`` Gaussian
    values; three heads emit the bone-angle, bone-length and rigid-transform
    raw outputs.  ``t0=None`` anchors translations at each source pose's root
    instead of a fixed point.  ``ops`` selects which edits are active; a
    disabled edit behaves as its identity (for RT: no rotation, source root).
    """

    def __init__(self, topo, rng, noise_dim=48, hidden=256, s_ba=1.0, s_bl=0.5,
                 s_t=(1000.0, 1000.0, 3000.0), t0=(0.0, 0.0, 5500.0), z_min=Z_MIN,
                 ops=OPS, slope=0.2):
        self.topo = topo
        self.noise_dim = noise_dim
        self.s_ba = float(s_ba)
        self.s_bl = float(s_bl)
        if not 0 < self.s_bl < 1:
            raise ValueError("s_bl must lie in (0, 1) so that 1 + gamma_bl stays positive")
        self.s_t = np.asarray(s_t, dtype=np.float64)
        self.t0 = None if t0 is None else np.asarray(t0, dtype=np.float64)
        self.z_min = z_min
        if self.t0 is not None and self.t0[2] - self.s_t[2] <= z_min:
            raise ValueError("t0[2] - s_t[2] must exceed z_min so the root stays in front of the camera")
        self.ops = tuple(ops)
        unknown = set(self.ops) - set(OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        self.slope = slope
        J = topo.joint_count
        dims = [3 * J + noise_dim] + [hidden] * 4
        self.layers = [Linear(a, b, rng, init="kaiming", slope=slope) for a, b in zip(dims, dims[1:])]
        self.norms = [BatchNorm1d(hidden) for _ in range(4)]
        self.head_ba = Linear(hidden, 3 * topo.bone_count, rng)
        self.head_bl = Linear(hidden, topo.n_length_classes, rng)
        self.head_rt = Linear(hidden, 6, rng)

    @property
    def enabled(self):
        return bool(self.ops)

    def zero_heads(self):
        """Zero every head so that all raw outputs vanish (identity augmentation)."""
        for h in (self.head_ba, self.head_bl, self.head_rt):
            h.zero_()
        return self

    def raw(self, pose, noise):
        """Raw head outputs ``(ba (N, 3(J-1)), bl (N, classes), rt (N, 6))``."""
        pose = np.asarray(pose, dtype=np.float64)
        n = pose.shape[0]
        if noise.shape != (n, self.noise_dim):
            raise ValueError(f"noise must have shape ({n}, {self.noise_dim})")
        x = np.concatenate([root_center(pose, self.topo).reshape(n, -1) / 1000.0, noise], axis=1)
        h = Tensor(x)
        for lin, bn in zip(self.layers, self.norms):
            h = bn(lin(h)).leaky_relu(self.slope)
        outs = (self.head_ba(h), self.head_bl(h), self.head_rt(h))
        for o in outs:
            if not np.all(np.isfinite(o.data)):
                raise NonFiniteError("augmentor produced a non-finite head output")
        return outs

    def params_from_raw(self, raw_ba, raw_bl, raw_rt, source_root):
        n = raw_ba.shape[0]
        nb = self.topo.bone_count
        if "ba" in self.ops:
            gamma_ba = raw_ba.tanh().reshape(n, nb, 3) * self.s_ba
        else:
            gamma_ba = np.zeros((n, nb, 3))
        if "bl" in self.ops:
            gamma_bl = (raw_bl.tanh() * self.s_bl)[:, self.topo.bone_class]
        else:
            gamma_bl = np.zeros((n, nb))
        if "rt" in self.ops:
            rotation = rodrigues(raw_rt[:, :3])
            anchor = source_root if self.t0 is None else self.t0
            translation = raw_rt[:, 3:].tanh() * self.s_t + anchor
        else:
            rotation = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            translation = np.array(source_root, dtype=np.float64)
        return AugmentationParams(gamma_ba, gamma_bl, rotation, translation)

    def regress_params(self, pose, noise):
        pose = np.asarray(pose, dtype=np.float64)
        return self.params_from_raw(*self.raw(pose, noise), pose[:, self.topo.root])

    def forward(self, pose, cams, noise):
        return augment(self, pose, cams, noise)


def _pick(x, idx, n):
    return x if len(idx) == n else x[idx]


def augment(net: Augmentor, pose, cams, noise) -> AugmentResult:
    """Full pipeline regress -> BA -> BL -> RT -> project for a batch.

    Samples whose perturbed direction degenerates or whose joints fall at or
    behind ``z_min`` are dropped (``accepted`` lists the survivors) rather than
    aborting the batch.
    """
    topo = net.topo
    pose = np.asarray(pose, dtype=np.float64)
    cams = np.asarray(cams, dtype=np.float64)
    n = pose.shape[0]
    params = net.regress_params(pose, noise)
    src = decompose(hierarchical_transform(pose, topo))

    moved = src.directions + _data(params.gamma_ba)
    keep = np.flatnonzero(np.sqrt((moved ** 2).sum(-1)).min(axis=-1) > EPS_LEN)
    bones = BoneSet(src.directions[keep], src.lengths[keep])
    bones = apply_ba(bones, _pick(params.gamma_ba, keep, n))
    bones = apply_bl(bones, _pick(params.gamma_bl, keep, n))
    joints = apply_rt(bones, _pick(params.rotation, keep, n),
                      _pick(params.translation, keep, n), topo, check=False)

    inner = np.flatnonzero(_data(joints)[..., 2].min(axis=-1) > net.z_min)
    joints = _pick(joints, inner, len(keep))
    keep = keep[inner]
    accepted = AugmentationParams(*(_pick(p, keep, n) for p in (
        params.gamma_ba, params.gamma_bl, params.rotation, params.translation)))
    if len(keep):
        pose2d = project(joints, cams[keep], z_min=net.z_min)
    else:
        pose2d = np.zeros((0, topo.joint_count, 2))
    return AugmentResult(joints, pose2d, accepted, keep, n - len(keep))


def sample_noise(rng, n, dim):
    return rng.standard_normal((n, dim))


def augment_numpy(net, pose, cams, rng):
    """Gradient-free augmentation returning plain arrays (for export and dumps)."""
    with no_grad():
        res = augment(net, pose, cams, sample_noise(rng, len(pose), net.noise_dim))
    unwrap = lambda x: x.data if isinstance(x, Tensor) else np.asarray(x)  # noqa: E731
    params = AugmentationParams(*(unwrap(p) for p in (res.params.gamma_ba, res.params.gamma_bl,
                                                      res.params.rotation, res.params.translation)))
    return AugmentResult(unwrap(res.pose3d), unwrap(res.pose2d), params, res.accepted, res.rejected)
