"""Synthetic paired 2D-3D poses with a controllable source/target distribution gap.

Postures come from forward kinematics: every bone carries a rest direction in
its parent's frame and a per-bone Euler rotation sampled from a range; global
rotations compose down the tree.  The body is yawed at random, shifted on the
floor plane and filmed by a pinhole camera placed on a ring around the world
origin (radius, azimuth, elevation), looking at the origin.

World frame: y up.  Camera frame: x right, y down, z forward (mm).

The target pool widens the elevation and radius ranges, enlarges the floor
offset and rescales bone lengths (symmetric pairs share one factor), which
mimics a change of capture setup between datasets.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..skeleton import Z_MIN, SkeletonTopology, hierarchical_transform, project
from .dataset import PoseDataset

TEMPLATE_LENGTHS = {
    "RHip": 132.0, "RKnee": 442.0, "RAnkle": 454.0,
    "LHip": 132.0, "LKnee": 442.0, "LAnkle": 454.0,
    "Spine": 233.0, "Thorax": 257.0, "Head": 200.0,
    "LShoulder": 151.0, "LElbow": 278.0, "LWrist": 252.0,
    "RShoulder": 151.0, "RElbow": 278.0, "RWrist": 252.0,
}

# rest direction of each bone in its parent's frame (x: subject's left, y: up, z: forward)
REST_DIRECTIONS = {
    "RHip": (-1, 0, 0), "RKnee": (0, -1, 0), "RAnkle": (0, -1, 0),
    "LHip": (1, 0, 0), "LKnee": (0, -1, 0), "LAnkle": (0, -1, 0),
    "Spine": (0, 1, 0), "Thorax": (0, 1, 0), "Head": (0, 1, 0),
    "LShoulder": (1, -0.15, 0), "LElbow": (0, -1, 0), "LWrist": (0, -1, 0),
    "RShoulder": (-1, -0.15, 0), "RElbow": (0, -1, 0), "RWrist": (0, -1, 0),
}

# Euler ranges (x, y, z) in radians; x flexes forward/back, z abducts sideways
_LEG_UPPER = ((-1.0, 0.5), (-0.3, 0.3), (-0.35, 0.35))
_LEG_LOWER = ((0.0, 1.4), (0.0, 0.0), (0.0, 0.0))
_ARM_UPPER = ((-1.4, 0.8), (-0.5, 0.5), (-1.2, 1.2))
_ARM_LOWER = ((-1.8, 0.0), (-0.4, 0.4), (0.0, 0.0))
DEFAULT_ANGLE_RANGES = {
    "RHip": ((-0.1, 0.1), (-0.2, 0.2), (-0.1, 0.1)),
    "LHip": ((-0.1, 0.1), (-0.2, 0.2), (-0.1, 0.1)),
    "RKnee": _LEG_UPPER, "LKnee": _LEG_UPPER,
    "RAnkle": _LEG_LOWER, "LAnkle": _LEG_LOWER,
    "Spine": ((-0.2, 0.5), (-0.3, 0.3), (-0.2, 0.2)),
    "Thorax": ((-0.15, 0.3), (-0.3, 0.3), (-0.15, 0.15)),
    "Head": ((-0.4, 0.5), (-0.6, 0.6), (-0.3, 0.3)),
    "LShoulder": ((-0.1, 0.1), (-0.15, 0.15), (-0.15, 0.15)),
    "RShoulder": ((-0.1, 0.1), (-0.15, 0.15), (-0.15, 0.15)),
    "LElbow": _ARM_UPPER, "RElbow": _ARM_UPPER,
    "LWrist": _ARM_LOWER, "RWrist": _ARM_LOWER,
}


def _ranges_copy(d):
    return {k: [list(r) for r in v] for k, v in d.items()}


@dataclass
class SyntheticConfig:
    bone_lengths: dict = field(default_factory=lambda: dict(TEMPLATE_LENGTHS))
    angle_ranges: dict = field(default_factory=lambda: _ranges_copy(DEFAULT_ANGLE_RANGES))
    yaw_range: tuple = (-math.pi, math.pi)
    # source capture setup
    radius_range: tuple = (4500.0, 5500.0)
    elevation_range: tuple = (0.0, 0.17)
    floor_offset: float = 300.0
    # target capture setup
    target_radius_range: tuple = (3500.0, 7000.0)
    target_elevation_range: tuple = (-0.1, 0.8)
    target_floor_offset: float = 1000.0
    target_bone_scale: tuple = (0.9, 1.1)
    # intrinsics and image bounds
    focal: float = 1145.0
    principal: tuple = (500.0, 500.0)
    image_size: tuple = (1000.0, 1000.0)
    # pool sizes
    n_source: int = 2000
    n_source_test: int = 1000
    n_target: int = 1000
    max_tries: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("yaw_range", "radius_range", "elevation_range", "target_radius_range",
                     "target_elevation_range", "target_bone_scale"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must satisfy lo <= hi")
        for name, ranges in self.angle_ranges.items():
            if len(ranges) != 3 or any(not lo <= hi for lo, hi in ranges):
                raise ConfigError(f"angle range for {name!r} must be three ordered (lo, hi) pairs")
        if min(self.radius_range[0], self.target_radius_range[0]) <= 0:
            raise ConfigError("camera radius must be positive")
        if self.target_bone_scale[0] <= 0:
            raise ConfigError("bone scale must be positive")
        if any(v <= 0 for v in self.bone_lengths.values()):
            raise ConfigError("bone lengths must be positive")
        if self.focal <= 0:
            raise ConfigError("focal length must be positive")
        if min(self.n_source, self.n_source_test, self.n_target) < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.max_tries < 1:
            raise ConfigError("max_tries must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return SyntheticConfig.from_dict({**self.to_dict(), **changes})


def euler_matrix(ax, ay, az):
    """Rotation ``Rz(az) @ Ry(ay) @ Rx(ax)``."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation for a camera at ``position`` facing ``target``."""
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise ConfigError("camera looks straight along the up axis")
    x /= n
    y = np.cross(z, x)
    return np.stack([x, y, z])


class _Kinematics:
    def __init__(self, topo: SkeletonTopology, cfg: SyntheticConfig):
        self.topo = topo
        names = [topo.joint_names[c] for c in topo.bone_child]
        missing = [n for n in names if n not in cfg.bone_lengths or n not in REST_DIRECTIONS]
        if missing:
            raise ConfigError(f"no template for bones {missing}")
        self.lengths = np.array([cfg.bone_lengths[n] for n in names], dtype=np.float64)
        rest = np.array([REST_DIRECTIONS[n] for n in names], dtype=np.float64)
        self.rest = rest / np.linalg.norm(rest, axis=1, keepdims=True)
        zero = ((0.0, 0.0),) * 3
        self.ranges = np.array([cfg.angle_ranges.get(n, zero) for n in names], dtype=np.float64)

    def local_pose(self, angles, lengths):
        """Root-at-origin joints in the body frame for per-bone Euler angles."""
        topo = self.topo
        J = topo.joint_count
        glob = [None] * J
        glob[topo.root] = np.eye(3)
        joints = np.zeros((J, 3))
        for k, (c, p) in enumerate(zip(topo.bone_child, topo.bone_parent)):
            rot = glob[p] @ euler_matrix(*angles[k])
            glob[c] = rot
            joints[c] = joints[p] + lengths[k] * (rot @ self.rest[k])
        return joints

    def sample_angles(self, rng):
        lo, hi = self.ranges[..., 0], self.ranges[..., 1]
        return lo + (hi - lo) * rng.random(lo.shape)


def template_pose(topo=None, cfg=None):
    """Rest posture (all Euler angles zero), root at the origin, body frame."""
    topo = topo or SkeletonTopology.default()
    kin = _Kinematics(topo, cfg or SyntheticConfig())
    return kin.local_pose(np.zeros((topo.bone_count, 3)), kin.lengths)


def _sample_pool(kin, cfg, n, seed_seq, radius_range, elevation_range, offset, bone_scale, tag):
    topo = kin.topo
    cam = np.array([cfg.focal, cfg.focal, *cfg.principal], dtype=np.float64)
    width, height = cfg.image_size
    pose3d = np.zeros((n, topo.joint_count, 3))
    extras = []
    for i, ss in enumerate(seed_seq.spawn(n)):
        rng = np.random.default_rng(ss)
        lengths = kin.lengths
        if bone_scale is not None:
            scale = rng.uniform(*bone_scale, size=topo.n_length_classes)
            lengths = lengths * scale[topo.bone_class]
        body = kin.local_pose(kin.sample_angles(rng), lengths)
        yaw = rng.uniform(*cfg.yaw_range)
        world = body @ euler_matrix(0.0, yaw, 0.0).T
        world[:, [0, 2]] += rng.uniform(-offset, offset, size=2)
        for _ in range(cfg.max_tries):
            radius = rng.uniform(*radius_range)
            elev = rng.uniform(*elevation_range)
            azim = rng.uniform(-math.pi, math.pi)
            position = radius * np.array([math.cos(elev) * math.sin(azim), math.sin(elev),
                                          math.cos(elev) * math.cos(azim)])
            rot = look_at(position, np.zeros(3))
            joints = (world - position) @ rot.T
            if np.any(joints[:, 2] <= Z_MIN):
                continue
            uv = project(joints, cam)
            if np.all((uv >= 0) & (uv <= (width, height))):
                break
        else:
            raise ConfigError(f"{tag}: no valid camera found for record {i} in {cfg.max_tries} tries")
        pose3d[i] = joints
        extras.append({"elevation": elev, "azimuth": azim, "radius": radius, "yaw": yaw})
    cams = np.broadcast_to(cam, (n, 4))
    return PoseDataset(pose3d, project(pose3d, cams), cams, topo, [tag] * n,
                       [f"{tag}-{i:05d}" for i in range(n)], extras)


def generate_synthetic(cfg: SyntheticConfig, seed=0, topology=None):
    """Return ``{"source": ..., "source_test": ..., "target": ...}`` pose datasets."""
    topo = topology or SkeletonTopology.default()
    kin = _Kinematics(topo, cfg)
    train_ss, test_ss, target_ss = np.random.SeedSequence(seed).spawn(3)
    src = dict(radius_range=cfg.radius_range, elevation_range=cfg.elevation_range,
               offset=cfg.floor_offset, bone_scale=None)
    return {
        "source": _sample_pool(kin, cfg, cfg.n_source, train_ss, tag="source", **src),
        "source_test": _sample_pool(kin, cfg, cfg.n_source_test, test_ss, tag="source_test", **src),
        "target": _sample_pool(kin, cfg, cfg.n_target, target_ss, cfg.target_radius_range,
                               cfg.target_elevation_range, cfg.target_floor_offset,
                               cfg.target_bone_scale, "target"),
    }


def bone_lengths_of(dataset):
    return np.linalg.norm(hierarchical_transform(dataset.pose3d, dataset.topology), axis=-1)
