"""Skeleton topology and the geometric operations on poses.

Poses are arrays of shape ``(..., J, 3)`` in camera coordinates (mm) and
``(..., J, 2)`` in pixels.  Bones are ``(..., J-1, 3)`` in the canonical
order: depth-first from the root, visiting children in ascending joint
index.  A bone is named after its child joint.

Every geometric function accepts either numpy arrays or
:class:`~poseaug.numerics.Tensor` inputs; with tensors the result is
differentiable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DegenerateBoneError, ProjectionDomainError, ShapeError, TopologyError
from .numerics import Tensor

PART_NAMES = ("torso", "left_arm", "right_arm", "left_leg", "right_leg")
EPS_LEN = 1e-6
Z_MIN = 100.0


def _sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else np.sqrt(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


class SkeletonTopology:
    """Joint tree with symmetry and body-part annotations.

    Parameters are given per joint (``parents``) and per bone (bone indices in
    canonical order for ``symmetry_pairs`` and ``parts``).  The constructor
    validates the tree and derives the linear maps used by the hierarchical
    transform: ``incidence`` (J-1, J) maps joints to bones and ``ancestry``
    (J, J-1) maps bones back to root-relative joints.
    """

    def __init__(self, joint_names, parents, root, symmetry_pairs, parts):
        self.joint_names = tuple(joint_names)
        self.parents = tuple(int(p) for p in parents)
        self.root = int(root)
        J = len(self.parents)
        if J < 2 or len(self.joint_names) != J:
            raise TopologyError("need at least two joints and one name per joint")
        if not 0 <= self.root < J or self.parents[self.root] != -1:
            raise TopologyError("root must be a valid joint index with parent -1")
        for j, p in enumerate(self.parents):
            if j != self.root and not 0 <= p < J:
                raise TopologyError(f"joint {j} has invalid parent {p}")
            if j != self.root and p == j:
                raise TopologyError(f"joint {j} is its own parent")

        order = _bone_order(self.parents, self.root)
        if len(order) != J - 1:
            raise TopologyError("parent links do not form a tree rooted at the root joint")

        self.joint_count = J
        self.bone_child = np.array(order)
        self.bone_parent = np.array([self.parents[c] for c in order])
        self.bone_of_joint = {int(c): k for k, c in enumerate(order)}
        nb = J - 1

        self.incidence = np.zeros((nb, J))
        self.incidence[np.arange(nb), self.bone_child] = 1.0
        self.incidence[np.arange(nb), self.bone_parent] -= 1.0
        self.ancestry = np.zeros((J, nb))
        for j in range(J):
            k = j
            while k != self.root:
                self.ancestry[j, self.bone_of_joint[k]] = 1.0
                k = self.parents[k]

        self.symmetry_pairs = tuple((int(a), int(b)) for a, b in symmetry_pairs)
        self.parts = {name: tuple(int(b) for b in bones) for name, bones in parts.items()}
        # canonical order for the default names, file order for anything else
        self.part_names = tuple(sorted(self.parts, key=lambda n: (
            PART_NAMES.index(n) if n in PART_NAMES else len(PART_NAMES), list(self.parts).index(n))))
        self._validate_annotations()

        # one length-ratio class per symmetry pair, then one per unpaired bone
        self.bone_class = np.full(nb, -1)
        for c, (a, b) in enumerate(self.symmetry_pairs):
            self.bone_class[a] = self.bone_class[b] = c
        nxt = len(self.symmetry_pairs)
        for k in range(nb):
            if self.bone_class[k] < 0:
                self.bone_class[k] = nxt
                nxt += 1
        self.n_length_classes = nxt

    def _validate_annotations(self):
        nb = self.joint_count - 1
        if not self.parts:
            raise TopologyError("at least one body part is required")
        owner = {}
        for name, bones in self.parts.items():
            if not bones:
                raise TopologyError(f"part {name!r} has no bones")
            for b in bones:
                if not 0 <= b < nb:
                    raise TopologyError(f"part {name!r} references invalid bone {b}")
                if b in owner:
                    raise TopologyError(f"bone {b} assigned to both {owner[b]!r} and {name!r}")
                owner[b] = name
        if len(owner) != nb:
            raise TopologyError("parts must cover every bone")
        seen = set()
        for a, b in self.symmetry_pairs:
            for k in (a, b):
                if not 0 <= k < nb or k in seen:
                    raise TopologyError(f"bone {k} invalid or in more than one symmetry pair")
                seen.add(k)
        self.part_of = tuple(owner[k] for k in range(nb))

    @property
    def bone_count(self):
        return self.joint_count - 1

    # -- (de)serialization -----------------------------------------------------

    @classmethod
    def from_dict(cls, spec):
        try:
            names = spec["joint_names"]
            parents = spec["parents"]
            root = spec["root"]
            index = {n: i for i, n in enumerate(names)}
            bone_of = {c: k for k, c in enumerate(_bone_order(parents, root))}

            def bone(name):
                if name not in index:
                    raise TopologyError(f"unknown joint name {name!r}")
                j = index[name]
                if j not in bone_of:
                    raise TopologyError(f"joint {name!r} does not name a bone")
                return bone_of[j]

            pairs = [(bone(a), bone(b)) for a, b in spec["symmetry_pairs"]]
            parts = {p: [bone(n) for n in spec["parts"][p]] for p in spec["parts"]}
        except KeyError as exc:
            raise TopologyError(f"topology file is missing field {exc}") from None
        return cls(names, parents, root, pairs, parts)

    def to_dict(self):
        name = lambda k: self.joint_names[self.bone_child[k]]  # noqa: E731
        return {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "root": self.root,
            "symmetry_pairs": [[name(a), name(b)] for a, b in self.symmetry_pairs],
            "parts": {p: [name(k) for k in self.parts[p]] for p in self.part_names},
        }

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls):
        text = resources.files("poseaug.data").joinpath("h36m16.json").read_text()
        return cls.from_dict(json.loads(text))

    def digest(self):
        """Short stable hash identifying the topology in dataset headers."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, SkeletonTopology) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"SkeletonTopology(J={self.joint_count}, root={self.joint_names[self.root]!r})"


def _bone_order(parents, root):
    children = {}
    for j, p in enumerate(parents):
        if j != root:
            children.setdefault(p, []).append(j)
    order, stack = [], [root]
    while stack:
        j = stack.pop()
        if j != root:
            order.append(j)
        stack.extend(sorted(children.get(j, []), reverse=True))
    return order


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


@dataclass
class BoneSet:
    """Unit bone directions ``(..., J-1, 3)`` and lengths ``(..., J-1)``."""

    directions: object
    lengths: object


def _cam_arrays(cam):
    arr = cam.as_array() if isinstance(cam, Camera) else np.asarray(cam, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ShapeError("camera must be a Camera or (..., 4) array of fx, fy, cx, cy")
    # broadcast against (..., J, 1)
    return [arr[..., i, None, None] for i in range(4)]


# -- hierarchical transform -------------------------------------------------------

def hierarchical_transform(joints, topo):
    """Bones ``child - parent`` in canonical order."""
    if joints.shape[-2] != topo.joint_count:
        raise ShapeError(f"expected {topo.joint_count} joints, got {joints.shape[-2]}")
    return topo.incidence @ joints


def inverse_hierarchical(bones, topo, root_position=None):
    """Joints from bones, with the root placed at ``root_position`` (default origin)."""
    if bones.shape[-2] != topo.bone_count:
        raise ShapeError(f"expected {topo.bone_count} bones, got {bones.shape[-2]}")
    joints = topo.ancestry @ bones
    if root_position is not None:
        root = root_position
        root = root.reshape(root.shape[:-1] + (1, 3)) if isinstance(root, Tensor) \
            else np.asarray(root, dtype=np.float64)[..., None, :]
        joints = joints + root
    return joints


def root_center(joints, topo):
    return joints - joints[..., topo.root:topo.root + 1, :]


def decompose(bones, eps=EPS_LEN):
    lengths = _sqrt((bones * bones).sum(axis=-1))
    if np.any(_data(lengths) <= eps):
        raise DegenerateBoneError(f"bone shorter than {eps} mm cannot be decomposed")
    if isinstance(lengths, Tensor):
        directions = bones / lengths.reshape(lengths.shape + (1,))
    else:
        directions = bones / lengths[..., None]
    return BoneSet(directions, lengths)


def recompose(bs):
    lengths = bs.lengths
    if isinstance(lengths, Tensor):
        return bs.directions * lengths.reshape(lengths.shape + (1,))
    return bs.directions * np.asarray(lengths)[..., None]


def bone_directions(pose_or_bones, topo):
    """Unit bone directions from either joints ``(..., J, 3)`` or bones ``(..., J-1, 3)``."""
    if pose_or_bones.shape[-2] == topo.joint_count:
        pose_or_bones = hierarchical_transform(pose_or_bones, topo)
    elif pose_or_bones.shape[-2] != topo.bone_count:
        raise ShapeError("input is neither a pose nor a bone set of this topology")
    return decompose(pose_or_bones).directions


# -- projection --------------------------------------------------------------------

def project(joints, cam, z_min=Z_MIN):
    """Pinhole projection ``u = fx x/z + cx``, ``v = fy y/z + cy``.

    ``cam`` is a :class:`Camera` or an array ``(..., 4)`` broadcastable over
    the leading axes of ``joints``.
    """
    z = _data(joints)[..., 2]
    if np.any(z <= z_min):
        raise ProjectionDomainError(f"joint depth at or below z_min = {z_min} mm")
    fx, fy, cx, cy = _cam_arrays(cam)
    x = joints[..., 0:1]
    y = joints[..., 1:2]
    zz = joints[..., 2:3]
    u = x / zz * fx + cx
    v = y / zz * fy + cy
    if isinstance(u, Tensor):
        from .numerics import concat
        return concat([u, v], axis=-1)
    return np.concatenate([u, v], axis=-1)


def normalize_2d(pose2d, cam):
    """Map pixels to the network frame: subtract the principal point and
    divide by ``max(fx, fy)``."""
    fx, fy, cx, cy = _cam_arrays(cam)
    scale = np.maximum(fx, fy)
    center = np.concatenate([cx, cy], axis=-1)
    return (pose2d - center) / scale


# -- kinematic chain space ---------------------------------------------------------

def _gram(d):
    return d @ d.swapaxes(-1, -2)


def part_kcs(pose_or_bones, topo):
    """Per-part Gram matrices of unit bone directions, ordered as ``topo.part_names``."""
    d = bone_directions(pose_or_bones, topo)
    return tuple(_gram(d[..., list(topo.parts[name]), :]) for name in topo.part_names)


def full_kcs(pose_or_bones, topo):
    """Gram matrix over all bones jointly, ``(..., J-1, J-1)``."""
    return _gram(bone_directions(pose_or_bones, topo))
