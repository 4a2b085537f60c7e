"""Paired 2D-3D pose records and their JSON Lines file format.

File layout: one header line, then one record per line::

    {"format": "poseaug-poses", "version": 1, "units": "mm",
     "topology_hash": "...", "joint_count": 16}
    {"pose3d": [[x, y, z], ...], "camera": [fx, fy, cx, cy],
     "pose2d": [[u, v], ...], "subject": "S1", "sequence": "walk"}

``pose2d`` is optional and is filled by projection when absent.  Floats are
written with ``repr`` precision, so save -> load is bit-exact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CameraError, DatasetError, DepthError, JointCountError, NonFiniteRecordError
from ..skeleton import SkeletonTopology, project

log = logging.getLogger(__name__)

FORMAT = "poseaug-poses"
VERSION = 1


@dataclass
class PoseRecord:
    pose3d: np.ndarray          # (J, 3) mm, camera frame
    camera: np.ndarray          # (4,) fx, fy, cx, cy
    pose2d: np.ndarray | None = None  # (J, 2) px
    subject: str = ""
    sequence: str = ""
    extra: dict = field(default_factory=dict)


class PoseDataset:
    """Column-oriented view of a list of records: ``pose3d``, ``pose2d``, ``cams``."""

    def __init__(self, pose3d, pose2d, cams, topology, subjects=None, sequences=None, extras=None):
        self.topology = topology
        J = topology.joint_count
        self.pose3d = np.asarray(pose3d, dtype=np.float64).reshape(-1, J, 3)
        self.pose2d = np.asarray(pose2d, dtype=np.float64).reshape(-1, J, 2)
        self.cams = np.asarray(cams, dtype=np.float64).reshape(-1, 4)
        n = len(self.pose3d)
        if len(self.pose2d) != n or len(self.cams) != n:
            raise ValueError("pose3d, pose2d and cams must have the same length")
        self.subjects = list(subjects) if subjects is not None else [""] * n
        self.sequences = list(sequences) if sequences is not None else [""] * n
        self.extras = list(extras) if extras is not None else [{} for _ in range(n)]

    def __len__(self):
        return len(self.pose3d)

    def __getitem__(self, i):
        return PoseRecord(self.pose3d[i], self.cams[i], self.pose2d[i], self.subjects[i],
                          self.sequences[i], self.extras[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.intp)
        pick = lambda seq: [seq[i] for i in idx]  # noqa: E731
        return PoseDataset(self.pose3d[idx], self.pose2d[idx], self.cams[idx], self.topology,
                           pick(self.subjects), pick(self.sequences), pick(self.extras))

    def extra_column(self, key):
        return np.array([e.get(key, np.nan) for e in self.extras], dtype=np.float64)

    @classmethod
    def from_records(cls, records, topology):
        records = list(records)
        J = topology.joint_count
        if not records:
            return cls(np.zeros((0, J, 3)), np.zeros((0, J, 2)), np.zeros((0, 4)), topology)
        p2 = [r.pose2d if r.pose2d is not None else project(r.pose3d, r.camera, z_min=0.0) for r in records]
        return cls([r.pose3d for r in records], p2, [r.camera for r in records], topology,
                   [r.subject for r in records], [r.sequence for r in records],
                   [dict(r.extra) for r in records])


def validate_record(rec: PoseRecord, topology: SkeletonTopology, index):
    J = topology.joint_count
    p3 = np.asarray(rec.pose3d, dtype=np.float64)
    if p3.shape != (J, 3):
        raise JointCountError(f"pose3d has shape {p3.shape}, expected ({J}, 3)", index)
    cam = np.asarray(rec.camera, dtype=np.float64)
    if cam.shape != (4,) or not np.all(np.isfinite(cam)) or cam[0] <= 0 or cam[1] <= 0:
        raise CameraError("camera must be four finite values with fx, fy > 0", index)
    if not np.all(np.isfinite(p3)):
        raise NonFiniteRecordError("pose3d contains non-finite values", index)
    if np.any(p3[:, 2] <= 0):
        raise DepthError("joint at or behind the camera (z <= 0)", index)
    if rec.pose2d is not None:
        p2 = np.asarray(rec.pose2d, dtype=np.float64)
        if p2.shape != (J, 2):
            raise JointCountError(f"pose2d has shape {p2.shape}, expected ({J}, 2)", index)
        if not np.all(np.isfinite(p2)):
            raise NonFiniteRecordError("pose2d contains non-finite values", index)


def save_dataset(path, dataset: PoseDataset):
    topo = dataset.topology
    header = {"format": FORMAT, "version": VERSION, "units": "mm",
              "topology_hash": topo.digest(), "joint_count": topo.joint_count}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in dataset:
            line = {"pose3d": rec.pose3d.tolist(), "camera": rec.camera.tolist(),
                    "pose2d": rec.pose2d.tolist(), "subject": rec.subject, "sequence": rec.sequence}
            if rec.extra:
                line["extra"] = rec.extra
            fh.write(json.dumps(line) + "\n")


def load_dataset(path, topology: SkeletonTopology | None = None) -> PoseDataset:
    """Read and validate a JSON Lines pose file against ``topology`` (default skeleton)."""
    topology = topology or SkeletonTopology.default()
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        log.warning("%s is empty; returning an empty dataset", path)
        return PoseDataset.from_records([], topology)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError(f"{path}: not a pose dataset (missing '{FORMAT}' header)")
    if header.get("units") != "mm":
        raise DatasetError(f"{path}: unsupported units {header.get('units')!r}")
    if header.get("joint_count") != topology.joint_count:
        raise JointCountError(f"{path}: file has {header.get('joint_count')} joints, "
                              f"topology has {topology.joint_count}")
    if header.get("topology_hash") not in (None, topology.digest()):
        raise DatasetError(f"{path}: topology hash {header['topology_hash']} does not match "
                           f"the loaded topology {topology.digest()}")
    records = []
    for i, line in enumerate(lines[1:]):
        try:
            d = json.loads(line, parse_constant=lambda c: math.nan)
            rec = PoseRecord(np.asarray(d["pose3d"], dtype=np.float64),
                             np.asarray(d["camera"], dtype=np.float64),
                             None if d.get("pose2d") is None else np.asarray(d["pose2d"], dtype=np.float64),
                             str(d.get("subject", "")), str(d.get("sequence", "")), d.get("extra", {}))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record ({exc})", i) from None
        validate_record(rec, topology, i)
        records.append(rec)
    return PoseDataset.from_records(records, topology)
