"""Pose metrics (MPJPE, PA-MPJPE, PCK, AUC) and view-point/position exports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .augmentor import augment_numpy
from .errors import AlignmentError, ShapeError, TopologyError
from .estimator import estimate
from .skeleton import root_center

PCK_THRESHOLD = 150.0
AUC_CURVE = np.arange(0.0, 151.0, 5.0)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3 or pred.ndim < 2:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must be matching (..., J, 3) arrays")
    return pred, gt


def joint_errors(pred, gt):
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean Euclidean joint distance (mm) over samples and joints."""
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt):
    """Similarity transform (rotation, uniform scale, translation) of ``pred`` onto ``gt``.

    Works per sample on ``(N, J, 3)`` or ``(J, 3)`` arrays.
    """
    pred, gt = _pair(pred, gt)
    single = pred.ndim == 2
    if single:
        pred, gt = pred[None], gt[None]
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    p0, g0 = pred - mu_p, gt - mu_g
    norm_p = np.sqrt((p0 ** 2).sum(axis=(1, 2)))
    norm_g = np.sqrt((g0 ** 2).sum(axis=(1, 2)))
    if np.any(norm_p < 1e-9) or np.any(norm_g < 1e-9):
        raise AlignmentError("cannot align a pose whose joints all coincide")
    # maximize tr(R M) with M = p0^T g0; R = V diag(1, 1, d) U^T
    u, s, vt = np.linalg.svd(np.swapaxes(p0, 1, 2) @ g0)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.ones_like(s)
    flip[:, -1] = d
    rot = np.swapaxes(vt, 1, 2) @ (flip[:, :, None] * np.swapaxes(u, 1, 2))
    scale = (s * flip).sum(axis=1) / norm_p ** 2
    aligned = scale[:, None, None] * p0 @ np.swapaxes(rot, 1, 2) + mu_g
    return aligned[0] if single else aligned


def pa_mpjpe(pred, gt):
    return mpjpe(procrustes_align(pred, gt), gt)


def pck_auc(pred, gt, threshold=PCK_THRESHOLD, curve=AUC_CURVE):
    """``(pck, auc)``: fraction of joints with error strictly below ``threshold``
    and the mean of that fraction over the ``curve`` thresholds.

    An exact hit (zero error) counts as correct at every threshold, including 0.
    """
    err = joint_errors(pred, gt).ravel()
    hit = lambda t: (err < t) | (err <= 0.0)  # noqa: E731
    pck = float(np.mean(hit(threshold)))
    auc = float(np.mean([np.mean(hit(t)) for t in np.asarray(curve, dtype=np.float64)]))
    return pck, auc


@dataclass
class EvalReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pck: float
    auc: float
    n_samples: int
    per_sample_mpjpe: list = field(default_factory=list)

    def to_json(self, path=None, indent=2):
        text = json.dumps(asdict(self), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def report(pred, gt):
    """Metrics for root-relative predictions against root-relative ground truth (mm)."""
    pred, gt = _pair(pred, gt)
    pck, auc = pck_auc(pred, gt)
    return EvalReport(mpjpe_mm=mpjpe(pred, gt), pa_mpjpe_mm=pa_mpjpe(pred, gt), pck=pck, auc=auc,
                      n_samples=len(pred), per_sample_mpjpe=joint_errors(pred, gt).mean(axis=1).tolist())


def evaluate(estimator, dataset, batch_size=4096):
    """Run ``estimator`` in eval mode over ``dataset`` and score against its 3D poses."""
    if len(dataset) == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    preds = [estimate(estimator, dataset.pose2d[i:i + batch_size], dataset.cams[i:i + batch_size])
             for i in range(0, len(dataset), batch_size)]
    gt = root_center(dataset.pose3d, dataset.topology)
    return report(np.concatenate(preds), gt)


# -- view-point / position distribution ------------------------------------------------

def body_frame(pose, topo):
    """Per-pose orthonormal body axes as rows: x toward the left hip, y up the
    spine (orthogonalized), z = x cross y (facing direction)."""
    names = {n: i for i, n in enumerate(topo.joint_names)}
    try:
        lh, rh, top = names["LHip"], names["RHip"], names["Thorax"]
    except KeyError as exc:
        raise TopologyError(f"body frame needs joint {exc}") from None
    pose = np.asarray(pose, dtype=np.float64)
    x = pose[..., lh, :] - pose[..., rh, :]
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    y = pose[..., top, :] - pose[..., topo.root, :]
    y -= (y * x).sum(-1, keepdims=True) * x
    y /= np.linalg.norm(y, axis=-1, keepdims=True)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-2)


def viewpoint(pose, topo):
    """Unit vector from the subject root toward the camera origin, in body-frame coordinates."""
    pose = np.asarray(pose, dtype=np.float64)
    to_cam = -pose[..., topo.root, :]
    to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
    return (body_frame(pose, topo) @ to_cam[..., None])[..., 0]


DIST_FIELDS = ("pool", "index", "view_x", "view_y", "view_z", "pos_x", "pos_y", "pos_z")


@dataclass
class Distribution:
    """View points and root positions (mm) of a source pool and its augmentations."""

    source_view: np.ndarray
    source_pos: np.ndarray
    aug_view: np.ndarray
    aug_pos: np.ndarray
    rejected: int = 0

    def rows(self):
        for pool, view, pos in (("source", self.source_view, self.source_pos),
                                ("augmented", self.aug_view, self.aug_pos)):
            for i, (v, p) in enumerate(zip(view, pos)):
                yield {"pool": pool, "index": i, "view_x": v[0], "view_y": v[1], "view_z": v[2],
                       "pos_x": p[0], "pos_y": p[1], "pos_z": p[2]}

    def position_spread(self):
        """Trace of the root-position covariance for ``(source, augmented)``."""
        return (float(np.trace(np.cov(self.source_pos.T))), float(np.trace(np.cov(self.aug_pos.T))))

    def view_spread(self):
        return (float(np.trace(np.cov(self.source_view.T))), float(np.trace(np.cov(self.aug_view.T))))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=DIST_FIELDS)
            w.writeheader()
            for row in self.rows():
                w.writerow(row)

    def write_gnuplot(self, path):
        """Whitespace columns, one data block per pool (``index 0`` source, ``index 1`` augmented)."""
        src, aug = self.position_spread()
        with open(path, "w") as fh:
            fh.write(f"# position covariance trace: source {src:.6g} augmented {aug:.6g}\n")
            for k, (pool, view, pos) in enumerate((("source", self.source_view, self.source_pos),
                                                   ("augmented", self.aug_view, self.aug_pos))):
                if k:
                    fh.write("\n\n")
                fh.write(f"# {pool}: view_x view_y view_z pos_x pos_y pos_z\n")
                for v, p in zip(view, pos):
                    fh.write(" ".join(f"{c:.9g}" for c in (*v, *p)) + "\n")


def export_rt_distribution(augmentor, dataset, n_samples, rng=None, max_rounds=100):
    """Sample ``n_samples`` source poses and ``n_samples`` accepted augmentations.

    Rejected augmentations are redrawn, so both pools have exactly
    ``n_samples`` rows.  The augmentor runs in eval mode.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(dataset) == 0 or n_samples < 1:
        raise ShapeError("need a non-empty dataset and n_samples >= 1")
    topo = dataset.topology
    pick = rng.choice(len(dataset), n_samples, replace=n_samples > len(dataset))
    src = dataset.pose3d[pick]
    was_training = augmentor.training
    augmentor.eval()
    got, rejected = [], 0
    try:
        todo = pick
        for _ in range(max_rounds):
            res = augment_numpy(augmentor, dataset.pose3d[todo], dataset.cams[todo], rng)
            got.append(res.pose3d)
            rejected += res.rejected
            missing = n_samples - sum(len(g) for g in got)
            if missing <= 0:
                break
            todo = rng.choice(len(dataset), missing)
        else:
            raise RuntimeError("augmentor rejects nearly every sample; cannot fill the export")
    finally:
        augmentor.train(was_training)
    aug = np.concatenate(got)[:n_samples]
    return Distribution(viewpoint(src, topo), src[:, topo.root].copy(),
                        viewpoint(aug, topo), aug[:, topo.root].copy(), rejected)
