"""Oracles shared by the test modules."""

import numpy as np


def random_poses(rng, topo, n, depth=5000.0):
    """Random camera-frame poses: random bones hung off a root well in front of the camera."""
    bones = rng.normal(size=(n, topo.bone_count, 3)) * 150.0
    root = np.column_stack([rng.uniform(-500, 500, n), rng.uniform(-500, 500, n),
                            rng.uniform(depth - 500, depth + 500, n)])
    return topo.ancestry @ bones + root[:, None, :]


def numgrad(f, x, h=1e-5, coords=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (optionally only at ``coords``)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
