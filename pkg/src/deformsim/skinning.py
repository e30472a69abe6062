"""Dense-point motion transfer from sparse vertices, plus silhouettes.

Sparse vertex motion (one rotation + translation per vertex) drives dense
points through inverse-distance-weighted blending; per-vertex rotations are
estimated from neighborhood cross-covariances. Orientation payloads blend
linearly in quaternion space and are renormalized. Silhouette masks come
from pinhole projection with a fixed splat radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

_COINCIDENT_FLOOR = 1e-9
ROTATION_NEIGHBORS = 8
SKIN_NEIGHBORS = 4


@dataclass
class SkinBinding:
    """K nearest vertices per dense point with normalized weights."""

    indices: np.ndarray  # (M, K)
    weights: np.ndarray  # (M, K)

    def validate(self):
        if np.any(self.weights < 0):
            raise ValidationError("skin weights must be non-negative")
        sums = self.weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise ValidationError("skin weights must sum to 1 per point")
        return self


def skin_weights(points, vertices, k=SKIN_NEIGHBORS):
    """Inverse-distance weights over the K nearest vertices."""
    points = np.asarray(points, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) == 0:
        raise ValidationError("skin_weights: empty vertex set")
    k = min(k, len(vertices))
    d, idx = cKDTree(vertices).query(points, k=k)
    d = np.atleast_2d(d.astype(np.float64))
    idx = np.atleast_2d(idx)
    if d.shape[0] != len(points):  # k=1 squeezes the neighbor axis
        d, idx = d.T, idx.T
    inv = 1.0 / np.maximum(d, _COINCIDENT_FLOOR)
    w = inv / inv.sum(axis=1, keepdims=True)
    return SkinBinding(indices=idx, weights=w).validate()


def estimate_rotations(x_t, x_next, neighborhoods=None, k=ROTATION_NEIGHBORS):
    """Best-fit rotation per vertex from its neighborhood's motion.

    Returns (rotations (n,3,3), degenerate flags (n,)). Degenerate
    neighborhoods (fewer than 3 points or rank-deficient offsets) get the
    identity and a True flag.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    n = len(x_t)
    if neighborhoods is None:
        k = min(k + 1, n)
        _, neighborhoods = cKDTree(x_t).query(x_t, k=k)
        neighborhoods = np.atleast_2d(neighborhoods)

    rotations = np.tile(np.eye(3), (n, 1, 1))
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        nbr = np.asarray(neighborhoods[i])
        if nbr.size < 3:
            degenerate[i] = True
            continue
        p = x_t[nbr] - x_t[nbr].mean(axis=0)
        q = x_next[nbr] - x_next[nbr].mean(axis=0)
        h = p.T @ q
        u, s, vh = np.linalg.svd(h)
        # rank < 2 leaves the in-plane rotation unconstrained
        if s[1] <= 1e-12 * max(s[0], 1.0):
            degenerate[i] = True
            continue
        r = vh.T @ u.T
        if np.linalg.det(r) < 0:
            vh = vh.copy()
            vh[2] *= -1.0
            r = vh.T @ u.T
        rotations[i] = r
    return rotations, degenerate


def rotation_to_quaternion(r):
    """Unit quaternions (w, x, y, z) from rotation matrices (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    batch = r.shape[:-2]
    flat = r.reshape(-1, 3, 3)
    out = np.zeros((len(flat), 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            out[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            out[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            out[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return (out / norms).reshape(*batch, 4)


def lbs_apply(positions, orientations, binding, rotations, translations, anchors):
    """Blend per-vertex rigid motions onto dense points.

    Each vertex k contributes R_k (p - anchor_k) + anchor_k + T_k to a bound
    point p; contributions mix by the binding weights. Orientations blend
    linearly in quaternion space (sign-aligned to the dominant contribution)
    and renormalize.
    """
    positions = np.asarray(positions, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    translations = np.asarray(translations, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)

    idx, w = binding.indices, binding.weights
    r_sel = rotations[idx]  # (M, K, 3, 3)
    a_sel = anchors[idx]  # (M, K, 3)
    t_sel = translations[idx]
    local = positions[:, None, :] - a_sel
    moved = np.einsum("mkab,mkb->mka", r_sel, local) + a_sel + t_sel
    new_positions = np.einsum("mk,mka->ma", w, moved)

    new_orientations = None
    if orientations is not None:
        orientations = np.asarray(orientations, dtype=np.float64)
        q_rot = rotation_to_quaternion(rotations)[idx]  # (M, K, 4)
        blended = np.einsum("mk,mka->ma", w, q_rot)
        norms = np.linalg.norm(blended, axis=1, keepdims=True)
        # a fully canceling blend falls back to the nearest vertex rotation
        bad = norms[:, 0] < 1e-12
        if np.any(bad):
            blended[bad] = q_rot[bad, 0]
            norms = np.linalg.norm(blended, axis=1, keepdims=True)
        blended /= norms
        new_orientations = _quat_multiply(blended, orientations)
        new_orientations /= np.linalg.norm(new_orientations, axis=1, keepdims=True)
    return new_positions, new_orientations


def _quat_multiply(a, b):
    w1, x1, y1, z1 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )


def vertex_motion(x_t, x_next, k=ROTATION_NEIGHBORS):
    """Rotations, translations, and anchors describing one vertex step."""
    rotations, degenerate = estimate_rotations(x_t, x_next, k=k)
    translations = np.asarray(x_next, dtype=np.float64) - np.asarray(x_t, dtype=np.float64)
    return rotations, translations, np.asarray(x_t, dtype=np.float64), degenerate


def project_silhouette(points, camera, radius=2):
    """Binary mask of splatted discs from pinhole-projected points.

    Returns (mask (H, W) uint8, all_behind flag).
    """
    points = np.asarray(points, dtype=np.float64)
    mask = np.zeros((camera.height, camera.width), dtype=np.uint8)
    if len(points) == 0:
        return mask, True
    pix, depth = camera.project(points)
    front = depth > 1e-9
    if not np.any(front):
        return mask, True

    r = int(radius)
    du = np.arange(-r, r + 1)
    dv = np.arange(-r, r + 1)
    duu, dvv = np.meshgrid(du, dv, indexing="xy")
    disc = duu[duu**2 + dvv**2 <= r**2], dvv[duu**2 + dvv**2 <= r**2]
    for u, v in np.round(pix[front]).astype(np.int64):
        us = u + disc[0]
        vs = v + disc[1]
        keep = (us >= 0) & (us < camera.width) & (vs >= 0) & (vs < camera.height)
        mask[vs[keep], us[keep]] = 1
    return mask, False
