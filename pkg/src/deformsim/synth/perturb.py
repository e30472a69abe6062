"""Spatially correlated property perturbations for demonstration diversity.

Each particle gets a geometry-aware feature vector: spectral coordinates of
the k-nearest-neighbor graph (Laplacian eigenvectors) when no segmentation
is available, or a one-hot part encoding when it is. A squared-exponential
kernel over those features defines a Gaussian field, so perturbations vary
smoothly within a part and decorrelate across parts. Sampling goes through
Nystrom landmarks, which costs O(N m^2) instead of the O(N^3) exact draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ..calibrate import BOUNDS
from ..errors import ValidationError

PROPERTY_COLUMNS = ("E", "mu", "rho")
_LOG_SPACE = {"E": True, "mu": False, "rho": True}


@dataclass(eq=False)
class PerturbationConfig:
    """Field scales per property plus the kernel and landmark settings.

    Stiffness and density perturb in log10 space (multiplicative physics),
    friction linearly. sigma of zero disables a property entirely.
    """

    ell: float = 1.0
    sigma_e: float = 0.08
    sigma_mu: float = 0.05
    sigma_rho: float = 0.04
    landmarks: int = 64
    feature_dim: int = 8
    neighbors: int = 12

    def __post_init__(self):
        if self.ell <= 0:
            raise ValidationError("kernel length scale ell must be positive")
        for name in ("sigma_e", "sigma_mu", "sigma_rho"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.landmarks < 1:
            raise ValidationError("need at least one landmark")
        if self.feature_dim < 1 or self.neighbors < 1:
            raise ValidationError("feature_dim and neighbors must be positive")

    @property
    def sigmas(self):
        return {"E": self.sigma_e, "mu": self.sigma_mu, "rho": self.sigma_rho}


def part_features(positions, labels=None, d=8, k=12):
    """Per-particle feature vectors for the perturbation kernel.

    With labels: one-hot rows, one column per distinct label. Without:
    the first d non-constant eigenvectors of the k-NN graph Laplacian,
    each weighted by 1/sqrt(eigenvalue) (the commute-time embedding), so
    weakly connected parts land far apart while smooth within-part modes
    stay small. A single overall factor then sets the mean squared pair
    distance to 2, matching the one-hot scale, so the same ell suits both.
    Disconnected graph components are bridged through their nearest point
    pair first, so the spectrum still separates parts instead of going
    degenerate.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValidationError("positions must be an (N, 3) array")
    n = len(positions)
    if n == 0:
        raise ValidationError("need at least one particle")

    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValidationError("labels must supply one value per particle")
        values = np.unique(labels)
        return (labels[:, None] == values[None, :]).astype(np.float64)

    if n < d + 1:
        raise ValidationError(
            f"need more than {d} particles for {d} spectral features, got {n}"
        )
    diff = positions[:, None, :] - positions[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist2, np.inf)
    k_eff = min(k, n - 1)
    nn = np.argsort(dist2, axis=1, kind="stable")[:, :k_eff]

    adj = np.zeros((n, n), dtype=bool)
    adj[np.repeat(np.arange(n), k_eff), nn.ravel()] = True
    adj |= adj.T

    while True:
        n_comp, comp = connected_components(csr_matrix(adj), directed=False)
        if n_comp == 1:
            break
        a = np.nonzero(comp == comp[0])[0]
        b = np.nonzero(comp != comp[0])[0]
        cross = dist2[np.ix_(a, b)]
        i, j = np.unravel_index(np.argmin(cross), cross.shape)
        adj[a[i], b[j]] = adj[b[j], a[i]] = True

    lap = np.diag(adj.sum(axis=1).astype(np.float64)) - adj.astype(np.float64)
    vals, vecs = np.linalg.eigh(lap)
    feats = vecs[:, 1 : d + 1] / np.sqrt(np.maximum(vals[1 : d + 1], 1e-12))
    # mean squared pairwise distance is 2 * total column variance; unit-norm
    # zero-mean eigenvectors make each column's variance exactly 1/(n lambda)
    return feats / np.sqrt(np.sum(feats.var(axis=0)))


def kernel_matrix(feats_a, feats_b, ell):
    """Squared-exponential similarity exp(-|dF|^2 / (2 ell^2))."""
    if ell <= 0:
        raise ValidationError("kernel length scale ell must be positive")
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-0.5 * d2 / (ell * ell))


def farthest_point_indices(points, m):
    """Greedy farthest-point subset of size m, seeded at index 0."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= m <= n:
        raise ValidationError(f"cannot pick {m} landmarks from {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    d2 = ((points - points[0]) ** 2).sum(axis=-1)
    for s in range(1, m):
        idx = int(np.argmax(d2))
        chosen[s] = idx
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=-1))
    return chosen


def nystrom_factor(features, ell, landmarks):
    """Landmark indices and weights W with field covariance sigma^2 W W^T.

    W = K_Nm V diag(lambda^-1/2) for the landmark kernel's eigensystem, so
    W W^T = K_Nm K_mm^-1 K_mN, the Nystrom approximation of the full kernel
    (exact when every point is a landmark).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValidationError("features must be a nonempty (N, d) array")
    m = min(int(landmarks), len(features))
    if m < 1:
        raise ValidationError("need at least one landmark")
    idx = farthest_point_indices(features, m)
    k_nm = kernel_matrix(features, features[idx], ell)
    k_mm = k_nm[idx]
    vals, vecs = np.linalg.eigh(k_mm)
    if vals.min() < 1e-10:  # duplicate landmarks make K_mm rank-deficient
        vals, vecs = np.linalg.eigh(k_mm + 1e-8 * np.eye(m))
    weights = k_nm @ (vecs / np.sqrt(np.clip(vals, 1e-12, None)))
    return idx, weights


def nystrom_sample(features, ell, sigma, landmarks, rng):
    """One draw of the correlated field, shape (N,). sigma 0 is exactly zero."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValidationError("features must be a nonempty (N, d) array")
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    if sigma == 0.0:
        return np.zeros(len(features))
    _, weights = nystrom_factor(features, ell, landmarks)
    return sigma * (weights @ rng.standard_normal(weights.shape[1]))


def perturb_properties(base, features, config, rng):
    """Perturb an (N, 3) property table (columns E, mu, rho) in one draw.

    Log-space properties get 10**delta factors, linear ones get additive
    offsets; every column is clamped to the calibration bounds afterward.
    """
    base = np.asarray(base, dtype=np.float64)
    n = len(features)
    if base.shape != (n, len(PROPERTY_COLUMNS)):
        raise ValidationError(
            f"properties must be ({n}, {len(PROPERTY_COLUMNS)}), got {base.shape}"
        )
    if np.any(base <= 0) or not np.all(np.isfinite(base)):
        raise ValidationError("base properties must be positive and finite")
    out = base.copy()
    sigmas = config.sigmas
    for col, name in enumerate(PROPERTY_COLUMNS):
        if sigmas[name] == 0.0:
            continue  # zero scale is the identity, not a log10 roundtrip
        delta = nystrom_sample(features, config.ell, sigmas[name], config.landmarks, rng)
        if _LOG_SPACE[name]:
            values = 10.0 ** (np.log10(base[:, col]) + delta)
        else:
            values = base[:, col] + delta
        lo, hi = BOUNDS[name]
        out[:, col] = np.clip(values, lo, hi)
    return out
