"""Constitutive laws: Kirchhoff stress models and plastic return mapping.

All functions are pure, batched over particles, and polymorphic over plain
ndarrays and autodiff Tensors (see :mod:`deformsim.autodiff`), so the same
code serves the fast simulation path and the recorded gradient window.

Stress conventions per elastic kind (tau denotes Kirchhoff stress):

- fixed_corotated:         tau = 2 mu (F - R) F^T + lam (J - 1) J I
- neo_hookean:             tau = mu (F F^T - I) + lam ln(J) I
- stvk:                    tau = F (2 mu G + lam tr(G) I) F^T,  G = (F^T F - I)/2
- drucker_prager_elastic:  tau = U (2 mu eps + lam tr(eps) I) U^T,  eps = log(S)
- anisotropic_cloth:       weak neo-hookean matrix + quadratic fiber stretch
                           penalty: tau += E (s - 1)/s (F a)(F a)^T, s = |F a|

Plastic kinds project the trial deformation gradient in principal Hencky
strain space: von_mises clamps the deviatoric norm to sigma_y / (2 mu);
drucker_prager additionally couples in pressure through the cone constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

ELASTIC_KINDS = (
    "fixed_corotated",
    "neo_hookean",
    "stvk",
    "drucker_prager_elastic",
    "anisotropic_cloth",
)
PLASTIC_KINDS = ("purely_elastic", "von_mises", "drucker_prager")

# matrix stiffness of the cloth law relative to mu (fiber carries the rest)
CLOTH_MATRIX_SCALE = 0.1


@dataclass
class MaterialLaw:
    """Material model selection plus default scalar parameters.

    Per-particle property arrays override E, nu, sigma_y at call sites; the
    law object carries the structural choices (kinds, fiber direction).
    """

    elastic_kind: str = "fixed_corotated"
    plastic_kind: str = "purely_elastic"
    E: float = 1e5
    nu: float = 0.3
    sigma_y: float = 1e4
    friction_angle: float = 0.5
    fiber_direction: tuple | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.elastic_kind not in ELASTIC_KINDS:
            raise ValidationError(f"unknown elastic kind {self.elastic_kind!r}")
        if self.plastic_kind not in PLASTIC_KINDS:
            raise ValidationError(f"unknown plastic kind {self.plastic_kind!r}")
        if not self.E > 0:
            raise ValidationError("E must be positive")
        if not (0.0 <= self.nu < 0.5):
            raise ValidationError("nu must lie in [0, 0.5)")
        if self.sigma_y < 0:
            raise ValidationError("sigma_y must be non-negative")
        if self.elastic_kind == "anisotropic_cloth":
            if self.fiber_direction is None:
                raise ValidationError("cloth law requires a fiber direction")
            d = np.asarray(self.fiber_direction, dtype=np.float64)
            if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
                raise ValidationError("fiber direction must be a unit 3-vector")


def lame(E, nu):
    """Convert Young's modulus / Poisson ratio to Lame parameters (mu, lam).

    Args:
        E: Young's modulus (Pa), scalar or array, may be a Tensor.
        nu: Poisson ratio, scalar or array.

    Returns:
        (mu, lam) with mu = E / (2 (1 + nu)), lam = E nu / ((1 + nu)(1 - 2 nu)).

    Raises:
        ValidationError: nu within 1e-6 of the incompressible limit 0.5.
    """
    nu_val = ad.value_of(nu)
    if np.any(nu_val >= 0.5 - 1e-6):
        raise ValidationError("nu too close to 0.5 (near-incompressible)")
    mu = ad.div(E, ad.mul(2.0, ad.add(1.0, nu)))
    lam = ad.div(ad.mul(E, nu), ad.mul(ad.add(1.0, nu), ad.sub(1.0, ad.mul(2.0, nu))))
    return mu, lam


def _eye_like(F):
    return np.broadcast_to(np.eye(3), ad.value_of(F).shape).copy()


def _spherical(scale, F):
    """scale[..., None, None] * I, broadcast against F's batch shape."""
    return ad.mul(ad.reshape(scale, ad.value_of(scale).shape + (1, 1)), _eye_like(F))


def _expand(p, F):
    """Broadcast a scalar-or-(N,) property against (N,3,3) matrices."""
    val = ad.value_of(p)
    if val.ndim == 0:
        return p
    return ad.reshape(p, val.shape + (1, 1))


def _vec(p):
    """Broadcast a scalar-or-(N,) property against (N, 3) vectors."""
    val = ad.value_of(p)
    if val.ndim == 0:
        return p
    return ad.reshape(p, val.shape + (1,))


def rotation_from_svd(F):
    """Polar rotation R = U V^T with det(R) = +1 (reflections folded out)."""
    u, s, v = ad.svd3(F)
    r = ad.matmul(u, ad.transpose_last2(v))
    det = np.linalg.det(ad.value_of(r))
    if np.any(det < 0):
        # flip the last column of U where the product picked up a reflection
        flip = np.ones_like(ad.value_of(u))
        flip[..., :, 2] = np.where(det[..., None] < 0, -1.0, 1.0)
        u = ad.mul(u, flip)
        r = ad.matmul(u, ad.transpose_last2(v))
    return r


def kirchhoff_stress(F, law, E=None, nu=None):
    """Kirchhoff stress tau for a batch of deformation gradients.

    Args:
        F: (..., 3, 3) deformation gradients (Tensor or ndarray).
        law: MaterialLaw selecting the elastic model.
        E: optional override of law.E, scalar or per-particle (...,) array.
        nu: optional override of law.nu.

    Returns:
        (..., 3, 3) Kirchhoff stress, same container kind as the inputs.

    Raises:
        ValidationError: non-positive det(F) on the plain (non-taped) path.
    """
    E = law.E if E is None else E
    nu = law.nu if nu is None else nu
    mu, lam = lame(E, nu)
    j_val = np.linalg.det(ad.value_of(F))
    if not isinstance(F, ad.Tensor) and np.any(j_val <= 0):
        raise ValidationError("kirchhoff_stress requires det(F) > 0")

    kind = law.elastic_kind
    if kind == "fixed_corotated":
        return _tau_fixed_corotated(F, mu, lam)
    if kind == "neo_hookean":
        return _tau_neo_hookean(F, mu, lam)
    if kind == "stvk":
        return _tau_stvk(F, mu, lam)
    if kind == "drucker_prager_elastic":
        return _tau_hencky(F, mu, lam)
    if kind == "anisotropic_cloth":
        return _tau_cloth(F, mu, lam, E, law.fiber_direction)
    raise ValidationError(f"unknown elastic kind {kind!r}")


def _tau_fixed_corotated(F, mu, lam):
    r = rotation_from_svd(F)
    j = ad.det3(F)
    two_mu = ad.mul(2.0, _expand(mu, F))
    dev = ad.matmul(ad.sub(F, r), ad.transpose_last2(F))
    vol = ad.mul(ad.mul(lam, ad.sub(j, 1.0)), j)
    return ad.add(ad.mul(two_mu, dev), _spherical(vol, F))


def _tau_neo_hookean(F, mu, lam):
    b = ad.matmul(F, ad.transpose_last2(F))
    j = ad.det3(F)
    dev = ad.mul(_expand(mu, F), ad.sub(b, _eye_like(F)))
    vol = ad.mul(lam, ad.log(j))
    return ad.add(dev, _spherical(vol, F))


def _tau_stvk(F, mu, lam):
    c = ad.matmul(ad.transpose_last2(F), F)
    green = ad.mul(0.5, ad.sub(c, _eye_like(F)))
    s = ad.add(
        ad.mul(ad.mul(2.0, _expand(mu, F)), green),
        _spherical(ad.mul(lam, ad.trace3(green)), F),
    )
    return ad.matmul(ad.matmul(F, s), ad.transpose_last2(F))


def _tau_hencky(F, mu, lam):
    u, s, _ = ad.svd3(F)
    eps = ad.log(s)
    tr = ad.sum_(eps, axis=-1, keepdims=True)
    coef = ad.add(ad.mul(2.0, ad.mul(_vec(mu), eps)), ad.mul(_vec(lam), tr))
    coef_shape = ad.value_of(coef).shape
    coef_row = ad.reshape(coef, coef_shape[:-1] + (1, 3))
    return ad.matmul(ad.mul(u, coef_row), ad.transpose_last2(u))


def _tau_cloth(F, mu, lam, E, fiber_direction):
    a = np.asarray(fiber_direction, dtype=np.float64)
    fa = ad.matmul(F, a)
    s = ad.norm(fa, axis=-1)
    batch = ad.value_of(fa).shape[:-1]
    outer = ad.mul(ad.reshape(fa, batch + (3, 1)), ad.reshape(fa, batch + (1, 3)))
    gain = ad.div(ad.mul(E, ad.sub(s, 1.0)), s)
    fiber = ad.mul(_expand(gain, F), outer)
    base = _tau_neo_hookean(F, ad.mul(CLOTH_MATRIX_SCALE, mu), ad.mul(CLOTH_MATRIX_SCALE, lam))
    return ad.add(base, fiber)


def energy_density(F, law, E=None, nu=None):
    """Stored elastic energy per unit rest volume (oracle for stress checks).

    Defined so that d(energy)/dF = tau F^{-T} for each law above.
    """
    E = law.E if E is None else E
    nu = law.nu if nu is None else nu
    mu, lam = lame(E, nu)
    F = ad.value_of(F)
    mu = ad.value_of(mu)
    lam = ad.value_of(lam)
    kind = law.elastic_kind
    if kind == "fixed_corotated":
        s = np.linalg.svd(F, compute_uv=False)
        j = np.linalg.det(F)
        return mu * np.sum((s - 1.0) ** 2, axis=-1) + 0.5 * lam * (j - 1.0) ** 2
    if kind == "neo_hookean":
        j = np.linalg.det(F)
        i1 = np.einsum("...ij,...ij->...", F, F)
        return 0.5 * mu * (i1 - 3.0) - mu * np.log(j) + 0.5 * lam * np.log(j) ** 2
    if kind == "stvk":
        green = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(3))
        tr = np.trace(green, axis1=-2, axis2=-1)
        return mu * np.einsum("...ij,...ij->...", green, green) + 0.5 * lam * tr**2
    if kind == "drucker_prager_elastic":
        s = np.linalg.svd(F, compute_uv=False)
        eps = np.log(s)
        return mu * np.sum(eps**2, axis=-1) + 0.5 * lam * np.sum(eps, axis=-1) ** 2
    if kind == "anisotropic_cloth":
        a = np.asarray(law.fiber_direction, dtype=np.float64)
        s = np.linalg.norm(F @ a, axis=-1)
        base_law = MaterialLaw(elastic_kind="neo_hookean", E=law.E, nu=law.nu)
        e_val = ad.value_of(E)
        base = CLOTH_MATRIX_SCALE * energy_density(F, base_law, E=e_val, nu=nu)
        return base + 0.5 * e_val * (s - 1.0) ** 2
    raise ValidationError(f"unknown elastic kind {kind!r}")


def plastic_return(F_trial, law, E=None, nu=None, sigma_y=None):
    """Project a trial deformation gradient back onto the yield surface.

    Operates on plain ndarrays (the recorded gradient path treats the
    projection as a constant correction; see the engine).

    Args:
        F_trial: (..., 3, 3) trial deformation gradients.
        law: MaterialLaw selecting the plastic model.
        E, nu, sigma_y: optional per-particle overrides.

    Returns:
        Projected deformation gradients, same shape.
    """
    if law.plastic_kind == "purely_elastic":
        return np.asarray(F_trial, dtype=np.float64)
    F_trial = np.asarray(F_trial, dtype=np.float64)
    E = ad.value_of(law.E if E is None else E)
    nu = ad.value_of(law.nu if nu is None else nu)
    sigma_y = ad.value_of(law.sigma_y if sigma_y is None else sigma_y)
    mu, lam = lame(E, nu)
    mu = ad.value_of(mu)
    lam = ad.value_of(lam)

    u, s, vh = np.linalg.svd(F_trial)
    eps = np.log(np.maximum(s, 1e-12))
    if law.plastic_kind == "von_mises":
        eps_new = _von_mises_project(eps, mu, sigma_y)
    else:
        eps_new = _drucker_prager_project(eps, mu, lam, law.friction_angle)
    return (u * np.exp(eps_new)[..., None, :]) @ vh


def _von_mises_project(eps, mu, sigma_y):
    mean = eps.mean(axis=-1, keepdims=True)
    dev = eps - mean
    dev_norm = np.linalg.norm(dev, axis=-1)
    radius = sigma_y / (2.0 * mu)
    over = dev_norm - radius
    yields = over > 0.0
    safe = np.where(dev_norm > 0.0, dev_norm, 1.0)
    scale = np.where(yields, radius / safe, 1.0)
    return mean + dev * scale[..., None]


def _drucker_prager_project(eps, mu, lam, friction_angle):
    sin_phi = np.sin(friction_angle)
    alpha = np.sqrt(2.0 / 3.0) * 2.0 * sin_phi / (3.0 - sin_phi)
    tr = eps.sum(axis=-1)
    dev = eps - tr[..., None] / 3.0
    dev_norm = np.linalg.norm(dev, axis=-1)
    expanding = tr > 0.0
    gamma = dev_norm + alpha * (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr
    yields = (gamma > 0.0) & ~expanding
    safe = np.where(dev_norm > 0.0, dev_norm, 1.0)
    scale = np.where(yields, np.maximum(dev_norm - gamma, 0.0) / safe, 1.0)
    out = tr[..., None] / 3.0 + dev * scale[..., None]
    # expansion beyond the cone apex: project to the rest state
    return np.where(expanding[..., None], np.zeros_like(eps), out)
