"""Constitutive-law checks: rest states, frame indifference, energy
derivatives against finite differences, and return-mapping oracles."""

import numpy as np
import pytest

from deformsim import autodiff as ad
from deformsim.errors import ValidationError
from deformsim.materials import (
    ELASTIC_KINDS,
    MaterialLaw,
    energy_density,
    kirchhoff_stress,
    lame,
    plastic_return,
    rotation_from_svd,
)


def make_law(kind, **kw):
    if kind == "anisotropic_cloth":
        kw.setdefault("fiber_direction", (1.0, 0.0, 0.0))
    return MaterialLaw(elastic_kind=kind, **kw)


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_deformation(rng, scale=0.3):
    F = np.eye(3) + scale * rng.normal(size=(3, 3))
    if np.linalg.det(F) <= 0.05:
        F = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    return F


def test_lame_values():
    mu, lam = lame(1.0, 0.0)
    assert mu == pytest.approx(0.5)
    assert lam == pytest.approx(0.0)
    mu, lam = lame(1e5, 0.3)
    assert mu == pytest.approx(38461.538, rel=1e-5)
    assert lam == pytest.approx(57692.307, rel=1e-5)


def test_lame_rejects_near_incompressible():
    with pytest.raises(ValidationError):
        lame(1e5, 0.499999)


@pytest.mark.parametrize("kind", ELASTIC_KINDS)
def test_zero_stress_at_rest(kind):
    law = make_law(kind, E=2e4, nu=0.25)
    tau = kirchhoff_stress(np.eye(3), law)
    assert np.max(np.abs(tau)) <= 1e-12


def test_fcr_zero_stress_under_rotation():
    rng = np.random.default_rng(0)
    law = make_law("fixed_corotated", E=1e5, nu=0.3)
    for _ in range(5):
        R = random_rotation(rng)
        tau = kirchhoff_stress(R, law)
        assert np.max(np.abs(tau)) <= 1e-9 * law.E


@pytest.mark.parametrize("kind", ["fixed_corotated", "neo_hookean"])
def test_frame_indifference(kind):
    rng = np.random.default_rng(1)
    law = make_law(kind, E=1e4, nu=0.3)
    for _ in range(5):
        F = random_deformation(rng)
        R = random_rotation(rng)
        tau_rot = kirchhoff_stress(R @ F, law)
        expected = R @ kirchhoff_stress(F, law) @ R.T
        rel = np.linalg.norm(tau_rot - expected) / max(np.linalg.norm(expected), 1e-9)
        assert rel <= 1e-8


@pytest.mark.parametrize("kind", ELASTIC_KINDS)
def test_stress_is_energy_derivative(kind):
    rng = np.random.default_rng(2)
    law = make_law(kind, E=10.0, nu=0.3)
    for _ in range(4):
        F = random_deformation(rng, scale=0.25)
        tau = kirchhoff_stress(F, law)
        P = tau @ np.linalg.inv(F).T

        def psi(F_flat):
            return energy_density(F_flat.reshape(3, 3), law)

        g = np.zeros(9)
        h = 1e-6
        flat = F.reshape(-1).copy()
        for i in range(9):
            old = flat[i]
            flat[i] = old + h
            fp = psi(flat)
            flat[i] = old - h
            fm = psi(flat)
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
        rel = np.linalg.norm(P.reshape(-1) - g) / max(np.linalg.norm(g), 1e-12)
        assert rel <= 1e-4, f"{kind}: rel {rel:.2e}"


def test_neo_hookean_small_strain_limit():
    law = make_law("neo_hookean", E=1e5, nu=0.3)
    mu, lam = lame(law.E, law.nu)
    tau = kirchhoff_stress(np.diag([1.01, 1.0, 1.0]), law)
    predicted = 2 * mu * 0.01 + lam * 0.01
    assert tau[0, 0] == pytest.approx(predicted, rel=0.05)


def test_batched_matches_loop():
    rng = np.random.default_rng(3)
    law = make_law("fixed_corotated", E=5e4, nu=0.2)
    F = np.stack([random_deformation(rng) for _ in range(6)])
    E = rng.uniform(1e4, 1e5, size=6)
    batched = kirchhoff_stress(F, law, E=E)
    for i in range(6):
        single = kirchhoff_stress(F[i], law, E=E[i])
        np.testing.assert_allclose(batched[i], single, rtol=1e-12, atol=1e-9)


def test_rejects_inverted_deformation():
    law = make_law("neo_hookean")
    with pytest.raises(ValidationError):
        kirchhoff_stress(np.diag([-1.0, 1.0, 1.0]), law)


def test_rotation_from_svd_handles_reflection_free_case():
    rng = np.random.default_rng(4)
    F = np.stack([random_deformation(rng) for _ in range(4)])
    R = rotation_from_svd(F)
    dets = np.linalg.det(R)
    np.testing.assert_allclose(dets, 1.0, atol=1e-10)
    rtr = np.swapaxes(R, -1, -2) @ R
    np.testing.assert_allclose(rtr, np.broadcast_to(np.eye(3), rtr.shape), atol=1e-10)


def test_property_gradients_flow():
    rng = np.random.default_rng(5)
    law = make_law("neo_hookean", E=1e4, nu=0.3)
    F = np.stack([random_deformation(rng) for _ in range(3)])
    proj = rng.normal(size=(3, 3, 3))
    E0 = np.full(3, 1e4)

    def loss_of(E_arr):
        tau = kirchhoff_stress(F, law, E=E_arr)
        return ad.sum_(ad.mul(tau, proj))

    e_t = ad.Tensor(E0.copy(), requires_grad=True)
    ad_loss = loss_of(e_t)
    ad_loss.backward()
    h = 1.0  # E is O(1e4); relative step 1e-4
    for i in range(3):
        ep = E0.copy()
        ep[i] += h
        em = E0.copy()
        em[i] -= h
        fd = (float(loss_of(ep)) - float(loss_of(em))) / (2 * h)
        assert e_t.grad[i] == pytest.approx(fd, rel=1e-5)


def test_plastic_purely_elastic_identity():
    rng = np.random.default_rng(6)
    law = MaterialLaw(plastic_kind="purely_elastic")
    F = random_deformation(rng)
    np.testing.assert_array_equal(plastic_return(F, law), F)


def test_von_mises_inside_yield_unchanged():
    law = MaterialLaw(plastic_kind="von_mises", E=1e5, nu=0.3, sigma_y=1e9)
    F = np.diag([1.01, 0.99, 1.0])
    np.testing.assert_allclose(plastic_return(F, law), F, atol=1e-12)


def test_von_mises_projects_to_yield_radius():
    law = MaterialLaw(plastic_kind="von_mises", E=1e5, nu=0.3, sigma_y=100.0)
    mu, _ = lame(law.E, law.nu)
    F = np.diag([2.0, 0.5, 1.0])
    Fp = plastic_return(F, law)
    s = np.linalg.svd(Fp, compute_uv=False)
    eps = np.log(s)
    dev = eps - eps.mean()
    radius = law.sigma_y / (2 * mu)
    assert np.linalg.norm(dev) == pytest.approx(radius, abs=1e-8)


@pytest.mark.parametrize("plastic", ["von_mises", "drucker_prager"])
def test_return_mapping_idempotent(plastic):
    rng = np.random.default_rng(7)
    law = MaterialLaw(plastic_kind=plastic, E=1e5, nu=0.3, sigma_y=50.0, friction_angle=0.6)
    F = np.stack([random_deformation(rng, scale=0.5) for _ in range(5)])
    once = plastic_return(F, law)
    twice = plastic_return(once, law)
    np.testing.assert_allclose(twice, once, atol=1e-10)


def test_drucker_prager_expansion_resets():
    law = MaterialLaw(plastic_kind="drucker_prager", E=1e5, nu=0.3, friction_angle=0.6)
    F = np.diag([1.2, 1.1, 1.3])  # positive trace of log strain
    Fp = plastic_return(F, law)
    s = np.linalg.svd(Fp, compute_uv=False)
    np.testing.assert_allclose(s, 1.0, atol=1e-10)


def test_law_validation():
    with pytest.raises(ValidationError):
        MaterialLaw(elastic_kind="bouncy")
    with pytest.raises(ValidationError):
        MaterialLaw(plastic_kind="sticky")
    with pytest.raises(ValidationError):
        MaterialLaw(E=-1.0)
    with pytest.raises(ValidationError):
        MaterialLaw(nu=0.6)
    with pytest.raises(ValidationError):
        MaterialLaw(elastic_kind="anisotropic_cloth")  # missing fiber
    with pytest.raises(ValidationError):
        MaterialLaw(elastic_kind="anisotropic_cloth", fiber_direction=(1.0, 1.0, 0.0))
