"""MPM engine checks: transfer identities, conservation laws, contact
projection oracles, controller behavior, and interior filling."""

import numpy as np
import pytest

from deformsim import autodiff as ad
from deformsim.errors import SimulationFault, ValidationError
from deformsim.materials import MaterialLaw
from deformsim.mpm.engine import (
    Grid,
    GridFields,
    GraspController,
    ParticleSet,
    PushController,
    SimConfig,
    g2p,
    grid_op,
    p2g,
    simulate_frame,
    stencil,
    substep,
)
from deformsim.mpm.fill import fill_interior

DX = 0.02


def make_grid(span=0.4):
    return Grid.for_bounds(np.zeros(3), np.full(3, span), DX)


def cube_positions(center, side, spacing):
    ticks = np.arange(-side / 2 + spacing / 2, side / 2, spacing)
    xx, yy, zz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3) + np.asarray(center)


def make_particles(rng=None, n=32, center=(0.2, 0.2, 0.2), spread=0.05):
    rng = rng or np.random.default_rng(0)
    x = np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3))
    return ParticleSet.from_positions(x, density=1000.0, total_volume=1e-4)


def default_props(p, E=1e4, nu=0.3):
    return {"E": np.full(p.count, E), "nu": nu, "mu": np.full(p.count, 0.4)}


ELASTIC_LAW = MaterialLaw(elastic_kind="neo_hookean", E=1e4, nu=0.3)


def no_gravity(**kw):
    kw.setdefault("gravity", (0.0, 0.0, 0.0))
    kw.setdefault("backend", "numpy")
    return SimConfig(**kw)


# -- transfer identities ---------------------------------------------------

def test_partition_of_unity():
    grid = make_grid()
    p = make_particles(n=64)
    W, _, _, _ = stencil(p.x, grid)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_weight_gradients_sum_to_zero():
    grid = make_grid()
    p = make_particles(n=64)
    _, gW, _, _ = stencil(p.x, grid)
    np.testing.assert_allclose(gW.sum(axis=1), 0.0, rtol=0, atol=1e-10)


def test_p2g_single_particle_at_node_center():
    grid = make_grid()
    pos = grid.origin + np.array([8, 8, 8]) * grid.dx
    p = ParticleSet.from_positions(pos[None, :], density=1000.0, total_volume=1e-6)
    fields = p2g(p, np.zeros((1, 3, 3)), grid)
    assert fields.m.sum() == pytest.approx(p.m[0], rel=1e-13)
    center_flat = grid.flat_index(np.array([8, 8, 8]))
    assert fields.m[center_flat] == pytest.approx(0.75**3 * p.m[0], rel=1e-12)


def test_p2g_matches_double_loop_oracle():
    grid = make_grid()
    rng = np.random.default_rng(1)
    p = make_particles(rng, n=32)
    p.v = rng.normal(size=(32, 3))
    p.C = 0.1 * rng.normal(size=(32, 3, 3))
    stresses = rng.normal(size=(32, 3, 3))
    fields = p2g(p, stresses, grid)

    # independent per-particle / per-node accumulation
    m_ref = np.zeros(grid.n_nodes)
    mom_ref = np.zeros((grid.n_nodes, 3))
    f_ref = np.zeros((grid.n_nodes, 3))
    for n in range(p.count):
        xg = (p.x[n] - grid.origin) / grid.dx
        base = np.floor(xg - 0.5).astype(int)
        fx = xg - base
        w_ax = np.stack(
            [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2]
        )
        dw_ax = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5]) / grid.dx
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    w = w_ax[i, 0] * w_ax[j, 1] * w_ax[k, 2]
                    gw = np.array(
                        [
                            dw_ax[i, 0] * w_ax[j, 1] * w_ax[k, 2],
                            w_ax[i, 0] * dw_ax[j, 1] * w_ax[k, 2],
                            w_ax[i, 0] * w_ax[j, 1] * dw_ax[k, 2],
                        ]
                    )
                    node = base + np.array([i, j, k])
                    flat = grid.flat_index(node)
                    dpos = node * grid.dx + grid.origin - p.x[n]
                    m_ref[flat] += w * p.m[n]
                    mom_ref[flat] += w * p.m[n] * (p.v[n] + p.C[n] @ dpos)
                    f_ref[flat] += -p.V0[n] * stresses[n] @ gw
    np.testing.assert_allclose(fields.m, m_ref, atol=1e-12)
    np.testing.assert_allclose(fields.mom, mom_ref, atol=1e-12)
    np.testing.assert_allclose(fields.f, f_ref, atol=1e-12)


def test_p2g_mass_conservation():
    grid = make_grid()
    p = make_particles(n=200)
    fields = p2g(p, np.zeros((200, 3, 3)), grid)
    total = float(fields.m.sum())
    assert total == pytest.approx(float(p.m.sum()), rel=1e-10)


def test_p2g_momentum_conservation_uniform_velocity():
    grid = make_grid()
    p = make_particles(n=100)
    v_star = np.array([0.3, -0.2, 0.1])
    p.v = np.broadcast_to(v_star, (100, 3)).copy()
    fields = p2g(p, np.zeros((100, 3, 3)), grid)
    total_mom = fields.mom.sum(axis=0)
    np.testing.assert_allclose(total_mom, v_star * p.m.sum(), rtol=1e-12)


# -- grid operations -------------------------------------------------------

def test_grid_op_free_fall():
    grid = make_grid()
    p = make_particles(n=50)
    cfg = SimConfig(gravity=(0.0, 0.0, -9.8), backend="numpy")
    fields = p2g(p, np.zeros((50, 3, 3)), grid)
    fields = grid_op(fields, grid, cfg)
    active = fields.m > 1e-12
    dv = fields.v[active]
    np.testing.assert_allclose(dv[:, 2], -9.8e-4, rtol=1e-10)
    np.testing.assert_allclose(dv[:, :2], 0.0, atol=1e-15)


def test_grid_op_momentum_conservation():
    grid = make_grid()
    rng = np.random.default_rng(2)
    p = make_particles(rng, n=150)
    p.v = rng.normal(scale=0.2, size=(150, 3))
    p.C = 0.5 * rng.normal(size=(150, 3, 3))
    before = (p.m[:, None] * p.v).sum(axis=0)
    cfg = no_gravity()
    fields = p2g(p, np.zeros((150, 3, 3)), grid)
    fields = grid_op(fields, grid, cfg)
    after = (fields.m[:, None] * fields.v).sum(axis=0)
    np.testing.assert_allclose(after, before, rtol=1e-10)


def test_grid_op_grasp_overwrite():
    grid = make_grid()
    p = make_particles(n=40)
    ctrl = GraspController(indices=np.arange(10))
    ctrl.bind_positions(p.x)
    u = np.array([0.1, 0.2, 0.3])
    cfg = no_gravity()
    fields = p2g(p, np.zeros((40, 3, 3)), grid)
    fields = grid_op(fields, grid, cfg, [ctrl], [u])
    mask = ctrl.node_mask(grid)
    np.testing.assert_array_equal(fields.v[mask], np.broadcast_to(u, (mask.sum(), 3)))


def test_ground_coulomb_projection_matches_scalar_oracle():
    grid = make_grid()
    cfg = SimConfig(
        gravity=(0.0, 0.0, 0.0), ground_height=grid.origin[2] + 2.5 * DX,
        mu_floor=0.5, backend="numpy",
    )
    n = grid.n_nodes
    m = np.zeros(n)
    mom = np.zeros((n, 3))
    flat = grid.flat_index(np.array([5, 5, 2]))  # node below ground height
    v_in = np.array([0.3, 0.1, -0.2])
    m[flat] = 2.0
    mom[flat] = m[flat] * v_in
    fields = grid_op(GridFields(m=m, mom=mom, f=np.zeros((n, 3))), grid, cfg)

    vt = np.array([0.3, 0.1, 0.0])
    scale = max(0.0, 1.0 - cfg.mu_floor * 0.2 / np.linalg.norm(vt))
    np.testing.assert_allclose(fields.v[flat], vt * scale, rtol=1e-12)


def test_ground_sticking_when_friction_dominates():
    grid = make_grid()
    cfg = SimConfig(
        gravity=(0.0, 0.0, 0.0), ground_height=grid.origin[2] + 2.5 * DX,
        mu_floor=5.0, backend="numpy",
    )
    n = grid.n_nodes
    m = np.zeros(n)
    mom = np.zeros((n, 3))
    flat = grid.flat_index(np.array([5, 5, 2]))
    m[flat] = 1.0
    mom[flat] = np.array([0.01, 0.0, -0.5])
    fields = grid_op(GridFields(m=m, mom=mom, f=np.zeros((n, 3))), grid, cfg)
    np.testing.assert_allclose(fields.v[flat], 0.0, atol=1e-15)


def test_push_controller_blocks_inward_flow():
    grid = make_grid()
    cfg = no_gravity()
    ctrl = PushController(shape="sphere", center=np.array([0.2, 0.2, 0.2]), radius=0.05)
    n = grid.n_nodes
    node = np.array([15, 14, 14])  # inside the sphere, off center along +x
    pos = node * grid.dx + grid.origin
    assert ctrl.sdf(pos[None, :])[0] < 0
    m = np.zeros(n)
    mom = np.zeros((n, 3))
    flat = grid.flat_index(node)
    m[flat] = 1.0
    mom[flat] = np.array([-0.3, 0.0, 0.0])  # moving toward the center
    fields = grid_op(GridFields(m=m, mom=mom, f=np.zeros((n, 3))), grid, cfg, [ctrl], [np.zeros(3)])
    normal = ctrl.normals(pos[None, :])[0]
    assert np.dot(fields.v[flat], normal) >= -1e-12


# -- grid to particle ------------------------------------------------------

def test_g2p_uniform_field_reproduction():
    grid = make_grid()
    p = make_particles(n=60)
    F0 = p.F.copy()
    x0 = p.x.copy()
    v_star = np.array([0.2, -0.1, 0.05])
    cfg = no_gravity()
    fields = GridFields(
        m=np.ones(grid.n_nodes),
        mom=np.zeros((grid.n_nodes, 3)),
        f=np.zeros((grid.n_nodes, 3)),
        v=np.broadcast_to(v_star, (grid.n_nodes, 3)).copy(),
    )
    g2p(fields, p, grid, cfg)
    np.testing.assert_allclose(p.v, np.broadcast_to(v_star, (60, 3)), rtol=1e-12)
    np.testing.assert_allclose(p.C, 0.0, atol=1e-10)
    np.testing.assert_allclose(p.F, F0, atol=1e-10)
    np.testing.assert_allclose(p.x, x0 + cfg.dt * v_star, rtol=1e-12)


def test_g2p_zero_field_keeps_state():
    grid = make_grid()
    p = make_particles(n=30)
    x0, F0 = p.x.copy(), p.F.copy()
    cfg = no_gravity()
    fields = GridFields(
        m=np.ones(grid.n_nodes),
        mom=np.zeros((grid.n_nodes, 3)),
        f=np.zeros((grid.n_nodes, 3)),
        v=np.zeros((grid.n_nodes, 3)),
    )
    g2p(fields, p, grid, cfg)
    np.testing.assert_array_equal(p.x, x0)
    np.testing.assert_allclose(p.F, F0, atol=1e-15)


def test_g2p_linear_field_reconstructs_affine_matrix():
    grid = make_grid()
    p = make_particles(n=40)
    rng = np.random.default_rng(3)
    A = 0.5 * rng.normal(size=(3, 3))
    x0 = np.array([0.2, 0.2, 0.2])
    node_pos = grid.coords * grid.dx + grid.origin
    v_field = (node_pos - x0) @ A.T
    cfg = no_gravity()
    fields = GridFields(
        m=np.ones(grid.n_nodes),
        mom=np.zeros((grid.n_nodes, 3)),
        f=np.zeros((grid.n_nodes, 3)),
        v=v_field,
    )
    g2p(fields, p, grid, cfg)
    for n in range(p.count):
        np.testing.assert_allclose(p.C[n], A, atol=1e-8)


# -- full frames -----------------------------------------------------------

def test_static_frame_is_identity():
    grid = make_grid()
    p = make_particles(n=64)
    x0 = p.x.copy()
    cfg = no_gravity(substeps_per_frame=400)
    simulate_frame(p, default_props(p), ELASTIC_LAW, grid, cfg)
    np.testing.assert_allclose(p.x, x0, atol=1e-12)
    np.testing.assert_allclose(p.v, 0.0, atol=1e-12)


def test_free_fall_matches_ballistics():
    grid = Grid.for_bounds(np.zeros(3), np.array([0.3, 0.3, 0.5]), DX)
    pos = cube_positions((0.15, 0.15, 0.4), 0.04, 0.01)
    p = ParticleSet.from_positions(pos, density=1000.0)
    cfg = SimConfig(gravity=(0.0, 0.0, -9.8), substeps_per_frame=400, backend="numpy")
    z0 = p.x[:, 2].mean()
    simulate_frame(p, default_props(p), ELASTIC_LAW, grid, cfg)
    drop = z0 - p.x[:, 2].mean()
    expected = 0.5 * 9.8 * cfg.frame_dt**2
    assert drop == pytest.approx(expected, rel=0.05)


def test_grasp_lift_displacement():
    grid = Grid.for_bounds(np.zeros(3), np.array([0.3, 0.3, 0.4]), DX)
    pos = cube_positions((0.15, 0.15, 0.15), 0.06, 0.01)
    p = ParticleSet.from_positions(pos, density=1000.0)
    top = np.where(pos[:, 2] > 0.17)[0]
    ctrl = GraspController(indices=top)
    cfg = SimConfig(gravity=(0.0, 0.0, -9.8), substeps_per_frame=400, backend="numpy")
    z0 = p.x[top, 2].mean()
    simulate_frame(p, default_props(p), ELASTIC_LAW, grid, cfg, [ctrl], [(0.0, 0.0, 0.5)])
    lifted = p.x[top, 2].mean() - z0
    assert lifted == pytest.approx(0.5 * cfg.frame_dt, rel=0.10)


def test_substep_determinism():
    grid = make_grid()
    results = []
    for _ in range(2):
        p = make_particles(n=80)
        cfg = SimConfig(substeps_per_frame=20, backend="numpy")
        simulate_frame(p, default_props(p), ELASTIC_LAW, grid, cfg)
        results.append((p.x.copy(), p.v.copy(), p.F.copy()))
    np.testing.assert_array_equal(results[0][0], results[1][0])
    np.testing.assert_array_equal(results[0][1], results[1][1])
    np.testing.assert_array_equal(results[0][2], results[1][2])


def test_particle_escape_raises():
    grid = make_grid()
    p = make_particles(n=10)
    p.x[3] = grid.origin + 0.001  # inside the forbidden margin
    with pytest.raises(SimulationFault) as err:
        p2g(p, np.zeros((10, 3, 3)), grid)
    assert "particle" in str(err.value)


def test_validation_errors():
    with pytest.raises(ValidationError):
        SimConfig(dt=-1.0)
    with pytest.raises(ValidationError):
        SimConfig(substeps_per_frame=0)
    with pytest.raises(ValidationError):
        SimConfig(grad_substeps=500, substeps_per_frame=400)
    with pytest.raises(ValidationError):
        Grid(resolution=(4, 4, 4), dx=0.1, origin=np.zeros(3))
    with pytest.raises(ValidationError):
        ParticleSet.from_positions(np.zeros((0, 3)))


# -- taped path consistency -------------------------------------------------

def test_taped_substep_matches_plain():
    grid = make_grid()
    p_plain = make_particles(n=24)
    p_taped = p_plain.copy()
    props = default_props(p_plain)
    cfg = SimConfig(ground_height=grid.origin[2] + 2.5 * DX, backend="numpy")

    substep(p_plain, props, ELASTIC_LAW, grid, cfg)

    taped_props = {
        "E": ad.Tensor(props["E"].copy(), requires_grad=True),
        "nu": props["nu"],
        "mu": ad.Tensor(props["mu"].copy(), requires_grad=True),
    }
    p_taped.x = ad.Tensor(p_taped.x)
    p_taped.v = ad.Tensor(p_taped.v)
    p_taped.C = ad.Tensor(p_taped.C)
    p_taped.F = ad.Tensor(p_taped.F)
    substep(p_taped, taped_props, ELASTIC_LAW, grid, cfg)

    np.testing.assert_allclose(ad.value_of(p_taped.x), p_plain.x, atol=1e-14)
    np.testing.assert_allclose(ad.value_of(p_taped.v), p_plain.v, atol=1e-14)
    np.testing.assert_allclose(ad.value_of(p_taped.F), p_plain.F, atol=1e-14)


# -- interior filling --------------------------------------------------------

def sphere_shell(n=1200, radius=0.1, center=(0.0, 0.0, 0.0)):
    # Fibonacci sphere: even coverage, so voxelization at the test spacing
    # is watertight
    i = np.arange(n)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r_xy = np.sqrt(1.0 - z * z)
    dirs = np.column_stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z])
    return np.asarray(center) + radius * dirs


def test_fill_sphere_volume_oracle():
    shell = sphere_shell(n=1200, radius=0.1)
    res = fill_interior(shell, target_spacing=0.02, rng=np.random.default_rng(5))
    expected = (4.0 / 3.0) * np.pi * 0.1**3 / 0.02**3
    assert res.n_interior == pytest.approx(expected, rel=0.2)
    assert not res.surface_only


def test_fill_solid_cube_idempotent():
    pos = cube_positions((0.0, 0.0, 0.0), 0.1, 0.02)
    res = fill_interior(pos, target_spacing=0.02, rng=np.random.default_rng(6))
    assert len(res.positions) >= len(pos)
    from scipy.spatial import cKDTree

    tree = cKDTree(res.positions)
    pairs = tree.query_pairs(0.02 / 2 * 0.999)
    assert len(pairs) == 0


def test_fill_flat_sheet_degenerate():
    rng = np.random.default_rng(7)
    pts = np.column_stack([rng.uniform(0, 0.2, 100), rng.uniform(0, 0.2, 100), np.zeros(100)])
    res = fill_interior(pts, target_spacing=0.02)
    assert res.surface_only
    np.testing.assert_array_equal(res.positions, pts)


def test_fill_rejects_tiny_input():
    with pytest.raises(ValidationError):
        fill_interior(np.random.default_rng(0).normal(size=(10, 3)), 0.02)
