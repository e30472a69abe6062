"""Explicit MPM substep engine: P2G, grid operations, G2P.

Quadratic B-spline transfers with APIC affine velocity. The substep math is
written against :mod:`deformsim.autodiff`, so the same code runs eagerly on
ndarrays (simulation) or on tape Tensors (the recorded gradient window).
A numba fast path for plain simulation lives in :mod:`deformsim.mpm.fast`.

Conventions: grid state is stored flat (n_nodes = nx*ny*nz) in x-major
order; stencils cover the 27 nodes around each particle; particles must stay
at least two cells away from the grid boundary.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import SimulationFault, ValidationError
from ..materials import MaterialLaw, kirchhoff_stress, plastic_return

_OFFSETS = np.array([[i, j, k] for i in range(3) for j in range(3) for k in range(3)])
_MASS_EPS = 1e-12
# added to the squared tangential speed: keeps the Coulomb division finite at
# vt = 0 (where the max() clamp yields sticking anyway) without measurably
# perturbing physical-scale velocities
_TANGENT_EPS = 1e-24


@dataclass
class ParticleSet:
    """Material point state arrays, all length N."""

    x: np.ndarray  # (N,3) positions, m
    v: np.ndarray  # (N,3) velocities, m/s
    C: np.ndarray  # (N,3,3) affine velocity, 1/s
    F: np.ndarray  # (N,3,3) deformation gradient
    m: np.ndarray  # (N,) masses, kg
    V0: np.ndarray  # (N,) rest volumes, m^3

    @classmethod
    def from_positions(cls, positions, density=1000.0, total_volume=None):
        """Rest-state particles at the given positions.

        Volume is split evenly; mass follows the (scalar or per-particle)
        density.
        """
        x = np.asarray(positions, dtype=np.float64)
        n = len(x)
        if n == 0:
            raise ValidationError("empty particle set")
        if total_volume is None:
            span = x.max(axis=0) - x.min(axis=0)
            total_volume = float(np.prod(np.maximum(span, 1e-3)))
        V0 = np.full(n, total_volume / n)
        m = np.asarray(density, dtype=np.float64) * V0
        if m.ndim == 0:
            m = np.full(n, float(m))
        return cls(
            x=x.copy(),
            v=np.zeros((n, 3)),
            C=np.zeros((n, 3, 3)),
            F=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
            m=m,
            V0=V0,
        )

    @property
    def count(self):
        return len(self.x)

    def validate(self):
        n = self.count
        for name in ("x", "v", "C", "F", "m", "V0"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"particle field {name} has wrong length")
        if not np.all(self.m > 0):
            raise ValidationError("particle masses must be positive")
        if not np.all(self.V0 > 0):
            raise ValidationError("particle volumes must be positive")
        if np.any(np.linalg.det(self.F) <= 0):
            raise ValidationError("deformation gradients must have positive det")

    def copy(self):
        return ParticleSet(
            x=self.x.copy(),
            v=self.v.copy(),
            C=self.C.copy(),
            F=self.F.copy(),
            m=self.m.copy(),
            V0=self.V0.copy(),
        )


@dataclass
class Grid:
    """Static background grid geometry; node state lives in GridFields."""

    resolution: tuple  # (nx, ny, nz)
    dx: float
    origin: np.ndarray  # (3,)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.dx <= 0:
            raise ValidationError("grid spacing must be positive")
        if any(r < 8 for r in self.resolution):
            raise ValidationError("grid resolution must be at least 8 per axis")
        nx, ny, nz = self.resolution
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        self.coords = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        self.node_z = self.origin[2] + self.coords[:, 2] * self.dx

    @property
    def n_nodes(self):
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @classmethod
    def for_bounds(cls, lo, hi, dx, pad_cells=4):
        """Grid covering [lo, hi] with pad_cells of clearance on every side."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        origin = lo - pad_cells * dx
        res = np.ceil((hi - lo) / dx).astype(int) + 2 * pad_cells + 1
        res = np.maximum(res, 8)
        return cls(resolution=tuple(res), dx=float(dx), origin=origin)

    def flat_index(self, ijk):
        nx, ny, nz = self.resolution
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]


@dataclass
class GridFields:
    """Per-node state produced by p2g / grid_op (flat arrays, may be taped)."""

    m: object  # (n,) mass
    mom: object  # (n,3) momentum
    f: object  # (n,3) internal force
    mu: object | None = None  # (n,) mass-weighted friction, optional
    v: object | None = None  # (n,3) velocity, set by grid_op


@dataclass
class GraspController:
    """Kinematic grasp: grid nodes around attached particles follow the
    commanded velocity exactly."""

    indices: np.ndarray

    kind = "grasp"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) == 0:
            raise ValidationError("grasp controller needs attached particles")
        self._x_cache = None

    def bind_positions(self, x_vals):
        """Stash current particle positions; node_mask reads them."""
        self._x_cache = x_vals

    def node_mask(self, grid):
        if self._x_cache is None:
            raise ValidationError("grasp controller has no bound positions")
        base = np.floor(
            (self._x_cache[self.indices] - grid.origin) / grid.dx - 0.5
        ).astype(np.int64)
        nodes = base[:, None, :] + _OFFSETS[None, :, :]
        flat = np.unique(grid.flat_index(nodes).reshape(-1))
        mask = np.zeros(grid.n_nodes, dtype=bool)
        mask[flat] = True
        return mask

    def reference_point(self, x_vals):
        return x_vals[self.indices].mean(axis=0)

    def advance(self, velocity, dt):
        pass  # attachment rides with the particles


@dataclass
class PushController:
    """Rigid SDF pusher (sphere, box, or capsule) with Coulomb friction."""

    shape: str
    center: np.ndarray
    radius: float = 0.02
    half_extents: np.ndarray | None = None
    axis_half_length: float = 0.03
    friction: float = 0.3

    kind = "push"

    def __post_init__(self):
        self.shape = str(self.shape)
        if self.shape not in ("sphere", "box", "capsule"):
            raise ValidationError(f"unknown push shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64).copy()
        if self.half_extents is not None:
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def sdf(self, points):
        d = points - self.center
        if self.shape == "sphere":
            return np.linalg.norm(d, axis=-1) - self.radius
        if self.shape == "box":
            q = np.abs(d) - self.half_extents
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        # capsule along z
        z = np.clip(d[:, 2], -self.axis_half_length, self.axis_half_length)
        closest = np.zeros_like(d)
        closest[:, 2] = z
        return np.linalg.norm(d - closest, axis=-1) - self.radius

    def normals(self, points):
        h = 1e-6
        out = np.zeros_like(points, dtype=np.float64)
        for a in range(3):
            dp = points.astype(np.float64).copy()
            dm = dp.copy()
            dp[:, a] += h
            dm[:, a] -= h
            out[:, a] = (self.sdf(dp) - self.sdf(dm)) / (2 * h)
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        return out / np.maximum(norms, 1e-12)

    def reference_point(self, x_vals):
        return self.center.copy()

    def advance(self, velocity, dt):
        self.center = self.center + np.asarray(velocity, dtype=np.float64) * dt


@dataclass
class SimConfig:
    """Timestep, gravity, contact, and gradient-recording settings."""

    dt: float = 1e-4
    substeps_per_frame: int = 400
    gravity: tuple = (0.0, 0.0, -9.8)
    ground_height: float | None = None
    mu_floor: float = 0.4
    grad_substeps: int = 10  # K: substeps recorded for the reverse pass
    clip_norm: float = 1.0
    det_clamp: tuple = (0.05, 20.0)
    backend: str = "auto"
    cfl_warn_fraction: float = 0.4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.substeps_per_frame < 1:
            raise ValidationError("substeps_per_frame must be >= 1")
        if self.grad_substeps > self.substeps_per_frame:
            raise ValidationError("grad_substeps cannot exceed substeps_per_frame")

    @property
    def frame_dt(self):
        return self.dt * self.substeps_per_frame


def stencil(x, grid):
    """Quadratic B-spline stencil data for every particle.

    Args:
        x: (N,3) positions, ndarray or Tensor.
        grid: Grid geometry.

    Returns:
        (W, gW, dpos, idx): weights (N,27), weight gradients (N,27,3),
        node offsets x_i - x_p (N,27,3), flat node indices (N,27).
    """
    x_vals = ad.value_of(x)
    xg = ad.div(ad.sub(x, grid.origin), grid.dx)
    base = np.floor(ad.value_of(xg) - 0.5).astype(np.int64)
    _check_in_bounds(base, x_vals, grid)
    fx = ad.sub(xg, base.astype(np.float64))  # in [0.5, 1.5]

    w0 = ad.mul(0.5, ad.power(ad.sub(1.5, fx), 2))
    w1 = ad.sub(0.75, ad.power(ad.sub(fx, 1.0), 2))
    w2 = ad.mul(0.5, ad.power(ad.sub(fx, 0.5), 2))
    w = ad.stack([w0, w1, w2], axis=1)  # (N,3,3): offset, axis
    d0 = ad.sub(fx, 1.5)
    d1 = ad.mul(-2.0, ad.sub(fx, 1.0))
    d2 = ad.sub(fx, 0.5)
    dw = ad.mul(ad.stack([d0, d1, d2], axis=1), 1.0 / grid.dx)

    ox, oy, oz = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wx = ad.take(w, (slice(None), ox, 0))  # (N,27)
    wy = ad.take(w, (slice(None), oy, 1))
    wz = ad.take(w, (slice(None), oz, 2))
    dwx = ad.take(dw, (slice(None), ox, 0))
    dwy = ad.take(dw, (slice(None), oy, 1))
    dwz = ad.take(dw, (slice(None), oz, 2))

    W = ad.mul(ad.mul(wx, wy), wz)
    gW = ad.stack(
        [
            ad.mul(ad.mul(dwx, wy), wz),
            ad.mul(ad.mul(wx, dwy), wz),
            ad.mul(ad.mul(wx, wy), dwz),
        ],
        axis=2,
    )  # (N,27,3)

    nodes = base[:, None, :] + _OFFSETS[None, :, :]  # (N,27,3) int
    idx = grid.flat_index(nodes)
    node_pos = nodes.astype(np.float64) * grid.dx + grid.origin
    n = x_vals.shape[0]
    dpos = ad.sub(node_pos, ad.reshape(x, (n, 1, 3)))  # (N,27,3)
    return W, gW, dpos, idx


def _check_in_bounds(base, x_vals, grid):
    res = np.asarray(grid.resolution)
    bad = np.any((base < 1) | (base > res - 4), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SimulationFault(
            "particle outside grid interior margin",
            particle=i,
            position=tuple(np.round(x_vals[i], 5)),
        )


def p2g(particles, stresses, grid, mu_p=None, m_p=None):
    """Scatter mass, momentum, and internal force to grid nodes.

    Args:
        particles: ParticleSet (fields may be Tensors on the taped path).
        stresses: (N,3,3) per-particle Kirchhoff stress.
        grid: Grid geometry.
        mu_p: optional per-particle friction, blended mass-weighted onto
            nodes for contact resolution.
        m_p: optional per-particle mass overriding particles.m (taped when
            density is being optimized).

    Returns:
        GridFields with m, mom, f (and mu when mu_p given) populated.
    """
    x, v, C, V0 = particles.x, particles.v, particles.C, particles.V0
    m = particles.m if m_p is None else m_p
    n = ad.value_of(x).shape[0]
    W, gW, dpos, idx = stencil(x, grid)
    flat_idx = idx.reshape(-1)
    n_nodes = grid.n_nodes

    w_m = ad.mul(W, ad.reshape(m, (n, 1)))  # (N,27)
    grid_m = ad.scatter_add(ad.reshape(w_m, (n * 27,)), flat_idx, n_nodes)

    # momentum: w m (v + C (x_i - x_p))
    c_d = ad.matmul(ad.reshape(C, (n, 1, 3, 3)), ad.reshape(dpos, (n, 27, 3, 1)))
    v_aff = ad.add(ad.reshape(v, (n, 1, 3)), ad.reshape(c_d, (n, 27, 3)))
    mom = ad.mul(ad.reshape(w_m, (n, 27, 1)), v_aff)
    grid_mom = ad.scatter_add(ad.reshape(mom, (n * 27, 3)), flat_idx, n_nodes)

    # internal force: -V0 tau grad(w)
    t_g = ad.matmul(ad.reshape(stresses, (n, 1, 3, 3)), ad.reshape(gW, (n, 27, 3, 1)))
    f = ad.mul(ad.reshape(ad.mul(V0, -1.0), (n, 1, 1)), ad.reshape(t_g, (n, 27, 3)))
    grid_f = ad.scatter_add(ad.reshape(f, (n * 27, 3)), flat_idx, n_nodes)

    grid_mu = None
    if mu_p is not None:
        w_mu = ad.mul(w_m, ad.reshape(mu_p, (n, 1)))
        grid_mu = ad.scatter_add(ad.reshape(w_mu, (n * 27,)), flat_idx, n_nodes)
    return GridFields(m=grid_m, mom=grid_mom, f=grid_f, mu=grid_mu)


def grid_op(fields, grid, config, controllers=(), actions=None):
    """Momentum -> velocity, force and gravity integration, contacts.

    Order: velocity from momentum, internal force + gravity, ground-plane
    Coulomb projection, push-SDF projection, wall slip at the grid margin,
    then grasp Dirichlet overwrites (which win over everything).
    """
    m_vals = ad.value_of(fields.m)
    active = m_vals > _MASS_EPS
    active_col = active[:, None]
    m_safe = ad.where(active, fields.m, 1.0)
    m_col = ad.reshape(m_safe, (grid.n_nodes, 1))

    v = ad.where(active_col, ad.div(fields.mom, m_col), 0.0)
    g = np.asarray(config.gravity, dtype=np.float64)
    accel = ad.add(ad.div(fields.f, m_col), g)
    v = ad.where(active_col, ad.add(v, ad.mul(config.dt, accel)), 0.0)

    if config.ground_height is not None:
        v = _project_ground(v, fields, grid, config, active)

    if actions is None:
        actions = np.zeros((len(controllers), 3))
    for ctrl, u in zip(controllers, actions):
        if ctrl.kind == "push":
            v = _project_push(v, ctrl, np.asarray(u, dtype=np.float64), grid, active)

    v = _wall_slip(v, grid)

    for ctrl, u in zip(controllers, actions):
        if ctrl.kind == "grasp":
            mask = ctrl.node_mask(grid)
            v = ad.where(mask[:, None], np.asarray(u, dtype=np.float64), v)

    fields.v = v
    return fields


def _project_ground(v, fields, grid, config, active):
    v_vals = ad.value_of(v)
    below = grid.node_z <= config.ground_height
    moving_in = v_vals[:, 2] < 0.0
    contact = below & moving_in & active
    if not np.any(contact):
        return v
    if fields.mu is not None:
        mu_node = ad.div(fields.mu, ad.where(active, fields.m, 1.0))
    else:
        mu_node = config.mu_floor

    vn = ad.take(v, (slice(None), 2))  # (n,)
    ez = np.array([0.0, 0.0, 1.0])
    vt = ad.sub(v, ad.mul(ad.reshape(vn, (grid.n_nodes, 1)), ez))
    vt_norm = ad.norm(vt, axis=1, eps=_TANGENT_EPS)
    scale = ad.maximum(0.0, ad.sub(1.0, ad.div(ad.mul(mu_node, ad.mul(vn, -1.0)), vt_norm)))
    vt_scaled = ad.mul(vt, ad.reshape(scale, (grid.n_nodes, 1)))
    return ad.where(contact[:, None], vt_scaled, v)


def _project_push(v, ctrl, u, grid, active):
    node_pos = grid.coords * grid.dx + grid.origin
    inside = (ctrl.sdf(node_pos) < 0.0) & active
    if not np.any(inside):
        return v
    normals = np.zeros((grid.n_nodes, 3))
    normals[inside] = ctrl.normals(node_pos[inside])
    v_vals = ad.value_of(v)
    vn_vals = np.einsum("nd,nd->n", v_vals - u, normals)
    penetrating = inside & (vn_vals < 0.0)
    if not np.any(penetrating):
        return v

    v_rel = ad.sub(v, u)
    vn = ad.sum_(ad.mul(v_rel, normals), axis=1)
    vn_col = ad.reshape(vn, (grid.n_nodes, 1))
    vt = ad.sub(v_rel, ad.mul(vn_col, normals))
    vt_norm = ad.norm(vt, axis=1, eps=_TANGENT_EPS)
    scale = ad.maximum(
        0.0, ad.sub(1.0, ad.div(ad.mul(ctrl.friction, ad.mul(vn, -1.0)), vt_norm))
    )
    projected = ad.add(ad.mul(vt, ad.reshape(scale, (grid.n_nodes, 1))), u)
    return ad.where(penetrating[:, None], projected, v)


def _wall_slip(v, grid):
    v_vals = ad.value_of(v)
    res = np.asarray(grid.resolution)
    mult = np.ones((grid.n_nodes, 3))
    for a in range(3):
        lo = (grid.coords[:, a] < 2) & (v_vals[:, a] < 0.0)
        hi = (grid.coords[:, a] > res[a] - 3) & (v_vals[:, a] > 0.0)
        mult[lo | hi, a] = 0.0
    if np.all(mult == 1.0):
        return v
    return ad.mul(v, mult)


def g2p(fields, particles, grid, config, law=None, props=None):
    """Gather grid velocities back to particles; advect and update C, F."""
    x, F = particles.x, particles.F
    n = ad.value_of(x).shape[0]
    W, _, dpos, idx = stencil(x, grid)

    v_nodes = ad.gather(fields.v, idx.reshape(-1), axis=0)  # (N*27,3)
    v_nodes = ad.reshape(v_nodes, (n, 27, 3))
    w_col = ad.reshape(W, (n, 27, 1))
    v_new = ad.sum_(ad.mul(w_col, v_nodes), axis=1)  # (N,3)

    outer = ad.mul(
        ad.reshape(v_nodes, (n, 27, 3, 1)), ad.reshape(dpos, (n, 27, 1, 3))
    )
    C_new = ad.mul(
        4.0 / grid.dx**2,
        ad.sum_(ad.mul(ad.reshape(W, (n, 27, 1, 1)), outer), axis=1),
    )

    x_new = ad.add(x, ad.mul(config.dt, v_new))
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    F_new = ad.matmul(ad.add(eye, ad.mul(config.dt, C_new)), F)
    F_new = _apply_plasticity(F_new, law, props, config)

    if not np.all(np.isfinite(ad.value_of(x_new))):
        raise SimulationFault("non-finite particle state after g2p")

    particles.x, particles.v, particles.C, particles.F = x_new, v_new, C_new, F_new
    return particles


def _apply_plasticity(F, law, props, config):
    """Plastic projection and det safeguard.

    On the taped path both act as constant corrections added to the elastic
    update (straight-through): values match the plain path exactly while
    gradients flow through the elastic part only.
    """
    F_vals = ad.value_of(F)
    target = F_vals
    changed = False

    if law is not None and law.plastic_kind != "purely_elastic":
        kw = {}
        if props:
            kw = {
                "E": ad.value_of(props["E"]) if "E" in props else None,
                "nu": ad.value_of(props["nu"]) if "nu" in props else None,
                "sigma_y": ad.value_of(props["sigma_y"]) if "sigma_y" in props else None,
            }
        target = plastic_return(target, law, **kw)
        changed = True

    dets = np.linalg.det(target)
    lo, hi = config.det_clamp
    bad = (dets <= 0) | np.any(np.abs(target) > 1e3, axis=(-2, -1))
    if np.any(bad):
        u, s, vh = np.linalg.svd(target[bad])
        s = np.clip(s, lo, hi)
        target = np.array(target, copy=True)
        target[bad] = (u * s[..., None, :]) @ vh
        changed = True

    if not changed:
        return F
    if isinstance(F, ad.Tensor):
        return ad.add(F, target - F_vals)
    return target


def substep(particles, props, law, grid, config, controllers=(), actions=None):
    """One {p2g, grid_op, g2p} cycle with constitutive evaluation."""
    stresses = kirchhoff_stress(
        particles.F, law, E=props.get("E"), nu=props.get("nu")
    )
    fields = p2g(particles, stresses, grid, mu_p=props.get("mu"), m_p=props.get("m"))
    x_vals = ad.value_of(particles.x)
    for ctrl in controllers:
        if ctrl.kind == "grasp":
            ctrl.bind_positions(x_vals)
    fields = grid_op(fields, grid, config, controllers, actions)
    return g2p(fields, particles, grid, config, law=law, props=props)


def simulate_frame(particles, props, law, grid, config, controllers=(), actions=None):
    """Advance one frame: substeps_per_frame substeps under constant actions.

    Push controller poses advance by their commanded velocity each substep.
    Mutates and returns ``particles``.
    """
    if actions is not None:
        actions = np.asarray(actions, dtype=np.float64)
        if not np.all(np.isfinite(actions)):
            raise ValidationError("controller actions must be finite")
    use_fast = _fast_available() if config.backend == "auto" else config.backend == "numba"
    if config.backend == "numba" and not _fast_available():
        raise ValidationError("numba backend requested but numba is unavailable")
    taped = isinstance(particles.x, ad.Tensor) or any(
        isinstance(val, ad.Tensor) for val in props.values()
    )
    if use_fast and not taped:
        from . import fast

        if fast.supports(law):
            fast.simulate_frame_fast(particles, props, law, grid, config, controllers, actions)
            _cfl_check(particles, grid, config)
            return particles
        if config.backend == "numba":
            raise ValidationError(
                "numba backend covers neo_hookean with purely_elastic only; "
                f"got {law.elastic_kind}/{law.plastic_kind}"
            )
    for _ in range(config.substeps_per_frame):
        substep(particles, props, law, grid, config, controllers, actions)
        _advance_controllers(controllers, actions, config.dt)
    _cfl_check(particles, grid, config)
    return particles


def _advance_controllers(controllers, actions, dt):
    if actions is None:
        return
    for ctrl, u in zip(controllers, actions):
        ctrl.advance(u, dt)


def _cfl_check(particles, grid, config):
    v = ad.value_of(particles.v)
    if v.size == 0:
        return
    vmax = float(np.max(np.abs(v)))
    if vmax * config.dt > config.cfl_warn_fraction * grid.dx:
        warnings.warn(
            f"CFL margin exceeded: max|v|*dt = {vmax * config.dt:.2e} "
            f"> {config.cfl_warn_fraction:.2f}*dx = {config.cfl_warn_fraction * grid.dx:.2e}",
            RuntimeWarning,
            stacklevel=2,
        )


def _fast_available():
    try:
        from . import fast  # noqa: F401

        return fast.AVAILABLE
    except ImportError:
        return False


def simulate_sequence(particles, props, law, grid, config, controllers, frame_actions):
    """Run a whole episode; returns (T+1, N, 3) positions including frame 0."""
    frame_actions = np.asarray(frame_actions, dtype=np.float64)
    out = [ad.value_of(particles.x).copy()]
    for t in range(len(frame_actions)):
        simulate_frame(particles, props, law, grid, config, controllers, frame_actions[t])
        out.append(ad.value_of(particles.x).copy())
    return np.stack(out)
