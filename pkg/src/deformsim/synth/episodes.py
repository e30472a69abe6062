"""Demonstration synthesis: randomized control programs over a calibrated twin.

Every episode draws a fresh control trajectory per controller (random
direction, reach, curvature, and speed profile, kept inside the simulation
domain) plus one correlated perturbation of the per-particle properties,
then rolls the twin forward. Episodes are seeded individually, so any one
of them can be regenerated without replaying the rest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import SimulationFault, ValidationError
from ..mpm.engine import simulate_sequence
from ..scenes import build_controllers, build_material, build_sim
from .bezier import BezierTrajectory, VelocityProfile, arc_length, trajectory_actions
from .perturb import PROPERTY_COLUMNS, PerturbationConfig, part_features, perturb_properties

log = logging.getLogger(__name__)


@dataclass(eq=False)
class SynthConfig:
    """Sampling ranges for trajectories plus the property perturbation."""

    endpoint_range: tuple = (0.05, 0.4)  # meters of commanded reach
    curvature_frac: float = 0.5  # control-point offsets, fraction of the chord
    vmax_range: tuple = (0.1, 1.0)  # m/s
    phase_alpha: tuple = (2.0, 2.0, 2.0)  # Dirichlet prior over profile phases
    retries: int = 3
    clearance: float = 0.02  # keep trajectories this far from walls and ground
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)

    def __post_init__(self):
        lo, hi = self.endpoint_range
        if not 0 < lo <= hi:
            raise ValidationError("endpoint_range must satisfy 0 < lo <= hi")
        vlo, vhi = self.vmax_range
        if not 0 < vlo <= vhi:
            raise ValidationError("vmax_range must satisfy 0 < lo <= hi")
        if not 0 <= self.curvature_frac <= 0.5:
            raise ValidationError("curvature_frac must lie in [0, 0.5]")
        if len(self.phase_alpha) != 3 or any(a <= 0 for a in self.phase_alpha):
            raise ValidationError("phase_alpha needs 3 positive concentrations")
        if self.retries < 0:
            raise ValidationError("retries must be non-negative")
        if self.clearance < 0:
            raise ValidationError("clearance must be non-negative")


@dataclass(eq=False)
class Demonstration:
    """One synthesized episode: states, properties, and the control program."""

    positions: np.ndarray  # (T+1, N, 3)
    properties: np.ndarray  # (N, 3) columns E, mu, rho
    actions: np.ndarray  # (T, K, 3) commanded controller velocities
    controls: np.ndarray  # (T+1, K, 3) controller reference paths
    frame_dt: float
    episode: int = 0
    seed: int = 0

    def validate(self):
        t_plus_1, n, _ = self.positions.shape
        if t_plus_1 < 2:
            raise ValidationError("episode needs at least one transition")
        if self.properties.shape != (n, len(PROPERTY_COLUMNS)):
            raise ValidationError(
                f"properties must be ({n}, {len(PROPERTY_COLUMNS)}), "
                f"got {self.properties.shape}"
            )
        k = self.actions.shape[1]
        if self.actions.shape != (t_plus_1 - 1, k, 3):
            raise ValidationError(f"actions shape {self.actions.shape} is inconsistent")
        if self.controls.shape != (t_plus_1, k, 3):
            raise ValidationError(f"controls shape {self.controls.shape} is inconsistent")
        for name in ("positions", "properties", "actions", "controls"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite values in {name}")
        if self.frame_dt <= 0:
            raise ValidationError("frame_dt must be positive")
        return self

    @property
    def n_frames(self):
        return len(self.actions)


def _domain_bounds(scene, clearance):
    lo = np.asarray(scene.sim["grid_lo"], dtype=np.float64) + clearance
    hi = np.asarray(scene.sim["grid_hi"], dtype=np.float64) - clearance
    ground = scene.sim.get("ground_height")
    if ground is not None:
        lo[2] = max(lo[2], float(ground) + clearance)
    if np.any(lo >= hi):
        raise ValidationError("clearance leaves no room inside the grid bounds")
    return lo, hi


def _reach_limit(origin, direction, lo, hi):
    """Largest step along direction that stays inside the box."""
    limit = np.inf
    for a in range(3):
        if direction[a] > 1e-12:
            limit = min(limit, (hi[a] - origin[a]) / direction[a])
        elif direction[a] < -1e-12:
            limit = min(limit, (lo[a] - origin[a]) / direction[a])
    return max(limit, 0.0)


def _max_scale(p0, point, lo, hi):
    """Largest factor g keeping p0 + g*(point - p0) inside the box."""
    return _reach_limit(p0, point - p0, lo, hi)


def _sample_trajectory(rng, origin, duration, cfg, lo, hi):
    """One in-domain trajectory from origin; direction retried if cramped."""
    reach_lo, reach_hi = cfg.endpoint_range
    direction, reach = None, 0.0
    for _ in range(8):
        cand = rng.standard_normal(3)
        norm = np.linalg.norm(cand)
        if norm < 1e-12:
            continue
        cand = cand / norm
        fit = min(rng.uniform(reach_lo, reach_hi), 0.999 * _reach_limit(origin, cand, lo, hi))
        if fit > reach:
            direction, reach = cand, fit
        if fit >= reach_lo:
            break
    if direction is None or reach <= 1e-6:
        raise SimulationFault("no room to move the controller", origin=origin.tolist())

    p3 = origin + reach * direction
    inner = []
    for frac in (1.0 / 3.0, 2.0 / 3.0):
        offset_dir = rng.standard_normal(3)
        offset_norm = np.linalg.norm(offset_dir)
        offset_dir = offset_dir / offset_norm if offset_norm > 1e-12 else np.zeros(3)
        radius = cfg.curvature_frac * reach * rng.uniform() ** (1.0 / 3.0)
        point = origin + frac * (p3 - origin) + radius * offset_dir
        # clipping to the box never increases distance to the chord segment,
        # so the curvature bound sampled above survives the projection
        inner.append(np.clip(point, lo, hi))
    p1, p2 = inner

    fractions = rng.dirichlet(cfg.phase_alpha)
    fractions = tuple(fractions / fractions.sum())
    shape = BezierTrajectory(origin, p1, p2, p3, duration, VelocityProfile(fractions, 1.0))
    length = arc_length(shape)
    mean_factor = shape.profile.mean_speed_factor
    v_needed = length / (duration * mean_factor)
    v_max = float(np.clip(v_needed, *cfg.vmax_range))

    # rescale the control polygon about the origin so the arc length matches
    # the profile; growth is capped by the box, shrink is always safe
    gain = v_max / v_needed
    if gain > 1.0:
        cap = min(_max_scale(origin, p, lo, hi) for p in (p1, p2, p3))
        gain = min(gain, 0.999 * cap)
    points = [origin + gain * (p - origin) for p in (p1, p2, p3)]
    return BezierTrajectory(
        origin, *points, duration, VelocityProfile(fractions, v_max)
    )


def run_episode(scene, particles, props, frame_actions):
    """Roll fresh copies of the twin through one action sequence.

    Returns (T+1, N, 3) positions including the rest state. Controllers are
    rebuilt from the scene, so push poses start from their configured pose.
    """
    law = build_material(scene)
    config, grid = build_sim(scene)
    controllers = build_controllers(scene, particles)
    return simulate_sequence(
        particles.copy(), props, law, grid, config, controllers, frame_actions
    )


def _episode_attempt(scene, particles, base, features, cfg, rng, episode, seed):
    lo, hi = _domain_bounds(scene, cfg.clearance)
    n_frames = scene.n_frames - 1
    duration = n_frames * scene.frame_dt
    controllers = build_controllers(scene, particles)

    actions = np.zeros((n_frames, len(controllers), 3))
    controls = np.zeros((n_frames + 1, len(controllers), 3))
    for k, ctrl in enumerate(controllers):
        origin = ctrl.reference_point(particles.x)
        traj = _sample_trajectory(rng, origin, duration, cfg, lo, hi)
        actions[:, k, :] = trajectory_actions(traj, n_frames, scene.frame_dt)
        controls[0, k] = origin
    controls[1:] = controls[0] + np.cumsum(actions, axis=0) * scene.frame_dt

    phi = perturb_properties(base, features, cfg.perturb, rng)
    props = {
        "E": phi[:, 0],
        "mu": phi[:, 1],
        "nu": np.full(particles.count, float(scene.material.get("nu", 0.3))),
        "m": phi[:, 2] * particles.V0,
        "sigma_y": np.full(particles.count, float(scene.material.get("sigma_y", 1e4))),
    }
    positions = run_episode(scene, particles, props, actions)
    return Demonstration(
        positions=positions,
        properties=phi,
        actions=actions,
        controls=controls,
        frame_dt=scene.frame_dt,
        episode=episode,
        seed=seed,
    ).validate()


def synthesize(scene, particles, properties, n_episodes, config=None, seed=0, labels=None):
    """Generate up to n_episodes demonstrations from a calibrated twin.

    properties is the (N, 3) table of per-particle E, mu, rho. Episode i is
    seeded by (seed, i, attempt), so regeneration is order-independent.
    Episodes whose every attempt faults are skipped with a warning.
    """
    cfg = config if config is not None else SynthConfig()
    base = np.asarray(properties, dtype=np.float64)
    if n_episodes < 1:
        raise ValidationError("n_episodes must be >= 1")
    features = part_features(
        particles.x, labels=labels, d=cfg.perturb.feature_dim, k=cfg.perturb.neighbors
    )
    demos = []
    for i in range(n_episodes):
        demo = None
        for attempt in range(cfg.retries + 1):
            rng = np.random.default_rng((seed, i, attempt))
            try:
                demo = _episode_attempt(scene, particles, base, features, cfg, rng, i, seed)
                break
            except SimulationFault as exc:
                log.warning("episode %d attempt %d faulted: %s", i, attempt, exc)
        if demo is None:
            log.warning("episode %d skipped after %d failed attempts", i, cfg.retries + 1)
            continue
        demos.append(demo)
    if not demos:
        raise SimulationFault("every synthesized episode faulted", episodes=n_episodes)
    return demos


def save_dataset(path, demos):
    """Write demonstrations as one stacked array container."""
    from ..arrayfile import save_arrays

    if not demos:
        raise ValidationError("cannot save an empty dataset")
    shapes = {d.positions.shape for d in demos}
    if len(shapes) != 1:
        raise ValidationError(f"episodes disagree on shape: {sorted(shapes)}")
    save_arrays(
        path,
        {
            "positions": np.stack([d.positions for d in demos]),
            "properties": np.stack([d.properties for d in demos]),
            "actions": np.stack([d.actions for d in demos]),
            "controls": np.stack([d.controls for d in demos]),
            "episode_ids": np.asarray([d.episode for d in demos], dtype=np.int32),
            "seeds": np.asarray([d.seed for d in demos], dtype=np.int32),
            "frame_dt": np.asarray([demos[0].frame_dt], dtype=np.float64),
        },
    )


def load_dataset(path):
    """Read a dataset container back into Demonstration objects."""
    from ..arrayfile import load_arrays

    data = load_arrays(path)
    for key in ("positions", "properties", "actions", "controls", "frame_dt"):
        if key not in data:
            raise ValidationError(f"dataset is missing the {key!r} array")
    count = len(data["positions"])
    ids = data.get("episode_ids", np.arange(count, dtype=np.int32))
    seeds = data.get("seeds", np.zeros(count, dtype=np.int32))
    frame_dt = float(data["frame_dt"][0])
    return [
        Demonstration(
            positions=np.asarray(data["positions"][i], dtype=np.float64),
            properties=np.asarray(data["properties"][i], dtype=np.float64),
            actions=np.asarray(data["actions"][i], dtype=np.float64),
            controls=np.asarray(data["controls"][i], dtype=np.float64),
            frame_dt=frame_dt,
            episode=int(ids[i]),
            seed=int(seeds[i]),
        ).validate()
        for i in range(count)
    ]
