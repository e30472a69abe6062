"""Control trajectories: cubic curves traversed by a three-phase speed profile.

The curve fixes the path; the profile fixes progress along it through
normalized arc length, so the controller accelerates, cruises, and
decelerates smoothly regardless of how the control polygon bends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

_TABLE = 2048  # dense parameter/time grid for arc-length inversion


@dataclass(eq=False)
class VelocityProfile:
    """Accelerate / cruise / decelerate fractions plus the peak speed."""

    fractions: tuple
    v_max: float

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValidationError("profile needs 3 non-negative phase fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValidationError(f"phase fractions sum to {sum(self.fractions)}, not 1")
        if self.v_max <= 0:
            raise ValidationError("v_max must be positive")

    @property
    def mean_speed_factor(self):
        """integral of v over [0,T] equals v_max*T times this factor."""
        accel, _, decel = self.fractions
        return 1.0 - 0.5 * (accel + decel)


@dataclass(eq=False)
class BezierTrajectory:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    duration: float
    profile: VelocityProfile
    max_offset_frac: float = 0.5  # inner points stay this close to the chord

    def __post_init__(self):
        for name in ("p0", "p1", "p2", "p3"):
            pt = np.asarray(getattr(self, name), dtype=np.float64)
            if pt.shape != (3,) or not np.all(np.isfinite(pt)):
                raise ValidationError(f"control point {name} must be a finite 3-vector")
            setattr(self, name, pt)
        if self.duration <= 0:
            raise ValidationError("trajectory duration must be positive")
        chord = np.linalg.norm(self.p3 - self.p0)
        limit = self.max_offset_frac * chord + 1e-12
        for name in ("p1", "p2"):
            if _segment_distance(getattr(self, name), self.p0, self.p3) > limit:
                raise ValidationError(
                    f"control point {name} is farther than {self.max_offset_frac} "
                    "of the chord from the endpoint segment"
                )
        self._tables = None


def _segment_distance(point, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-24:
        return float(np.linalg.norm(point - a))
    s = np.clip((point - a) @ ab / denom, 0.0, 1.0)
    return float(np.linalg.norm(point - (a + s * ab)))


def bezier_eval(traj, u):
    """Point on the curve at parameter u in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < -1e-12) or np.any(u > 1.0 + 1e-12):
        raise ValidationError("curve parameter u must lie in [0, 1]")
    u = np.clip(u, 0.0, 1.0)[..., None]
    w = 1.0 - u
    return (
        w**3 * traj.p0
        + 3.0 * w**2 * u * traj.p1
        + 3.0 * w * u**2 * traj.p2
        + u**3 * traj.p3
    )


def bezier_derivative(traj, u):
    u = np.asarray(u, dtype=np.float64)[..., None]
    w = 1.0 - u
    return (
        3.0 * w**2 * (traj.p1 - traj.p0)
        + 6.0 * w * u * (traj.p2 - traj.p1)
        + 3.0 * u**2 * (traj.p3 - traj.p2)
    )


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def profile_speed(profile, t, T):
    """Speed at time t: smoothstep ramps joined to the cruise plateau."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < -1e-9) or np.any(t > T + 1e-9):
        raise ValidationError("profile time outside [0, T]")
    accel, _, decel = profile.fractions
    ta, td = accel * T, decel * T
    up = _smoothstep(t / ta) if ta > 0 else np.ones_like(t)
    down = _smoothstep((T - t) / td) if td > 0 else np.ones_like(t)
    return profile.v_max * np.minimum(up, down)


def _tables(traj):
    if traj._tables is None:
        u = np.linspace(0.0, 1.0, _TABLE)
        speed_u = np.linalg.norm(bezier_derivative(traj, u), axis=-1)
        arc = np.concatenate(
            [[0.0], np.cumsum(0.5 * (speed_u[1:] + speed_u[:-1]) * np.diff(u))]
        )
        length = arc[-1]
        arc_norm = arc / length if length > 1e-12 else u.copy()

        t = np.linspace(0.0, traj.duration, _TABLE)
        v = profile_speed(traj.profile, t, traj.duration)
        dist = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
        s_of_t = dist / dist[-1] if dist[-1] > 0 else t / traj.duration
        traj._tables = (u, arc_norm, length, t, s_of_t)
    return traj._tables


def arc_length(traj):
    return _tables(traj)[2]


def arc_param(traj, t):
    """Parameter u whose normalized arc length matches the profile's progress.

    Degenerate curves (all control points equal) return the progress itself.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < -1e-9) or np.any(t > traj.duration + 1e-9):
        raise ValidationError("trajectory time outside [0, duration]")
    u_grid, arc_norm, length, t_grid, s_of_t = _tables(traj)
    s = np.interp(np.clip(t, 0.0, traj.duration), t_grid, s_of_t)
    if length <= 1e-12:
        return s
    u = np.interp(s, arc_norm, u_grid)
    for _ in range(3):  # Newton refinement on the table interpolant
        speed = np.linalg.norm(bezier_derivative(traj, u), axis=-1) / length
        residual = np.interp(u, u_grid, arc_norm) - s
        u = np.clip(u - residual / np.maximum(speed, 1e-9), 0.0, 1.0)
    return u


def trajectory_actions(traj, n_frames, frame_dt):
    """Per-frame control velocities whose integral lands on the curve exactly
    at frame boundaries."""
    if n_frames < 1:
        raise ValidationError("need at least one frame")
    if abs(n_frames * frame_dt - traj.duration) > 1e-9:
        raise ValidationError(
            f"trajectory duration {traj.duration} does not cover "
            f"{n_frames} frames of {frame_dt}"
        )
    times = np.arange(n_frames + 1) * frame_dt
    points = bezier_eval(traj, arc_param(traj, times))
    return np.diff(points, axis=0) / frame_dt
