"""Scene packages: the observation bundle a pipeline run starts from.

A scene is a JSON config (law selection, sim settings, camera, controller
descriptions) plus a sibling binary array container (per-frame clouds,
control trajectories, track points, masks, split indices). Frame data is
read through guarded accessors so a stage restricted to the training split
faults loudly if it ever touches a test frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .arrayfile import load_arrays, save_arrays
from .errors import SplitAccessError, ValidationError
from .materials import MaterialLaw
from .mpm.engine import Grid, GraspController, ParticleSet, PushController, SimConfig
from .mpm.fill import fill_interior

FORMAT_NAME = "deformsim-scene"
FORMAT_VERSION = 1
TRAIN_FRACTION = 0.7


@dataclass
class Camera:
    """Pinhole camera; world_to_cam maps world points into camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.world_to_cam.shape != (4, 4):
            raise ValidationError("camera world_to_cam must be 4x4")

    def project(self, points):
        """Returns pixel coordinates (N, 2) and camera-frame depth (N,)."""
        points = np.asarray(points, dtype=np.float64)
        hom = np.concatenate([points, np.ones((len(points), 1))], axis=1)
        cam = hom @ self.world_to_cam.T
        z = cam[:, 2]
        safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = self.fx * cam[:, 0] / safe_z + self.cx
        v = self.fy * cam[:, 1] / safe_z + self.cy
        return np.stack([u, v], axis=1), z

    def to_config(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_cam": self.world_to_cam.reshape(-1).tolist(),
        }

    @classmethod
    def from_config(cls, block):
        return cls(
            fx=float(block["fx"]),
            fy=float(block["fy"]),
            cx=float(block["cx"]),
            cy=float(block["cy"]),
            width=int(block["width"]),
            height=int(block["height"]),
            world_to_cam=np.asarray(block["world_to_cam"], dtype=np.float64).reshape(4, 4),
        )


def make_split(n_frames):
    """Contiguous 7:3 train/test partition by frame order."""
    n_train = int(round(TRAIN_FRACTION * n_frames))
    n_train = min(max(n_train, 1), n_frames - 1)
    return np.arange(n_train, dtype=np.int32), np.arange(n_train, n_frames, dtype=np.int32)


@dataclass
class ScenePackage:
    """Observations plus the config blocks the pipeline stages read.

    Frame-indexed arrays are private; use cloud()/controls()/... accessors,
    which honor the active split restriction.
    """

    name: str
    frame_dt: float
    clouds: np.ndarray  # (F, M, 3)
    control_positions: np.ndarray  # (F, K, 3)
    control_velocities: np.ndarray  # (F-1, K, 3)
    tracks: np.ndarray  # (F, Q, 3)
    train_frames: np.ndarray
    test_frames: np.ndarray
    material: dict
    sim: dict
    controllers: list = field(default_factory=list)
    camera: Camera | None = None
    masks: np.ndarray | None = None  # (F, H, W) u8
    target: np.ndarray | None = None
    allowed_frames: frozenset | None = None

    @property
    def n_frames(self):
        return len(self.clouds)

    @property
    def n_controllers(self):
        return self.control_positions.shape[1]

    def _check(self, t):
        if t < 0 or t >= self.n_frames:
            raise ValidationError(f"frame {t} outside scene range 0..{self.n_frames - 1}")
        if self.allowed_frames is not None and t not in self.allowed_frames:
            raise SplitAccessError(f"frame {t} is outside the allowed split")
        return t

    def cloud(self, t):
        return np.asarray(self.clouds[self._check(t)], dtype=np.float64)

    def controls(self, t):
        return np.asarray(self.control_positions[self._check(t)], dtype=np.float64)

    def control_velocity(self, t):
        """Action taking frame t to t+1."""
        self._check(t)
        self._check(t + 1)
        return np.asarray(self.control_velocities[t], dtype=np.float64)

    def track(self, t):
        return np.asarray(self.tracks[self._check(t)], dtype=np.float64)

    def mask(self, t):
        if self.masks is None:
            raise ValidationError("scene has no masks")
        return self.masks[self._check(t)]

    def restricted(self, frames):
        """View of the same data allowing access to the given frames only."""
        return replace(self, allowed_frames=frozenset(int(t) for t in frames))

    def training_view(self):
        return self.restricted(self.train_frames)

    def validate(self):
        f = self.n_frames
        if f < 2:
            raise ValidationError("scene needs at least 2 frames")
        pairs = [
            ("control_positions", len(self.control_positions)),
            ("tracks", len(self.tracks)),
        ]
        if self.masks is not None:
            pairs.append(("masks", len(self.masks)))
        for name, count in pairs:
            if count != f:
                raise ValidationError(
                    f"frame-count mismatch: clouds has {f} frames, {name} has {count}"
                )
        if len(self.control_velocities) != f - 1:
            raise ValidationError(
                f"frame-count mismatch: clouds has {f} frames, "
                f"control_velocities has {len(self.control_velocities)} (expected {f - 1})"
            )
        for name in ("clouds", "control_positions", "control_velocities", "tracks"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite data in {name}")
        if self.frame_dt <= 0:
            raise ValidationError("frame_dt must be positive")

        train, test = np.asarray(self.train_frames), np.asarray(self.test_frames)
        n_train = int(round(TRAIN_FRACTION * f))
        n_train = min(max(n_train, 1), f - 1)
        if not (
            np.array_equal(train, np.arange(n_train))
            and np.array_equal(test, np.arange(n_train, f))
        ):
            raise ValidationError(
                f"split must be the contiguous 7:3 partition: expected {n_train} leading "
                f"training frames of {f}, got train={train.tolist()} test={test.tolist()}"
            )
        if "elastic" in self.material:
            build_material(self)  # law block must construct cleanly
        return self


def save_scene(scene, json_path):
    """Write the config JSON plus a sibling array container."""
    json_path = Path(json_path)
    arrays_name = json_path.stem + ".dsa"
    arrays = {
        "clouds": np.asarray(scene.clouds, dtype=np.float32),
        "control_positions": np.asarray(scene.control_positions, dtype=np.float32),
        "control_velocities": np.asarray(scene.control_velocities, dtype=np.float32),
        "tracks": np.asarray(scene.tracks, dtype=np.float32),
        "train_frames": np.asarray(scene.train_frames, dtype=np.int32),
        "test_frames": np.asarray(scene.test_frames, dtype=np.int32),
    }
    if scene.masks is not None:
        arrays["masks"] = np.asarray(scene.masks, dtype="u1")
    if scene.target is not None:
        arrays["target"] = np.asarray(scene.target, dtype=np.float32)
    save_arrays(json_path.parent / arrays_name, arrays)

    config = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": scene.name,
        "frame_dt": scene.frame_dt,
        "arrays": arrays_name,
        "material": scene.material,
        "sim": scene.sim,
        "controllers": scene.controllers,
    }
    if scene.camera is not None:
        config["camera"] = scene.camera.to_config()
    json_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return json_path


def load_scene(json_path):
    json_path = Path(json_path)
    if not json_path.exists():
        raise ValidationError(f"scene config not found: {json_path}")
    try:
        config = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{json_path}: invalid JSON: {exc}") from exc
    if config.get("format") != FORMAT_NAME:
        raise ValidationError(
            f"{json_path}: format {config.get('format')!r}, expected {FORMAT_NAME!r}"
        )
    if config.get("version") != FORMAT_VERSION:
        raise ValidationError(
            f"{json_path}: version {config.get('version')}, expected {FORMAT_VERSION}"
        )
    arrays = load_arrays(json_path.parent / config["arrays"])
    for key in ("clouds", "control_positions", "control_velocities", "tracks",
                "train_frames", "test_frames"):
        if key not in arrays:
            raise ValidationError(f"{json_path}: array container missing section {key!r}")

    scene = ScenePackage(
        name=config.get("name", json_path.stem),
        frame_dt=float(config["frame_dt"]),
        clouds=arrays["clouds"],
        control_positions=arrays["control_positions"],
        control_velocities=arrays["control_velocities"],
        tracks=arrays["tracks"],
        train_frames=arrays["train_frames"],
        test_frames=arrays["test_frames"],
        material=config.get("material", {}),
        sim=config.get("sim", {}),
        controllers=config.get("controllers", []),
        camera=Camera.from_config(config["camera"]) if "camera" in config else None,
        masks=arrays.get("masks"),
        target=arrays.get("target"),
    )
    return scene.validate()


def build_material(scene):
    m = scene.material
    return MaterialLaw(
        elastic_kind=m.get("elastic", "neo_hookean"),
        plastic_kind=m.get("plastic", "purely_elastic"),
        E=float(m.get("E", 1e5)),
        nu=float(m.get("nu", 0.3)),
        sigma_y=float(m.get("sigma_y", 1e4)),
        friction_angle=float(m.get("friction_angle", 0.5)),
    )


def build_sim(scene):
    """SimConfig and Grid from the scene's sim block."""
    s = scene.sim
    config = SimConfig(
        dt=float(s["dt"]),
        substeps_per_frame=int(s["substeps_per_frame"]),
        gravity=tuple(s.get("gravity", (0.0, 0.0, -9.8))),
        ground_height=s.get("ground_height"),
        grad_substeps=int(s.get("grad_substeps", 10)),
        backend=s.get("backend", "auto"),
    )
    if abs(config.frame_dt - scene.frame_dt) > 1e-9:
        raise ValidationError(
            f"sim dt*substeps = {config.frame_dt} does not match frame_dt {scene.frame_dt}"
        )
    grid = Grid.for_bounds(
        np.asarray(s["grid_lo"], dtype=np.float64),
        np.asarray(s["grid_hi"], dtype=np.float64),
        float(s["dx"]),
    )
    return config, grid


def register_particles(scene, rng=None):
    """Densify the frame-0 cloud into twin particles."""
    spacing = float(scene.sim.get("spacing", 0.015))
    result = fill_interior(scene.cloud(0), spacing, rng=rng)
    density = float(scene.material.get("density", 1000.0))
    volume = scene.sim.get("total_volume")
    return ParticleSet.from_positions(
        result.positions,
        density=density,
        total_volume=float(volume) if volume is not None else None,
    )


def build_controllers(scene, particles):
    """Instantiate controllers from their config blocks.

    Grasps attach to particles within `radius` of `anchor` at frame 0; push
    bodies start at their configured pose.
    """
    out = []
    x0 = particles.x
    for block in scene.controllers:
        kind = block.get("kind")
        if kind == "grasp":
            anchor = np.asarray(block["anchor"], dtype=np.float64)
            radius = float(block.get("radius", 0.03))
            idx = np.nonzero(np.linalg.norm(x0 - anchor, axis=1) <= radius)[0]
            if idx.size == 0:
                raise ValidationError(
                    f"grasp at {anchor.tolist()} r={radius} attaches no particles"
                )
            out.append(GraspController(indices=idx.astype(np.int64)))
        elif kind == "push":
            out.append(
                PushController(
                    shape=block.get("shape", "sphere"),
                    center=np.asarray(block["center"], dtype=np.float64),
                    radius=float(block.get("radius", 0.03)),
                    half_extents=(
                        np.asarray(block["half_extents"], dtype=np.float64)
                        if "half_extents" in block
                        else None
                    ),
                    axis_half_length=float(block.get("axis_half_length", 0.05)),
                    friction=float(block.get("friction", 0.3)),
                )
            )
        else:
            raise ValidationError(f"unknown controller kind {kind!r}")
    return tuple(out)
