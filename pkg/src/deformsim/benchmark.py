"""Sim-to-sim evaluation scenes and timing helpers.

A hidden simulator with known properties generates the "observations" in a
ScenePackage, so recovery error is measurable. The observed clouds are the
hidden particle positions themselves, laid out on a lattice aligned to the
registration voxelization: re-registering the frame-0 cloud reproduces the
hidden particle set bit-exactly, which makes oracle replay a tight
self-consistency check.

benchmark() drives the whole recovery pipeline on one of these scenes:
register, calibrate, synthesize, train, fine-tune, then score the
calibrated simulator and the network on the held-out frames.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .calibrate import CalibConfig, GlobalProperties, optimize_global, optimize_local
from .errors import SimulationFault, ValidationError
from .gnn import (
    DynGraph,
    FinetuneConfig,
    GnnConfig,
    TrainConfig,
    finetune_properties,
    fps,
    lbs_track_points,
    normalize_properties,
    radius_edges,
    rollout,
    train,
)
from .gnn.graph import CONTROLLER, OBJECT
from .metrics import MetricsRecord, metric_cd, metric_iou
from .mpm.engine import Grid, ParticleSet, SimConfig, simulate_frame
from .scenes import (
    Camera,
    ScenePackage,
    build_controllers,
    build_material,
    build_sim,
    make_split,
    register_particles,
)
from .skinning import estimate_rotations, project_silhouette, skin_weights
from .synth import SynthConfig, synthesize

# lattice pitch; a power-of-two fraction so lattice points sit exactly on
# voxel centers of the registration fill and pass through it unchanged
SPACING = 1.0 / 64.0


def look_at(eye, center):
    """World-to-camera transform: x right, y down, z toward the target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(center, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValidationError("camera eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(right) < 1e-8:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    mat = np.eye(4)
    mat[:3, :3] = rot
    mat[:3, 3] = -rot @ eye
    return mat


def _lattice(ix, iy, iz):
    """Particles at voxel centers (index + 0.5) * SPACING."""
    ii, jj, kk = np.meshgrid(ix, iy, iz, indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
    return (idx + 0.5) * SPACING


def _track_indices(positions, count=8):
    """Spread sample along x so both ends of the object are tracked."""
    order = np.argsort(positions[:, 0], kind="stable")
    picks = np.linspace(0, len(order) - 1, count).round().astype(int)
    return order[picks]


def _rollout_clouds(particles, props, law, grid, config, controllers, actions):
    ps = particles.copy()
    clouds = [ps.x.copy()]
    for act in actions:
        simulate_frame(ps, props, law, grid, config, controllers, act)
        clouds.append(ps.x.copy())
    return np.stack(clouds)


def _kinematic_controls(anchors, actions, frame_dt):
    pos = np.empty((len(actions) + 1, len(anchors), 3))
    pos[0] = anchors
    for t, act in enumerate(actions):
        pos[t + 1] = pos[t] + np.asarray(act) * frame_dt
    return pos


def _render_masks(clouds, camera):
    masks = []
    for cloud in clouds:
        mask, behind = project_silhouette(cloud, camera, radius=2)
        if behind:
            raise ValidationError("scene generation produced an off-camera frame")
        masks.append(mask)
    return np.stack(masks)


def _assemble(name, clouds, anchors, actions, track_idx, material, sim,
              controller_blocks, camera, frame_dt, target=None):
    train, test = make_split(len(clouds))
    scene = ScenePackage(
        name=name,
        frame_dt=frame_dt,
        clouds=clouds,
        control_positions=_kinematic_controls(anchors, actions, frame_dt),
        control_velocities=np.asarray(actions, dtype=np.float64),
        tracks=clouds[:, track_idx],
        train_frames=train,
        test_frames=test,
        material=material,
        sim=sim,
        controllers=controller_blocks,
        camera=camera,
        masks=_render_masks(clouds, camera),
        target=target,
    )
    return scene.validate()


def _truth_props(particles, E, mu, nu, rho, sigma_y):
    n = particles.count
    arr = lambda v: np.full(n, v, dtype=np.float64) if np.ndim(v) == 0 else np.asarray(v)
    return {
        "E": arr(E),
        "mu": arr(mu),
        "nu": arr(nu),
        "m": arr(rho) * particles.V0,
        "sigma_y": arr(sigma_y),
    }


def make_two_material_scene(n_frames=10):
    """Bar with a soft and a stiff half, grasped mid-span and lifted.

    The hidden halves have E = 1e4 / 1e5 Pa split at x = part_boundary_x;
    under lift the soft overhang sags roughly ten times more than the stiff
    one, which is the signal property recovery has to explain. The material
    block carries deliberately wrong initial guesses.

    Returns (scene, truth) where truth holds the hidden per-particle
    properties and the part labels.
    """
    positions = _lattice(np.arange(24, 36), np.arange(28, 32), np.arange(8, 12))
    boundary_x = 30 * SPACING
    parts = (positions[:, 0] >= boundary_x).astype(np.int64)
    e_true = np.where(parts == 0, 1e4, 1e5)
    mu_true, nu_true, rho_true, sigma_y = 0.3, 0.3, 1000.0, 1e4

    total_volume = len(positions) * SPACING**3
    particles = ParticleSet.from_positions(positions, density=rho_true,
                                           total_volume=total_volume)
    props = _truth_props(particles, e_true, mu_true, nu_true, rho_true, sigma_y)

    frame_dt = 0.04
    sim = {
        "dt": 2.5e-4,
        "substeps_per_frame": 160,
        "gravity": [0.0, 0.0, -9.8],
        "ground_height": 8 * SPACING,
        "grid_lo": [0.30, 0.36, 0.10],
        "grid_hi": [0.66, 0.58, 0.32],
        "dx": 0.02,
        "spacing": SPACING,
        "total_volume": total_volume,
        "grad_substeps": 10,
        "backend": "auto",
    }
    material = {  # initial guesses handed to calibration, not the truth
        "elastic": "neo_hookean",
        "plastic": "purely_elastic",
        "E": 3e4,
        "nu": nu_true,
        "sigma_y": sigma_y,
        "density": rho_true,
        "friction": 0.5,
    }
    anchor = np.array([boundary_x, 30 * SPACING, 11.5 * SPACING])
    controller_blocks = [{"kind": "grasp", "anchor": anchor.tolist(), "radius": 0.026}]

    actions = np.zeros((n_frames - 1, 1, 3))
    lift = min(5, n_frames - 1)
    actions[:lift] = [0.0, 0.0, 0.25]  # raise mid-span, overhangs sag by stiffness

    config = SimConfig(dt=sim["dt"], substeps_per_frame=sim["substeps_per_frame"],
                       ground_height=sim["ground_height"])
    grid = Grid.for_bounds(sim["grid_lo"], sim["grid_hi"], sim["dx"])
    law = build_material(_Blocks(material))
    controllers = build_controllers(_Blocks(material, controller_blocks), particles)
    clouds = _rollout_clouds(particles, props, law, grid, config, controllers, actions)

    camera = Camera(fx=110.0, fy=110.0, cx=32.0, cy=32.0, width=64, height=64,
                    world_to_cam=look_at([0.47, 0.02, 0.42], [0.48, 0.47, 0.17]))
    scene = _assemble("two-material-bar", clouds, anchor[None], actions,
                      _track_indices(positions), material, sim, controller_blocks,
                      camera, frame_dt)
    truth = {
        "E": e_true,
        "mu": mu_true,
        "nu": nu_true,
        "rho": rho_true,
        "sigma_y": sigma_y,
        "parts": parts,
        "part_boundary_x": boundary_x,
        "positions0": positions,
    }
    return scene, truth


def make_uniform_scene(e_true=5e4, n_frames=8):
    """Small homogeneous bar for fast recovery fixtures.

    Grasped mid-span, lifted for three frames, then held so the overhangs
    ring at a stiffness-dependent frequency. The material block's E is a
    neutral default, not the hidden value.
    """
    positions = _lattice(np.arange(26, 34), np.arange(29, 33), np.arange(8, 11))
    mu_true, nu_true, rho_true, sigma_y = 0.4, 0.3, 1000.0, 1e4

    total_volume = len(positions) * SPACING**3
    particles = ParticleSet.from_positions(positions, density=rho_true,
                                           total_volume=total_volume)
    props = _truth_props(particles, e_true, mu_true, nu_true, rho_true, sigma_y)

    frame_dt = 0.04
    sim = {
        "dt": 4e-4,
        "substeps_per_frame": 100,
        "gravity": [0.0, 0.0, -9.8],
        "ground_height": 8 * SPACING,
        "grid_lo": [0.34, 0.42, 0.10],
        "grid_hi": [0.60, 0.55, 0.28],
        "dx": 0.02,
        "spacing": SPACING,
        "total_volume": total_volume,
        "grad_substeps": 10,
        "backend": "auto",
    }
    material = {
        "elastic": "neo_hookean",
        "plastic": "purely_elastic",
        "E": 2e4,
        "nu": nu_true,
        "sigma_y": sigma_y,
        "density": rho_true,
        "friction": mu_true,
    }
    anchor = np.array([30 * SPACING, 31 * SPACING, 10.5 * SPACING])
    controller_blocks = [{"kind": "grasp", "anchor": anchor.tolist(), "radius": 0.026}]

    actions = np.zeros((n_frames - 1, 1, 3))
    lift = min(3, n_frames - 1)
    actions[:lift] = [0.0, 0.0, 0.3]

    config = SimConfig(dt=sim["dt"], substeps_per_frame=sim["substeps_per_frame"],
                       ground_height=sim["ground_height"])
    grid = Grid.for_bounds(sim["grid_lo"], sim["grid_hi"], sim["dx"])
    law = build_material(_Blocks(material))
    controllers = build_controllers(_Blocks(material, controller_blocks), particles)
    clouds = _rollout_clouds(particles, props, law, grid, config, controllers, actions)

    camera = Camera(fx=110.0, fy=110.0, cx=32.0, cy=32.0, width=64, height=64,
                    world_to_cam=look_at([0.47, 0.08, 0.40], [0.47, 0.48, 0.16]))
    scene = _assemble("uniform-bar", clouds, anchor[None], actions,
                      _track_indices(positions), material, sim, controller_blocks,
                      camera, frame_dt)
    truth = {
        "E": np.full(len(positions), e_true),
        "mu": mu_true,
        "nu": nu_true,
        "rho": rho_true,
        "sigma_y": sigma_y,
        "parts": np.zeros(len(positions), dtype=np.int64),
        "positions0": positions,
    }
    return scene, truth


def make_standard_scene(n_frames=20):
    """Uniform soft block on the ground, grasped on top, lifted then dragged.

    The single-material workhorse for model training, timing, and planning
    fixtures. Its target cloud is the rest cloud shifted 0.12 m along +x.
    """
    positions = _lattice(np.arange(28, 36), np.arange(28, 36), np.arange(8, 16))
    e_true, mu_true, nu_true, rho_true, sigma_y = 2e4, 0.4, 0.3, 1000.0, 1e4

    total_volume = len(positions) * SPACING**3
    particles = ParticleSet.from_positions(positions, density=rho_true,
                                           total_volume=total_volume)
    props = _truth_props(particles, e_true, mu_true, nu_true, rho_true, sigma_y)

    frame_dt = 0.04
    sim = {
        "dt": 1e-4,
        "substeps_per_frame": 400,
        "gravity": [0.0, 0.0, -9.8],
        "ground_height": 8 * SPACING,
        "grid_lo": [0.25, 0.25, 0.10],
        "grid_hi": [0.80, 0.75, 0.48],
        "dx": 0.02,
        "spacing": SPACING,
        "total_volume": total_volume,
        "grad_substeps": 10,
        "backend": "auto",
    }
    material = {
        "elastic": "neo_hookean",
        "plastic": "purely_elastic",
        "E": e_true,
        "nu": nu_true,
        "sigma_y": sigma_y,
        "density": rho_true,
        "friction": mu_true,
    }
    anchor = np.array([32 * SPACING, 32 * SPACING, 15.2 * SPACING])
    controller_blocks = [{"kind": "grasp", "anchor": anchor.tolist(), "radius": 0.03}]

    actions = np.zeros((n_frames - 1, 1, 3))
    lift = min(5, n_frames - 1)
    actions[:lift] = [0.0, 0.0, 0.15]
    actions[lift:] = [0.12, 0.0, 0.0]

    config = SimConfig(dt=sim["dt"], substeps_per_frame=sim["substeps_per_frame"],
                       ground_height=sim["ground_height"])
    grid = Grid.for_bounds(sim["grid_lo"], sim["grid_hi"], sim["dx"])
    law = build_material(_Blocks(material))
    controllers = build_controllers(_Blocks(material, controller_blocks), particles)
    clouds = _rollout_clouds(particles, props, law, grid, config, controllers, actions)

    camera = Camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64,
                    world_to_cam=look_at([0.52, -0.05, 0.55], [0.52, 0.50, 0.20]))
    scene = _assemble("standard-block", clouds, anchor[None], actions,
                      _track_indices(positions), material, sim, controller_blocks,
                      camera, frame_dt, target=positions + np.array([0.12, 0.0, 0.0]))
    truth = {
        "E": np.full(len(positions), e_true),
        "mu": mu_true,
        "nu": nu_true,
        "rho": rho_true,
        "sigma_y": sigma_y,
        "parts": np.zeros(len(positions), dtype=np.int64),
        "positions0": positions,
    }
    return scene, truth


class _Blocks:
    """Just enough scene surface for the shared block builders."""

    def __init__(self, material, controllers=()):
        self.material = material
        self.controllers = list(controllers)


def oracle_twin(scene, truth):
    """Hidden-truth particle set and property arrays, re-registered from the
    scene the way any consumer would see them."""
    from .scenes import register_particles

    particles = register_particles(scene if scene.allowed_frames is not None
                                   else scene.training_view())
    if particles.count != len(truth["positions0"]):
        raise ValidationError(
            f"registration returned {particles.count} particles, hidden twin has "
            f"{len(truth['positions0'])}"
        )
    props = _truth_props(particles, truth["E"], truth["mu"], truth["nu"],
                         truth["rho"], truth["sigma_y"])
    return particles, props


def measure_fps(stepper, n_frames, repeats=5, warmup=1):
    """Median-of-repeats wall-clock frame rate of a zero-argument stepper."""
    if n_frames < 1:
        raise ValidationError("measure_fps needs n_frames >= 1")
    for _ in range(warmup):
        stepper()
    rates = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(n_frames):
            stepper()
        elapsed = time.perf_counter() - start
        rates.append(n_frames / max(elapsed, 1e-12))
    return float(np.median(rates))


# --- full-pipeline harness ---

_SCENE_MAKERS = {
    "standard": make_standard_scene,
    "uniform": make_uniform_scene,
    "two-material": make_two_material_scene,
}


@dataclass
class BenchmarkConfig:
    """One evaluation run: scene choice plus per-stage overrides.

    Stage configs left as None fall back to that stage's defaults, and
    d_v=None lets training tune the vertex radius from the data. oracle
    skips recovery and replays the hidden twin instead, which bounds the
    harness's own error at zero.
    """

    scene: str = "standard"
    n_frames: int | None = None
    episodes: int = 50
    oracle: bool = False
    d_v: float | None = None
    calib: CalibConfig | None = None
    synth: SynthConfig | None = None
    train: TrainConfig | None = None
    finetune: FinetuneConfig | None = None
    model: GnnConfig | None = None

    def __post_init__(self):
        if self.scene not in _SCENE_MAKERS:
            raise ValidationError(
                f"unknown scene {self.scene!r}, choose from {sorted(_SCENE_MAKERS)}"
            )
        if self.episodes < 1:
            raise ValidationError("episodes must be >= 1")
        if self.n_frames is not None and self.n_frames < 2:
            raise ValidationError("n_frames must be >= 2")
        if self.d_v is not None and not self.d_v > 0:
            raise ValidationError("d_v must be positive")


def benchmark(config, rng=None):
    """Run the recovery pipeline on a hidden-twin scene and score it.

    Returns MetricsRecord entries keyed by evaluator: "mpm" for the
    calibrated simulator replayed through the observed actions, "gnn_raw"
    for the trained network carrying calibrated properties, "gnn" after
    per-vertex fine-tuning. Every stage sees only the training split;
    metrics are scored on the held-out frames. A simulation fault ends
    the run early: completed records are kept and a "partial" entry
    names the stage that failed.
    """
    if rng is None:
        rng = np.random.default_rng()
    kwargs = {} if config.n_frames is None else {"n_frames": config.n_frames}
    scene, truth = _SCENE_MAKERS[config.scene](**kwargs)
    view = scene.training_view()
    records = {}
    stage = "register"
    try:
        if config.oracle:
            particles, props = oracle_twin(view, truth)
            stage = "replay"
            records["mpm"] = _replay_record(scene, particles, props)
            return records

        particles = register_particles(view)

        stage = "calibrate"
        calib_cfg = config.calib if config.calib is not None else CalibConfig()
        init = GlobalProperties.from_material(view.material)
        global_fit = optimize_global(view, init, calib_cfg, rng=rng)
        local_fit = optimize_local(view, global_fit.params, calib_cfg, rng=rng)
        local = local_fit.params
        table = np.column_stack([local.E, local.mu, local.rho])

        stage = "synthesize"
        demos = synthesize(view, particles, table, config.episodes,
                           config=config.synth,
                           seed=int(rng.integers(2**31 - 1)))

        stage = "train"
        train_cfg = config.train if config.train is not None else TrainConfig()
        fitted = train(demos, train_cfg, rng, model=config.model, d_v=config.d_v)

        handle = (fitted.params, fitted.model, fitted.norm)

        stage = "evaluate"
        # same frame-0 cloud and radius as fine-tuning, so phi rows align
        idx = fps(scene.clouds[0], fitted.norm["d_v"])
        phi_cal = normalize_properties(table[idx])
        records["gnn_raw"] = _gnn_record(scene, handle, idx, phi_cal)

        stage = "finetune"
        ft_cfg = config.finetune if config.finetune is not None else FinetuneConfig()
        if ft_cfg.max_frames is None:
            # the view still reports full n_frames; cap the rollout at the split
            ft_cfg = replace(ft_cfg, max_frames=len(scene.train_frames))
        phi, _ = finetune_properties(fitted.params, fitted.model, fitted.norm,
                                     view, phi0=phi_cal, config=ft_cfg)

        stage = "evaluate"
        records["gnn"] = _gnn_record(scene, handle, idx, phi)

        stage = "replay"
        records["mpm"] = _replay_record(scene, particles,
                                        _local_props(particles, local))
    except SimulationFault:
        records["partial"] = MetricsRecord(failure_stage=stage)
    return records


def _local_props(particles, local):
    """Simulator property dict from a per-particle calibration result."""
    n = particles.count
    return {
        "E": np.asarray(local.E, dtype=np.float64),
        "mu": np.asarray(local.mu, dtype=np.float64),
        "nu": np.full(n, float(local.nu)),
        "m": np.asarray(local.rho, dtype=np.float64) * particles.V0,
        "sigma_y": np.full(n, float(local.sigma_y)),
    }


def _track_rows(scene):
    """Row indices of the track points in the frame-0 cloud."""
    d, idx = cKDTree(scene.clouds[0]).query(scene.tracks[0])
    if np.any(d > 1e-9):
        raise ValidationError("track points are not rows of the frame-0 cloud")
    return idx


def _score_frame(record, pred_cloud, pred_track, scene, frame):
    record.cd.append(metric_cd(pred_cloud, scene.clouds[frame]))
    record.track.append(float(np.mean(
        np.linalg.norm(pred_track - scene.tracks[frame], axis=-1))))
    mask, behind = project_silhouette(pred_cloud, scene.camera, radius=2)
    if behind:
        raise SimulationFault("prediction left the camera frustum", frame=frame)
    record.iou.append(metric_iou(mask, scene.masks[frame]))


def _replay_record(scene, particles, props):
    """Replay a twin through the observed actions and score the test frames."""
    law = build_material(scene)
    sim_config, grid = build_sim(scene)
    controllers = build_controllers(scene, particles)
    ps = particles.copy()
    clouds = np.empty((scene.n_frames,) + ps.x.shape)
    clouds[0] = ps.x
    elapsed = 0.0
    for t in range(scene.n_frames - 1):
        start = time.perf_counter()
        simulate_frame(ps, props, law, grid, sim_config, controllers,
                       scene.control_velocities[t])
        elapsed += time.perf_counter() - start
        clouds[t + 1] = ps.x
    record = MetricsRecord(seconds_per_frame=elapsed / (scene.n_frames - 1))
    track_idx = _track_rows(scene)
    for f in scene.test_frames:
        _score_frame(record, clouds[f], clouds[f][track_idx], scene, int(f))
    record.validate()
    return record


def _gnn_record(scene, model, idx, phi_obj):
    """Score an autoregressive network rollout over the held-out frames.

    model is the usual (params, config, norm) handle. The rollout starts
    at the last training frame with observed history, so the score
    isolates prediction error from state estimation. Dense clouds and
    track points are skinned from the predicted vertices.
    """
    params, net, norm = model
    h = net.history
    b = len(scene.train_frames) - 1
    if b < h:
        raise ValidationError(
            f"need at least {h + 1} training frames for the model history"
        )
    hist_obj = scene.clouds[b - h:b + 1][:, idx]
    hist_ctl = scene.control_positions[b - h:b + 1]
    positions = np.concatenate([hist_obj, hist_ctl], axis=1)
    n_obj = len(idx)
    n_ctl = hist_ctl.shape[1]
    kinds = np.concatenate([np.full(n_obj, OBJECT, np.uint8),
                            np.full(n_ctl, CONTROLLER, np.uint8)])
    phi = np.zeros((n_obj + n_ctl, 3))
    phi[:n_obj] = phi_obj
    edges, _ = radius_edges(positions[-1], norm["d_e"])
    edge_kinds = np.maximum(kinds[edges[:, 0]], kinds[edges[:, 1]]) \
        if len(edges) else np.zeros(0, np.uint8)
    graph = DynGraph(
        positions=positions,
        kinds=kinds,
        phi=phi,
        actions=np.zeros((n_obj + n_ctl, 3)),
        edges=edges,
        edge_kinds=edge_kinds,
        d_v=norm["d_v"],
        d_e=norm["d_e"],
        frame_dt=norm["frame_dt"],
        vertex_index=idx,
    )
    actions = scene.control_velocities[b:]
    start = time.perf_counter()
    traj = rollout(params, graph, actions, net, out_scale=norm["out_scale"],
                   fast=True)
    seconds = (time.perf_counter() - start) / len(actions)

    v_rest = scene.clouds[b][idx]
    cloud_bind = skin_weights(scene.clouds[b], v_rest)
    track_bind = skin_weights(scene.tracks[b], v_rest)
    record = MetricsRecord(seconds_per_frame=seconds)
    for f in scene.test_frames:
        v_now = traj[f - b][:n_obj]
        rot, _ = estimate_rotations(v_rest, v_now)
        dense = np.asarray(
            lbs_track_points(cloud_bind, scene.clouds[b], v_rest, v_now, rot))
        track = np.asarray(
            lbs_track_points(track_bind, scene.tracks[b], v_rest, v_now, rot))
        _score_frame(record, dense, track, scene, int(f))
    record.validate()
    return record
