"""Two-stage property recovery: global homogenization, then local refinement.

Both stages minimize the same per-frame objective (bidirectional chamfer to
the observed cloud plus smooth-l1 tracking error, weights 1.0 / 0.1) with
adaptive-moment updates in log10 parameter space, using truncated-window
gradients. The global stage fits one scalar per property; the local stage
refines per-particle E, mu, rho from the global values, box-projected every
step. Nearest-neighbor correspondences inside the chamfer terms are held
constant per evaluation, so gradients flow through distances only.

sigma_y receives no gradient through the truncated tape (plastic projection
is applied straight-through) and stays at its initial value; it is reported
as fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import SimulationFault, ValidationError
from .mpm.adjoint import window_gradients
from .mpm.engine import simulate_frame
from .optim import Adam, clip_grad_norm
from .scenes import build_controllers, build_material, build_sim, register_particles

LAMBDA_CD = 1.0
LAMBDA_TRACK = 0.1

BOUNDS = {
    "E": (1e3, 1e7),
    "rho": (50.0, 3000.0),
    "mu": (1e-3, 2.0),  # lower bound keeps log10 parameterization usable
    "nu": (0.05, 0.49),
    "sigma_y": (10.0, 1e6),
}


@dataclass
class GlobalProperties:
    """One scalar per physical property."""

    E: float = 1e4
    mu: float = 0.5
    nu: float = 0.3
    sigma_y: float = 1e4
    rho: float = 1000.0

    def validate(self):
        for name in ("E", "mu", "nu", "sigma_y", "rho"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise ValidationError(f"global property {name} must be positive, got {v}")
        if self.nu >= 0.5:
            raise ValidationError("nu must be < 0.5")
        return self

    @classmethod
    def from_material(cls, material):
        """Initial guess from a scene's material block.

        E, friction and density must be present; a scene without a
        calibration prior should fail loudly, not start from built-ins.
        """
        try:
            return cls(
                E=float(material["E"]),
                mu=float(material["friction"]),
                nu=float(material.get("nu", 0.3)),
                sigma_y=float(material.get("sigma_y", 1e4)),
                rho=float(material["density"]),
            ).validate()
        except KeyError as exc:
            raise ValidationError(
                f"material block lacks {exc.args[0]!r}"
            ) from exc


@dataclass
class LocalProperties:
    """Per-particle refinement of the gradient-bearing properties."""

    E: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    nu: float = 0.3
    sigma_y: float = 1e4

    @classmethod
    def from_global(cls, gp, n):
        return cls(
            E=np.full(n, gp.E),
            mu=np.full(n, gp.mu),
            rho=np.full(n, gp.rho),
            nu=gp.nu,
            sigma_y=gp.sigma_y,
        )


@dataclass
class CalibConfig:
    iters_global: int = 200
    iters_local: int = 300
    lr_global: float = 0.05
    lr_local: float = 0.01
    window: int = 4
    refresh_every: int = 8
    eval_every: int = 10
    clip_norm: float = 10.0
    seed: int = 0
    # position-only observations pin E and rho to the ray E/rho = const
    # (sag and wave speed both depend on the ratio), so by default rho stays
    # at the registered density prior instead of sliding along the ray
    optimize_rho: bool = False

    def validate(self):
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        return self


@dataclass
class CalibResult:
    params: object
    window_losses: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)
    best_loss: float = math.inf


# --- loss terms ---


def chamfer_bidirectional(pred, obs):
    """Mean nearest-neighbor distance pred->obs plus obs->pred (unsquared)."""
    pred_vals = np.asarray(ad.value_of(pred), dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred_vals.size == 0 or obs.size == 0:
        raise ValidationError("chamfer_bidirectional: empty point set")
    _, j = cKDTree(obs).query(pred_vals)
    fwd = ad.mean(ad.norm(ad.sub(pred, obs[j]), axis=1, eps=1e-24))
    _, i = cKDTree(pred_vals).query(obs)
    bwd = ad.mean(ad.norm(ad.sub(ad.gather(pred, i, axis=0), obs), axis=1, eps=1e-24))
    return ad.add(fwd, bwd)


def track_loss(pred, gt):
    """Smooth-l1 of per-coordinate error, mean over points and coordinates."""
    gt = np.asarray(gt, dtype=np.float64)
    if ad.value_of(pred).shape != gt.shape:
        raise ValidationError(
            f"track_loss: shape mismatch {ad.value_of(pred).shape} vs {gt.shape}"
        )
    diff = ad.absolute(ad.sub(pred, gt))
    quad = ad.mul(0.5, ad.mul(diff, diff))
    lin = ad.sub(diff, 0.5)
    return ad.mean(ad.where(ad.value_of(diff) < 1.0, quad, lin))


def total_loss(cd, track):
    return ad.add(ad.mul(LAMBDA_CD, cd), ad.mul(LAMBDA_TRACK, track))


def frame_objective(x, cloud, track_idx, gt_track):
    cd = chamfer_bidirectional(x, cloud)
    tr = track_loss(ad.gather(x, track_idx, axis=0), gt_track)
    return total_loss(cd, tr)


# --- twin assembly ---


@dataclass
class TwinSetup:
    """Scene-derived simulation objects shared by both stages."""

    particles0: object
    law: object
    grid: object
    sim_config: object
    track_idx: np.ndarray
    scene: object

    @classmethod
    def from_scene(cls, scene, rng=None):
        scene = scene.training_view() if scene.allowed_frames is None else scene
        particles = register_particles(scene, rng=rng)
        law = build_material(scene)
        sim_config, grid = build_sim(scene)
        _, track_idx = cKDTree(particles.x).query(scene.track(0))
        return cls(
            particles0=particles,
            law=law,
            grid=grid,
            sim_config=sim_config,
            track_idx=np.asarray(track_idx, dtype=np.int64),
            scene=scene,
        )

    @property
    def n_particles(self):
        return self.particles0.count

    @property
    def n_train(self):
        return len(self.scene.train_frames)

    def controllers_at(self, t0):
        """Fresh controllers with push poses advanced to frame t0."""
        ctrls = build_controllers(self.scene, self.particles0)
        if t0 > 0:
            drift = np.zeros((len(ctrls), 3))
            for t in range(t0):
                drift += self.scene.control_velocity(t) * self.scene.frame_dt
            for k, ctrl in enumerate(ctrls):
                if ctrl.kind == "push":
                    ctrl.center = ctrl.center + drift[k]
        return ctrls

    def actions(self, t0, count):
        return [self.scene.control_velocity(t0 + i) for i in range(count)]


def _props_arrays(twin, E, mu, nu, rho):
    n = twin.n_particles
    to_arr = lambda v: np.full(n, float(v)) if np.ndim(v) == 0 else np.asarray(v, float)
    rho_arr = to_arr(rho)
    return {
        "E": to_arr(E),
        "mu": to_arr(mu),
        "nu": to_arr(nu),
        "m": rho_arr * twin.particles0.V0,
        "sigma_y": to_arr(twin.law.sigma_y),
    }


def rollout_states(twin, props, upto):
    """Plain rollout from frame 0; returns particle snapshots at frames 0..upto."""
    ps = twin.particles0.copy()
    ctrls = twin.controllers_at(0)
    states = [ps.copy()]
    for t in range(upto):
        simulate_frame(
            ps, props, twin.law, twin.grid, twin.sim_config, ctrls,
            twin.scene.control_velocity(t),
        )
        states.append(ps.copy())
    return states


def training_loss(twin, props):
    """Mean frame objective over training frames 1..n_train-1."""
    states = rollout_states(twin, props, twin.n_train - 1)
    losses = []
    for t in range(1, twin.n_train):
        obj = frame_objective(
            states[t].x, twin.scene.cloud(t), twin.track_idx, twin.scene.track(t)
        )
        losses.append(float(ad.value_of(obj)))
    return float(np.mean(losses))


# --- optimization stages ---


def _window_step(twin, props, t0, n_frames, wrt, start_state):
    """Gradient of the window objective starting from a cached frame state.

    Clipping happens later in log10 space, so raw gradients come back here.
    """
    ps = start_state.copy()
    ctrls = twin.controllers_at(t0)
    frame_actions = twin.actions(t0, n_frames)

    def frame_loss(i, x):
        t = t0 + 1 + i
        return frame_objective(x, twin.scene.cloud(t), twin.track_idx, twin.scene.track(t))

    return window_gradients(
        ps, props, twin.law, twin.grid, twin.sim_config, ctrls, frame_actions,
        frame_loss, wrt=wrt,
    )


def _log_step(adam, log_params, log_grads, clip_norm):
    clip_grad_norm(log_grads, clip_norm)
    adam.step(log_grads)


def _project(log_params, names):
    for name in names:
        lo, hi = BOUNDS[name]
        np.clip(log_params[name], math.log10(lo), math.log10(hi), out=log_params[name])


def optimize_global(scene, init, config, rng=None):
    """Fit one scalar per property (sigma_y held fixed) on training frames."""
    init.validate()
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    twin = TwinSetup.from_scene(scene, rng=rng)

    names = ("E", "mu", "nu") + (("rho",) if config.optimize_rho else ())
    log_params = {k: np.array(math.log10(getattr(init, k))) for k in names}
    _project(log_params, names)
    adam = Adam(log_params, lr=config.lr_global)

    result = CalibResult(params=None)
    best = _lin(log_params, init)
    best_log = _snapshot(log_params)
    result.best_loss = _safe_training_loss(twin, _global_props(twin, best))
    result.eval_losses.append(result.best_loss)

    states = None
    window = min(config.window, twin.n_train - 1)
    lr_scale = 1.0
    for it in range(config.iters_global):
        current = _lin(log_params, init)
        props = _global_props(twin, current)
        if states is None or it % config.refresh_every == 0:
            try:
                states = rollout_states(twin, props, twin.n_train - 1 - window)
            except SimulationFault:
                _reject(adam, log_params, best_log)
                lr_scale *= 0.5
                states = None
                result.window_losses.append(math.inf)
                continue
        t0 = int(rng.integers(0, len(states)))
        wrt = ("E", "mu", "nu") + (("m",) if config.optimize_rho else ())
        try:
            res = _window_step(twin, props, t0, window, wrt, states[t0])
        except SimulationFault:
            _reject(adam, log_params, best_log)
            lr_scale *= 0.5
            states = None
            result.window_losses.append(math.inf)
            continue
        result.window_losses.append(res.loss)

        g = res.grads
        ln10 = math.log(10.0)
        log_grads = {
            "E": np.array(ln10 * current.E * float(np.sum(g["E"]))),
            "mu": np.array(ln10 * current.mu * float(np.sum(g["mu"]))),
            "nu": np.array(ln10 * current.nu * float(np.sum(g["nu"]))),
        }
        if config.optimize_rho:
            log_grads["rho"] = np.array(
                ln10 * current.rho * float(np.dot(g["m"], twin.particles0.V0))
            )
        _log_step(adam, log_params, log_grads, config.clip_norm * lr_scale)
        _project(log_params, names)

        if (it + 1) % config.eval_every == 0 or it == config.iters_global - 1:
            candidate = _lin(log_params, init)
            loss = _safe_training_loss(twin, _global_props(twin, candidate))
            result.eval_losses.append(loss)
            if loss < result.best_loss:
                result.best_loss = loss
                best = candidate
                best_log = _snapshot(log_params)

    result.params = best
    return result


def optimize_local(scene, global_init, config, rng=None):
    """Refine per-particle E, mu, rho from the global fit."""
    global_init.validate()
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(config.seed + 1)
    twin = TwinSetup.from_scene(scene, rng=rng)
    n = twin.n_particles

    local = LocalProperties.from_global(global_init, n)
    names = ("E", "mu") + (("rho",) if config.optimize_rho else ())
    log_params = {k: np.log10(getattr(local, k)) for k in names}
    _project(log_params, names)
    adam = Adam(log_params, lr=config.lr_local)

    result = CalibResult(params=None)
    best_arrays = {k: getattr(local, k).copy() for k in names}  # exact broadcast
    best_log = _snapshot(log_params)
    result.best_loss = _safe_training_loss(twin, _local_props(twin, best_arrays, local))
    result.eval_losses.append(result.best_loss)
    if config.iters_local == 0:
        result.params = _local_result(local, best_arrays)
        return result

    states = None
    window = min(config.window, twin.n_train - 1)
    lr_scale = 1.0
    for it in range(config.iters_local):
        arrays = {k: 10.0 ** log_params[k] for k in names}
        props = _local_props(twin, arrays, local)
        if states is None or it % config.refresh_every == 0:
            try:
                states = rollout_states(twin, props, twin.n_train - 1 - window)
            except SimulationFault:
                _reject(adam, log_params, best_log)
                lr_scale *= 0.5
                states = None
                result.window_losses.append(math.inf)
                continue
        t0 = int(rng.integers(0, len(states)))
        wrt = ("E", "mu") + (("m",) if config.optimize_rho else ())
        try:
            res = _window_step(twin, props, t0, window, wrt, states[t0])
        except SimulationFault:
            _reject(adam, log_params, best_log)
            lr_scale *= 0.5
            states = None
            result.window_losses.append(math.inf)
            continue
        result.window_losses.append(res.loss)

        g = res.grads
        ln10 = math.log(10.0)
        log_grads = {
            "E": ln10 * arrays["E"] * g["E"],
            "mu": ln10 * arrays["mu"] * g["mu"],
        }
        if config.optimize_rho:
            log_grads["rho"] = ln10 * arrays["rho"] * (g["m"] * twin.particles0.V0)
        _log_step(adam, log_params, log_grads, config.clip_norm * lr_scale)
        _project(log_params, names)

        if (it + 1) % config.eval_every == 0 or it == config.iters_local - 1:
            arrays = {k: 10.0 ** log_params[k] for k in names}
            loss = _safe_training_loss(twin, _local_props(twin, arrays, local))
            result.eval_losses.append(loss)
            if loss < result.best_loss:
                result.best_loss = loss
                best_arrays = arrays
                best_log = _snapshot(log_params)

    result.params = _local_result(local, best_arrays)
    return result


# --- helpers ---


def _lin(log_params, init):
    return GlobalProperties(
        E=float(10.0 ** log_params["E"]),
        mu=float(10.0 ** log_params["mu"]),
        nu=float(10.0 ** log_params["nu"]),
        sigma_y=init.sigma_y,
        rho=float(10.0 ** log_params["rho"]) if "rho" in log_params else init.rho,
    )


def _global_props(twin, gp):
    return _props_arrays(twin, gp.E, gp.mu, gp.nu, gp.rho)


def _local_props(twin, arrays, local):
    rho = arrays["rho"] if "rho" in arrays else local.rho
    return _props_arrays(twin, arrays["E"], arrays["mu"], local.nu, rho)


def _local_result(local, arrays):
    return replace(
        local,
        E=arrays["E"],
        mu=arrays["mu"],
        rho=arrays["rho"] if "rho" in arrays else local.rho,
    )


def _safe_training_loss(twin, props):
    try:
        return training_loss(twin, props)
    except SimulationFault:
        return math.inf


def _snapshot(log_params):
    return {k: v.copy() for k, v in log_params.items()}


def _reject(adam, log_params, best_log):
    """Faulted trial: halve the step, fall back to the best-known point.

    When the fault happened AT the best-known point (an unstable init),
    falling back would loop forever, so contract toward the center of the
    bounds box instead; that region is stable by construction.
    """
    adam.lr *= 0.5
    at_best = all(
        np.allclose(log_params[k], best_log[k], atol=1e-12) for k in log_params
    )
    if at_best:
        for k in log_params:
            lo, hi = BOUNDS[k]
            center = 0.5 * (math.log10(lo) + math.log10(hi))
            log_params[k][...] = 0.8 * log_params[k] + 0.2 * center
            best_log[k][...] = log_params[k]
    else:
        for k in log_params:
            log_params[k][...] = best_log[k]
