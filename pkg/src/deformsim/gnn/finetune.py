"""Post-hoc per-vertex property fitting against observed frames.

Network weights stay frozen; only the normalized property rows of the
object vertices move. The model is rolled out over the scene's frames on
the tape, predicted dense track points are interpolated from vertex
motion by linear blend skinning, and the loss combines a unidirectional
chamfer term (observed cloud to predicted vertices) with track-point MSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import SimulationFault, ValidationError
from ..optim import Adam
from ..skinning import estimate_rotations, skin_weights
from .graph import CONTROLLER, OBJECT, DynGraph, fps, radius_edges
from .model import forward


@dataclass
class FinetuneConfig:
    iterations: int = 30
    lr: float = 0.05
    chamfer_weight: float = 1.0
    track_weight: float = 1.0
    max_frames: int | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.chamfer_weight < 0 or self.track_weight < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.max_frames is not None and self.max_frames < 2:
            raise ValidationError("max_frames must be >= 2")


def lbs_track_points(binding, points_rest, v_rest, v_now, rotations):
    """Skinned point positions, differentiable in the vertex translations.

    Rotations are held constant on the tape (they are re-estimated from
    values each iteration); the gradient flows through the blended
    per-vertex translation term only.
    """
    idx, w = binding.indices, binding.weights
    local = points_rest[:, None, :] - v_rest[idx]
    rotated = np.einsum("mkab,mkb->mka", rotations[idx], local)
    base = np.einsum("mk,mka->ma", w, rotated)
    gathered = ad.reshape(ad.gather(v_now, idx.reshape(-1)), idx.shape + (3,))
    moved = ad.sum_(ad.mul(gathered, w[:, :, None]), axis=1)
    return ad.add(base, moved)


def _scene_loss(params, tphi, model, norm, data, config):
    """Rollout over the observed frames; chamfer + track MSE per frame."""
    clouds, tracks, ctl_vel, v0, ctl0, binding = data
    h = model.history
    n_obj, n_ctl = len(v0), len(ctl0)
    n = n_obj + n_ctl
    kinds = np.concatenate(
        [np.full(n_obj, OBJECT, np.uint8), np.full(n_ctl, CONTROLLER, np.uint8)]
    )
    phi_full = ad.concatenate([tphi, np.zeros((n_ctl, 3))], axis=0)
    start = np.concatenate([v0, ctl0], axis=0)
    hist = [start for _ in range(h + 1)]  # replication-padded history

    total = None
    for t in range(len(clouds) - 1):
        cur_val = ad.value_of(hist[-1])
        edges, _ = radius_edges(cur_val, norm["d_e"])
        edge_kinds = np.maximum(kinds[edges[:, 0]], kinds[edges[:, 1]]) \
            if len(edges) else np.zeros(0, np.uint8)
        act_full = np.zeros((n, 3))
        act_full[n_obj:] = ctl_vel[t]
        graph = DynGraph(
            positions=np.stack([ad.value_of(x) for x in hist], axis=0),
            kinds=kinds,
            phi=ad.value_of(phi_full),
            actions=act_full,
            edges=edges,
            edge_kinds=edge_kinds,
            d_v=norm["d_v"],
            d_e=norm["d_e"],
            frame_dt=norm["frame_dt"],
            vertex_index=np.arange(n_obj),
        )
        dx = forward(params, graph, model, out_scale=norm["out_scale"],
                     phi=phi_full, positions=ad.stack(hist, axis=0))
        new_cur = ad.add(hist[-1], dx)
        pred_obj = ad.take(new_cur, slice(0, n_obj))
        pred_val = ad.value_of(pred_obj)

        term = None
        if config.chamfer_weight > 0:
            cloud = clouds[t + 1]
            d2 = np.sum((cloud[:, None, :] - pred_val[None, :, :]) ** 2, axis=2)
            nn = np.argmin(d2, axis=1)
            dist = ad.norm(ad.sub(ad.gather(pred_obj, nn), cloud), axis=1, eps=1e-24)
            term = ad.mul(ad.mean(dist), config.chamfer_weight)
        if config.track_weight > 0:
            rot, _ = estimate_rotations(v0, pred_val)
            pred_track = lbs_track_points(binding, tracks[0], v0, pred_obj, rot)
            diff = ad.sub(pred_track, tracks[t + 1])
            mse = ad.mean(ad.mul(diff, diff))
            term = ad.mul(mse, config.track_weight) if term is None \
                else ad.add(term, ad.mul(mse, config.track_weight))
        if term is not None:
            total = term if total is None else ad.add(total, term)
        hist = hist[1:] + [new_cur]
    if total is None:
        raise ValidationError("both loss weights are zero")
    return ad.div(total, float(len(clouds) - 1))


def finetune_properties(params, model, norm, scene, phi0=None, config=None):
    """Optimize per-vertex normalized properties against a scene.

    ``params`` is read-only: entries are never wrapped on the tape, so the
    serialized weights are byte-identical afterwards. Returns (phi, info)
    where phi is (n_object_vertices, 3) in normalized units, clipped to
    [-1, 1], and info carries the loss curve plus the vertex indices into
    the frame-0 cloud.
    """
    if config is None:
        config = FinetuneConfig()
    n_frames = scene.n_frames
    if config.max_frames is not None:
        n_frames = min(n_frames, config.max_frames)
    if n_frames < 2:
        raise ValidationError("need at least two frames to fine-tune against")

    cloud0 = scene.cloud(0)
    idx = fps(cloud0, norm["d_v"])
    v0 = cloud0[idx]
    ctl0 = scene.controls(0)
    clouds = [scene.cloud(t) for t in range(n_frames)]
    tracks = [scene.track(t) for t in range(n_frames)]
    ctl_vel = [scene.control_velocity(t) for t in range(n_frames - 1)]
    binding = skin_weights(tracks[0], v0)
    data = (clouds, tracks, ctl_vel, v0, ctl0, binding)

    if phi0 is None:
        phi = np.zeros((len(idx), 3))
    else:
        phi = np.asarray(phi0, dtype=np.float64).copy()
        if phi.shape != (len(idx), 3):
            raise ValidationError(
                f"phi0 must have shape ({len(idx)}, 3), got {phi.shape}"
            )
        np.clip(phi, -1.0, 1.0, out=phi)

    opt = Adam({"phi": phi}, lr=config.lr)
    info = {"loss_curve": [], "rejected": 0, "vertex_index": idx}
    for _ in range(config.iterations):
        tphi = ad.Tensor(phi, requires_grad=True)
        try:
            loss = _scene_loss(params, tphi, model, norm, data, config)
            value = float(ad.value_of(loss))
        except SimulationFault:
            value = np.nan
        if not np.isfinite(value):
            opt.lr *= 0.5  # reject the step, never apply a bad gradient
            info["rejected"] += 1
            info["loss_curve"].append(np.nan)
            continue
        loss.backward()
        grad = tphi.grad if tphi.grad is not None else np.zeros_like(phi)
        opt.step({"phi": grad})
        np.clip(phi, -1.0, 1.0, out=phi)
        info["loss_curve"].append(value)
    info["lr_final"] = opt.lr
    return phi, info
