"""Multi-step rollout training of the dynamics network.

Each optimizer step draws windows (episode, start frame) and unrolls the
model tau frames on the tape, so the loss gradient flows through the
predicted positions that feed later edge features. Gaussian noise is
injected into the object-vertex history and the property features during
training only; targets stay clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import ValidationError
from ..optim import Adam
from .graph import CONTROLLER, OBJECT, DynGraph, fps, radius_edges, tune_vertex_radius
from .model import GnnConfig, forward, init_params, normalize_properties


@dataclass
class TrainConfig:
    """Optimization settings for train().

    position_noise is in meters; None resolves to 0.05 * d_v once d_v is
    known. property_noise is in normalized property units.
    """

    lookahead: int = 4
    position_noise: float | None = None
    property_noise: float = 0.1
    lr: float = 1e-3
    epochs: int = 5
    batch_episodes: int = 4
    validation_fraction: float = 0.15

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValidationError("lookahead must be >= 1")
        if self.position_noise is not None and self.position_noise < 0:
            raise ValidationError("position_noise must be >= 0")
        if self.property_noise < 0:
            raise ValidationError("property_noise must be >= 0")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.epochs < 1 or self.batch_episodes < 1:
            raise ValidationError("epochs and batch_episodes must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValidationError("validation_fraction must be in [0, 1)")


@dataclass
class EpisodeView:
    """One demonstration decimated to graph vertices."""

    obj_hist: np.ndarray  # (T+1, V, 3)
    ctl_hist: np.ndarray  # (T+1, K, 3)
    actions: np.ndarray  # (T, K, 3)
    phi: np.ndarray  # (V, 3) normalized properties
    frame_dt: float

    @property
    def n_frames(self):
        return len(self.actions)


@dataclass
class TrainResult:
    params: dict
    model: GnnConfig
    norm: dict  # out_scale, d_v, d_e, frame_dt
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)


def episode_view(demo, d_v):
    """Decimate one Demonstration with FPS on its first frame."""
    idx = fps(demo.positions[0], d_v)
    return EpisodeView(
        obj_hist=demo.positions[:, idx],
        ctl_hist=demo.controls,
        actions=demo.actions,
        phi=normalize_properties(demo.properties[idx]),
        frame_dt=demo.frame_dt,
    )


def window_loss(params, view, t0, model, out_scale, d_e, tau,
                rng=None, position_noise=0.0, property_noise=0.0):
    """Mean squared object-vertex error of a tau-step rollout from t0.

    Differentiable in ``params`` when its entries are tape Tensors. The
    object history window ending at t0 gets i.i.d. Gaussian noise, the
    property rows likewise; prediction targets stay clean.
    """
    h = model.history
    if t0 < h or t0 + tau > view.n_frames:
        raise ValidationError("window does not fit the episode")
    n_obj = view.obj_hist.shape[1]
    n_ctl = view.ctl_hist.shape[1]
    n = n_obj + n_ctl
    kinds = np.concatenate(
        [np.full(n_obj, OBJECT, np.uint8), np.full(n_ctl, CONTROLLER, np.uint8)]
    )

    obj_window = view.obj_hist[t0 - h:t0 + 1].astype(np.float64, copy=True)
    phi = view.phi.copy()
    if position_noise > 0.0:
        obj_window += rng.normal(0.0, position_noise, obj_window.shape)
    if property_noise > 0.0:
        phi = phi + rng.normal(0.0, property_noise, phi.shape)
    phi_full = np.concatenate([phi, np.zeros((n_ctl, 3))], axis=0)

    hist = [
        np.concatenate([obj_window[j], view.ctl_hist[t0 - h + j]], axis=0)
        for j in range(h + 1)
    ]
    terms = []
    for i in range(tau):
        cur_val = ad.value_of(hist[-1])
        edges, _ = radius_edges(cur_val, d_e)
        edge_kinds = np.maximum(kinds[edges[:, 0]], kinds[edges[:, 1]]) \
            if len(edges) else np.zeros(0, np.uint8)
        act_full = np.zeros((n, 3))
        act_full[n_obj:] = view.actions[t0 + i]
        graph = DynGraph(
            positions=np.stack([ad.value_of(x) for x in hist], axis=0),
            kinds=kinds,
            phi=phi_full,
            actions=act_full,
            edges=edges,
            edge_kinds=edge_kinds,
            d_v=d_e / 1.5,
            d_e=d_e,
            frame_dt=view.frame_dt,
            vertex_index=np.arange(n_obj),
        )
        positions = ad.stack(hist, axis=0)
        dx = forward(params, graph, model, out_scale=out_scale,
                     phi=phi_full, positions=positions)
        new_cur = ad.add(hist[-1], dx)
        pred_obj = ad.take(new_cur, slice(0, n_obj))
        diff = ad.sub(pred_obj, view.obj_hist[t0 + i + 1])
        terms.append(ad.mean(ad.mul(diff, diff)))
        hist = hist[1:] + [new_cur]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.div(total, float(tau))


def _displacement_scale(views):
    sq_sum, count = 0.0, 0
    for view in views:
        delta = view.obj_hist[1:] - view.obj_hist[:-1]
        sq_sum += float(np.sum(delta * delta))
        count += delta.size
    return max(np.sqrt(sq_sum / max(count, 1)), 1e-6)


def _window_pairs(views, h, tau):
    return [
        (e, t0)
        for e, view in enumerate(views)
        for t0 in range(h, view.n_frames - tau + 1)
    ]


def _validation_pairs(views, h, tau, per_episode=8):
    pairs = []
    for e, view in enumerate(views):
        last = view.n_frames - tau
        t0s = np.unique(np.linspace(h, last, min(per_episode, last - h + 1)).astype(int))
        pairs.extend((e, int(t0)) for t0 in t0s)
    return pairs


def train(dataset, config, rng, model=None, d_v=None):
    """Fit the network on demonstration episodes.

    Returns a TrainResult whose params are the best-validation weights
    (final weights when there is no validation split). Every random
    choice draws from ``rng``, so equal seeds reproduce equal bytes.
    """
    if config is None:
        config = TrainConfig()
    if model is None:
        model = GnnConfig()
    if not dataset:
        raise ValidationError("dataset must contain at least one episode")
    tau, h = config.lookahead, model.history
    for demo in dataset:
        if demo.n_frames < h + tau:
            raise ValidationError(
                f"episode with {demo.n_frames} frames is shorter than h+tau={h + tau}"
            )
    frame_dt = dataset[0].frame_dt
    n_ctl = dataset[0].controls.shape[1]
    for demo in dataset[1:]:
        if abs(demo.frame_dt - frame_dt) > 1e-9:
            raise ValidationError("episodes disagree on frame_dt")
        if demo.controls.shape[1] != n_ctl:
            raise ValidationError("episodes disagree on controller count")

    if d_v is None:
        d_v = tune_vertex_radius(dataset[0].positions[0])
    d_e = 1.5 * d_v
    position_noise = config.position_noise
    if position_noise is None:
        position_noise = 0.05 * d_v

    views = [episode_view(demo, d_v) for demo in dataset]
    n_val = int(round(config.validation_fraction * len(views)))
    n_val = min(max(n_val, 1 if len(views) > 1 else 0), len(views) - 1)
    order = rng.permutation(len(views))
    val_views = [views[i] for i in order[:n_val]]
    train_views = [views[i] for i in order[n_val:]]

    out_scale = _displacement_scale(train_views)
    params = init_params(model, rng)
    opt = Adam(params, lr=config.lr)
    pairs = _window_pairs(train_views, h, tau)
    val_pairs = _validation_pairs(val_views, h, tau)

    def val_loss():
        total = 0.0
        for e, t0 in val_pairs:
            total += float(window_loss(params, val_views[e], t0, model,
                                       out_scale, d_e, tau))
        return total / len(val_pairs)

    result = TrainResult(
        params=params,
        model=model,
        norm={"out_scale": out_scale, "d_v": d_v, "d_e": d_e, "frame_dt": frame_dt},
    )
    best = None
    for _ in range(config.epochs):
        perm = rng.permutation(len(pairs))
        for lo in range(0, len(perm), config.batch_episodes):
            batch = [pairs[i] for i in perm[lo:lo + config.batch_episodes]]
            tracked = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            total = None
            for e, t0 in batch:
                term = window_loss(tracked, train_views[e], t0, model, out_scale,
                                   d_e, tau, rng=rng,
                                   position_noise=position_noise,
                                   property_noise=config.property_noise)
                total = term if total is None else ad.add(total, term)
            total = ad.div(total, float(len(batch)))
            total.backward()
            grads = {k: np.zeros_like(v) if tracked[k].grad is None
                     else tracked[k].grad for k, v in params.items()}
            opt.step(grads)
            result.train_curve.append(float(ad.value_of(total)))
        if val_pairs:
            current = val_loss()
            result.val_curve.append(current)
            if best is None or current < best[0]:
                best = (current, {k: v.copy() for k, v in params.items()})
    if best is not None:
        result.params = best[1]
    return result
