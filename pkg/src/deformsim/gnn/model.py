"""Property-conditioned graph network over DynGraph inputs.

One forward pass encodes per-vertex and per-edge features, runs p rounds
of message passing with unshared weights, and decodes a displacement per
object vertex; controller vertices move kinematically by their commanded
velocity. Positions enter only through in-edge relative offsets, so the
model is translation equivariant by construction.

Two implementations share the parameter layout: ``forward`` runs in
float64 through the reverse-mode ops (differentiable w.r.t. weights and
properties), ``forward_fast`` is a float32 inference path using
receiver-sorted segment sums.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import autodiff as ad
from ..arrayfile import load_arrays, save_arrays
from ..calibrate import BOUNDS
from ..errors import SimulationFault, ValidationError
from .graph import CONTROLLER, advance_graph

_ACTIVATIONS = ("softsign", "tanh")

# raw property columns are (E, mu, rho); E and rho are mapped in log10
_PROP_LOG = (True, False, True)
_PROP_BOUNDS = (BOUNDS["E"], BOUNDS["mu"], BOUNDS["rho"])


@dataclass(frozen=True)
class GnnConfig:
    """Architecture sizes; the parameter dict shapes derive from these."""

    hidden: int = 32
    propagators: int = 7
    history: int = 3
    activation: str = "softsign"

    def __post_init__(self):
        if self.hidden < 1 or self.propagators < 1 or self.history < 1:
            raise ValidationError("hidden, propagators, history must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def vertex_in(self):
        return 2 + 3 + 3  # kind one-hot, commanded velocity, properties

    @property
    def edge_in(self):
        # relative offset + its length per history frame, edge-kind one-hot
        return 4 * (self.history + 1) + 2


def normalize_properties(props):
    """Map raw (E, mu, rho) rows into [-1, 1] per column.

    E and rho are log10-affine over their calibration bounds, mu linear.
    """
    props = np.asarray(props, dtype=np.float64)
    out = np.empty_like(props)
    for j, ((lo, hi), use_log) in enumerate(zip(_PROP_BOUNDS, _PROP_LOG)):
        col = props[..., j]
        if use_log:
            col, lo, hi = np.log10(col), np.log10(lo), np.log10(hi)
        out[..., j] = 2.0 * (col - lo) / (hi - lo) - 1.0
    return out


def denormalize_properties(phi):
    """Inverse of normalize_properties."""
    phi = np.asarray(phi, dtype=np.float64)
    out = np.empty_like(phi)
    for j, ((lo, hi), use_log) in enumerate(zip(_PROP_BOUNDS, _PROP_LOG)):
        if use_log:
            lo, hi = np.log10(lo), np.log10(hi)
        col = lo + 0.5 * (phi[..., j] + 1.0) * (hi - lo)
        out[..., j] = 10.0**col if use_log else col
    return out


def _act(x, kind):
    if kind == "tanh":
        return ad.tanh(x) if isinstance(x, ad.Tensor) else np.tanh(x)
    if isinstance(x, ad.Tensor):
        return ad.div(x, ad.absolute(x) + 1.0)
    return x / (1.0 + np.abs(x))


def init_params(config, rng):
    """Fresh parameter dict.

    The decoder output layer starts at a reduced scale: small enough that
    an untrained model stays near the rest baseline, non-zero so the loss
    gradient reaches every layer from the first step (a zero final layer
    blocks all upstream gradients until it grows).
    """
    h = config.hidden

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    params = {
        "enc_v.w1": dense(config.vertex_in, h),
        "enc_v.b1": np.zeros(h),
        "enc_v.w2": dense(h, h),
        "enc_v.b2": np.zeros(h),
        "enc_e.w1": dense(config.edge_in, h),
        "enc_e.b1": np.zeros(h),
        "enc_e.w2": dense(h, h),
        "enc_e.b2": np.zeros(h),
    }
    for i in range(config.propagators):
        p = f"prop{i}"
        params[f"{p}.ew_e"] = dense(h, h)
        params[f"{p}.ew_s"] = dense(h, h)
        params[f"{p}.ew_r"] = dense(h, h)
        params[f"{p}.eb1"] = np.zeros(h)
        params[f"{p}.ew2"] = dense(h, h)
        params[f"{p}.eb2"] = np.zeros(h)
        params[f"{p}.vw_v"] = dense(h, h)
        params[f"{p}.vw_a"] = dense(h, h)
        params[f"{p}.vb1"] = np.zeros(h)
        params[f"{p}.vw2"] = dense(h, h)
        params[f"{p}.vb2"] = np.zeros(h)
    params["dec.w1"] = dense(h, h)
    params["dec.b1"] = np.zeros(h)
    params["dec.w2"] = rng.normal(0.0, 0.3 / np.sqrt(h), size=(h, 3))
    params["dec.b2"] = np.zeros(3)
    return params


def expected_shapes(config):
    """Name -> shape table implied by the config."""
    rng = np.random.default_rng(0)
    return {k: v.shape for k, v in init_params(config, rng).items()}


def params_to_f32(params):
    return {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}


def params_to_f64(params):
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def _check_params(params, config):
    want = expected_shapes(config)
    if set(params) != set(want):
        raise ValidationError("parameter names do not match the config")
    for k, shape in want.items():
        if params[k].shape != shape:
            raise ValidationError(f"{k} must have shape {shape}, got {params[k].shape}")


def _features(graph, phi, dtype, positions=None, action_scale=1.0):
    """Vertex features (kind, a_t, phi) and edge features (offset history, kind).

    Actions enter scaled by ``action_scale`` (frame_dt / out_scale in the
    forward passes) so they sit in the same O(1) band as the other
    features and as the decoder's normalized output. ``positions`` may
    override graph.positions with a tape Tensor so multi-step training
    losses differentiate through predicted frames.
    """
    kinds = graph.kinds
    onehot = np.zeros((graph.n_vertices, 2), dtype=dtype)
    onehot[np.arange(graph.n_vertices), kinds] = 1.0
    actions = (graph.actions * action_scale).astype(dtype)
    if isinstance(phi, ad.Tensor):
        vfeat = ad.concatenate([onehot, actions, phi], axis=1)
    else:
        vfeat = np.concatenate([onehot, actions, np.asarray(phi, dtype=dtype)], axis=1)

    send, recv = graph.edges[:, 0], graph.edges[:, 1]
    n_e = len(send)
    pos = graph.positions if positions is None else positions
    kind_onehot = np.zeros((n_e, 2), dtype=dtype)
    kind_onehot[np.arange(n_e), graph.edge_kinds] = 1.0
    if isinstance(pos, ad.Tensor):
        frames = pos.value.shape[0]
        rel = ad.div(
            ad.sub(ad.gather(pos, send, axis=1), ad.gather(pos, recv, axis=1)),
            graph.d_e,
        )
        dist = ad.norm(rel, axis=-1, eps=1e-24)
        efeat = ad.concatenate(
            [
                ad.reshape(ad.swapaxes(rel, 0, 1), (n_e, 3 * frames)),
                ad.swapaxes(dist, 0, 1),
                kind_onehot,
            ],
            axis=1,
        )
        return vfeat, efeat
    pos = np.asarray(pos).astype(dtype)
    rel = (pos[:, send, :] - pos[:, recv, :]) / dtype(graph.d_e)  # (h+1, E, 3)
    dist = np.sqrt(np.einsum("hek,hek->he", rel, rel))
    parts = [
        rel.transpose(1, 0, 2).reshape(n_e, 3 * pos.shape[0]),
        dist.T,
        kind_onehot,
    ]
    efeat = np.concatenate(parts, axis=1)
    return vfeat, efeat


def _fault_check(value, stage, round_index):
    if not np.all(np.isfinite(ad.value_of(value))):
        raise SimulationFault(
            "non-finite activation in the dynamics network",
            stage=stage,
            round_index=round_index,
        )


def forward(params, graph, config, out_scale=1.0, phi=None, positions=None):
    """Displacement per vertex for one frame step, float64.

    Differentiable in ``params`` entries, ``phi``, and the ``positions``
    override when they are tape Tensors. Controller rows of the result
    are a_t * frame_dt exactly. Returns (n, 3).
    """
    act = config.activation
    if phi is None:
        phi = graph.phi
    vfeat, efeat = _features(graph, phi, np.float64, positions=positions,
                             action_scale=graph.frame_dt / out_scale)
    send, recv = graph.edges[:, 0], graph.edges[:, 1]
    n = graph.n_vertices

    v = ad.matmul(_act(ad.matmul(vfeat, params["enc_v.w1"]) + params["enc_v.b1"], act),
                  params["enc_v.w2"]) + params["enc_v.b2"]
    e = ad.matmul(_act(ad.matmul(efeat, params["enc_e.w1"]) + params["enc_e.b1"], act),
                  params["enc_e.w2"]) + params["enc_e.b2"]
    _fault_check(v, "encode", -1)

    for i in range(config.propagators):
        p = f"prop{i}"
        m = ad.matmul(e, params[f"{p}.ew_e"]) \
            + ad.gather(ad.matmul(v, params[f"{p}.ew_s"]), send) \
            + ad.gather(ad.matmul(v, params[f"{p}.ew_r"]), recv) \
            + params[f"{p}.eb1"]
        e = ad.matmul(_act(m, act), params[f"{p}.ew2"]) + params[f"{p}.eb2"]
        agg = ad.scatter_add(e, recv, n)
        u = ad.matmul(v, params[f"{p}.vw_v"]) + ad.matmul(agg, params[f"{p}.vw_a"]) \
            + params[f"{p}.vb1"]
        v = v + ad.matmul(_act(u, act), params[f"{p}.vw2"]) + params[f"{p}.vb2"]
        _fault_check(v, "propagate", i)

    d = ad.matmul(_act(ad.matmul(v, params["dec.w1"]) + params["dec.b1"], act),
                  params["dec.w2"]) + params["dec.b2"]
    _fault_check(d, "decode", config.propagators)
    kinematic = graph.actions * graph.frame_dt
    ctl = (graph.kinds == CONTROLLER)[:, None]
    return ad.where(ctl, kinematic, d * out_scale)


def _segment_sum(values, splits):
    out = np.zeros((len(splits) - 1, values.shape[1]), dtype=values.dtype)
    starts = splits[:-1]
    nonempty = splits[1:] > starts
    if np.any(nonempty):
        out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def forward_fast(params, graph, config, out_scale=1.0):
    """Float32 inference path; same math as forward, no tape.

    Expects float32 params (params_to_f32). Edges must be sorted by
    receiver, which build_graph and advance_graph guarantee.
    """
    act = config.activation
    send, recv = graph.edges[:, 0], graph.edges[:, 1]
    n = graph.n_vertices
    splits = np.searchsorted(recv, np.arange(n + 1))
    vfeat, efeat = _features(graph, graph.phi, np.float32,
                             action_scale=graph.frame_dt / out_scale)

    v = _act(vfeat @ params["enc_v.w1"] + params["enc_v.b1"], act)
    v = v @ params["enc_v.w2"] + params["enc_v.b2"]
    e = _act(efeat @ params["enc_e.w1"] + params["enc_e.b1"], act)
    e = e @ params["enc_e.w2"] + params["enc_e.b2"]
    _fault_check(v, "encode", -1)

    for i in range(config.propagators):
        p = f"prop{i}"
        m = e @ params[f"{p}.ew_e"]
        m += (v @ params[f"{p}.ew_s"])[send]
        m += (v @ params[f"{p}.ew_r"])[recv]
        m += params[f"{p}.eb1"]
        e = _act(m, act) @ params[f"{p}.ew2"] + params[f"{p}.eb2"]
        agg = _segment_sum(e, splits)
        u = v @ params[f"{p}.vw_v"] + agg @ params[f"{p}.vw_a"] + params[f"{p}.vb1"]
        v = v + _act(u, act) @ params[f"{p}.vw2"] + params[f"{p}.vb2"]
        _fault_check(v, "propagate", i)

    d = _act(v @ params["dec.w1"] + params["dec.b1"], act) @ params["dec.w2"]
    d += params["dec.b2"]
    _fault_check(d, "decode", config.propagators)
    out = d.astype(np.float64) * out_scale
    ctl = graph.kinds == CONTROLLER
    out[ctl] = graph.actions[ctl] * graph.frame_dt
    return out


def rollout(params, graph, actions, config, out_scale=1.0, fast=False):
    """Autoregressive prediction over an action sequence.

    actions is (T, k, 3) commanded controller velocities per frame step.
    Returns (T+1, n, 3) vertex positions; row 0 is the graph's current
    frame. Edges are rebuilt on each predicted frame.
    """
    actions = np.asarray(actions, dtype=np.float64)
    n_ctl = int(np.sum(graph.kinds == CONTROLLER))
    if actions.ndim != 3 or actions.shape[1:] != (n_ctl, 3):
        raise ValidationError("actions must have shape (T, n_controllers, 3)")
    if len(actions) < 1:
        raise ValidationError("need at least one action step")
    step = forward_fast if fast else forward
    run_params = params_to_f32(params) if fast and \
        next(iter(params.values())).dtype != np.float32 else params

    out = np.empty((len(actions) + 1, graph.n_vertices, 3))
    out[0] = graph.positions[-1]
    g = graph
    for t in range(len(actions)):
        act_full = np.zeros((graph.n_vertices, 3))
        act_full[graph.kinds == CONTROLLER] = actions[t]
        g = replace(g, actions=act_full)
        try:
            dx = ad.value_of(step(run_params, g, config, out_scale))
        except SimulationFault as fault:
            raise SimulationFault(
                fault.args[0], step_index=t, **fault.context
            ) from fault
        out[t + 1] = out[t] + dx
        if t + 1 < len(actions):
            g = advance_graph(g, out[t + 1])
    return out


def save_model(path, params, config, norm):
    """Write a checkpoint: version header, shape table, float32 weights.

    ``norm`` holds the scalar constants inference needs alongside the
    weights: out_scale, d_v, d_e, frame_dt.
    """
    arrays = {
        "meta/version": np.array([1], dtype=np.int64),
        "meta/arch": np.array(
            [config.hidden, config.propagators, config.history,
             _ACTIVATIONS.index(config.activation)],
            dtype=np.int64,
        ),
        "norm/prop_bounds": np.array(_PROP_BOUNDS, dtype=np.float64),
        "norm/scalars": np.array(
            [norm["out_scale"], norm["d_v"], norm["d_e"], norm["frame_dt"]],
            dtype=np.float64,
        ),
    }
    for k, v in params.items():
        arrays[f"param/{k}"] = np.asarray(v, dtype=np.float32)
    save_arrays(path, arrays)


def load_model(path):
    """Read a checkpoint; returns (params float32, config, norm dict)."""
    arrays = load_arrays(path)
    for key in ("meta/version", "meta/arch", "norm/scalars"):
        if key not in arrays:
            raise ValidationError(f"{path}: missing checkpoint section {key}")
    version = int(arrays["meta/version"][0])
    if version != 1:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    hidden, props, history, act_idx = (int(x) for x in arrays["meta/arch"])
    config = GnnConfig(
        hidden=hidden,
        propagators=props,
        history=history,
        activation=_ACTIVATIONS[act_idx],
    )
    params = {
        k[len("param/"):]: np.asarray(v, dtype=np.float32)
        for k, v in arrays.items()
        if k.startswith("param/")
    }
    _check_params(params, config)
    scalars = arrays["norm/scalars"].astype(np.float64)
    norm = {
        "out_scale": float(scalars[0]),
        "d_v": float(scalars[1]),
        "d_e": float(scalars[2]),
        "frame_dt": float(scalars[3]),
    }
    return params, config, norm
