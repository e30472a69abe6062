"""Truncated-window gradients for material properties.

Each frame runs its substeps plainly except the last ``config.grad_substeps``,
which are replayed on the tape with the requested properties as leaf tensors.
Frame-end losses differentiate through that recorded suffix only; everything
earlier (including the state carried in from previous frames) is treated as a
constant trajectory. This bounds the memory and step count of the reverse
pass while keeping enough sensitivity to recover material parameters.

The finite-difference oracle for this scheme perturbs the same truncated
objective: hold the plain prefix at the base properties and re-run only the
recorded suffix of each frame with the perturbed values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import autodiff as ad
from ..optim import clip_grad_norm
from .engine import _advance_controllers, simulate_frame, substep


@dataclass
class WindowResult:
    """Loss, property gradients, and the pre-clip gradient norm for a window."""

    loss: float
    grads: dict
    grad_norm: float


def run_prefix(particles, props, law, grid, config, controllers=(), actions=None):
    """Advance one frame up to (not including) the recorded suffix.

    Plain execution; dispatches to the numba backend when eligible. No-op
    when the whole frame is recorded.
    """
    n_plain = config.substeps_per_frame - config.grad_substeps
    if n_plain <= 0:
        return particles
    prefix_cfg = replace(
        config,
        substeps_per_frame=n_plain,
        grad_substeps=min(config.grad_substeps, n_plain),
    )
    return simulate_frame(particles, props, law, grid, prefix_cfg, controllers, actions)


def run_suffix(particles, props, law, grid, config, controllers=(), actions=None):
    """Advance the recorded suffix of one frame, substep by substep.

    Runs taped when any property (or state field) is a tensor, plainly
    otherwise; both produce identical values.
    """
    for _ in range(config.grad_substeps):
        substep(particles, props, law, grid, config, controllers, actions)
        _advance_controllers(controllers, actions, config.dt)
    return particles


def window_gradients(
    particles,
    props,
    law,
    grid,
    config,
    controllers,
    frame_actions,
    frame_loss,
    wrt,
    clip_norm=None,
):
    """Loss and property gradients over a window of frames.

    ``frame_loss(t, x)`` maps the frame index and end-of-frame positions to a
    scalar; contributions are summed over the window. ``wrt`` names the
    property arrays in ``props`` to differentiate. Gradients are clipped in
    place to ``clip_norm`` (global norm) when given; the returned norm is the
    pre-clip value. ``particles`` is advanced through the window and left
    detached.
    """
    leaves = {
        k: ad.Tensor(np.array(props[k], dtype=np.float64), requires_grad=True) for k in wrt
    }
    taped_props = dict(props)
    taped_props.update(leaves)

    total = None
    for t, actions in enumerate(frame_actions):
        run_prefix(particles, props, law, grid, config, controllers, actions)
        run_suffix(particles, taped_props, law, grid, config, controllers, actions)
        contrib = frame_loss(t, particles.x)
        total = contrib if total is None else ad.add(total, contrib)
        _detach(particles)

    loss_val = float(ad.value_of(total))
    if isinstance(total, ad.Tensor):
        total.backward()
    grads = {}
    for k, leaf in leaves.items():
        grads[k] = (
            leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.value)
        )
    norm = clip_grad_norm(grads, clip_norm) if clip_norm is not None else _global_norm(grads)
    return WindowResult(loss=loss_val, grads=grads, grad_norm=norm)


def _detach(particles):
    particles.x = ad.value_of(particles.x)
    particles.v = ad.value_of(particles.v)
    particles.C = ad.value_of(particles.C)
    particles.F = ad.value_of(particles.F)


def _global_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    return float(np.sqrt(total))
