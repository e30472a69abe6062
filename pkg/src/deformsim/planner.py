"""Sampling-based action planning over the learned dynamics model.

mppi_step perturbs a nominal controller-velocity sequence with Gaussian
noise, rolls every candidate through the model, and replaces the nominal
with the exp(-cost/temperature) weighted average. plan_loop wraps that in
a receding-horizon loop: plan, execute the first few actions, shift, and
replan until the target cost threshold or the replan budget is hit.

The plan cost is a single-direction Chamfer distance from the predicted
object vertices to the target cloud. Judging only where the object went
(and not whether it covers every target point) keeps partial progress
toward an oversized target from being penalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import SimulationFault, ValidationError
from .gnn.graph import CONTROLLER, OBJECT, advance_graph
from .gnn.model import params_to_f32, rollout

_COST_KINDS = ("chamfer",)


@dataclass(frozen=True)
class PlanConfig:
    """Sampling-planner settings.

    Velocities are in m/s; ``bounds`` clamps every action component.
    Each replan executes the first ``replan_stride`` actions of the plan.
    ``cost_threshold`` terminates the loop (0.0 only stops on an exact
    hit); ``intermediate_costs`` scores every predicted frame instead of
    just the last one.
    """

    horizon: int = 10
    samples: int = 64
    temperature: float = 0.05
    noise_std: float = 0.1
    bounds: tuple = (-0.3, 0.3)
    replan_stride: int = 1
    max_replans: int = 30
    cost_threshold: float = 0.0
    intermediate_costs: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.samples < 1:
            raise ValidationError("samples must be >= 1")
        if not self.temperature > 0.0:
            raise ValidationError("temperature must be positive")
        if not self.noise_std > 0.0:
            raise ValidationError("noise_std must be positive")
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValidationError("bounds must be finite with lo < hi")
        if not 1 <= self.replan_stride <= self.horizon:
            raise ValidationError("replan_stride must be in [1, horizon]")
        if self.max_replans < 1:
            raise ValidationError("max_replans must be >= 1")
        if self.cost_threshold < 0.0:
            raise ValidationError("cost_threshold must be >= 0")


@dataclass
class TargetSpec:
    """Where the plan should put the object: a point cloud to approach."""

    points: np.ndarray
    kind: str = "chamfer"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValidationError("target points must be (m, 3), non-empty")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("target points must be finite")
        if self.kind not in _COST_KINDS:
            raise ValidationError(f"unknown cost kind {self.kind!r}")
        self.points = pts


@dataclass
class PlanResult:
    """Executed plan: actions, cost curve, trajectory, per-replan records."""

    actions: np.ndarray
    cost_curve: np.ndarray
    trajectory: np.ndarray
    replans: int
    reached: bool
    records: list = field(default_factory=list)


def plan_cost(points, target):
    """Mean distance from each predicted point to its nearest target point."""
    if isinstance(target, TargetSpec):
        target = target.points
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValidationError("plan_cost: points must be (n, 3), non-empty")
    d, _ = cKDTree(target).query(points)
    return float(np.mean(d))


def _trajectory_cost(traj, obj_mask, target, config):
    if config.intermediate_costs:
        return float(np.mean(
            [plan_cost(frame[obj_mask], target) for frame in traj[1:]]))
    return plan_cost(traj[-1][obj_mask], target)


def mppi_step(model, graph, nominal, target, config, rng):
    """One planning update: sample, roll out, reweight, average.

    model is a (params, net, norm) triple as returned by load_model.
    Noise is drawn in a single normal() call of shape (samples, horizon,
    k, 3) so fixed seeds pin the exact candidates. Faulted rollouts get
    zero weight; if every sample faults the step raises SimulationFault.
    Returns (updated nominal, info) with per-sample costs, weights, fault
    flags, and the unperturbed nominal's own rollout cost.
    """
    params, net, norm = model
    out_scale = float(norm["out_scale"])
    nominal = np.asarray(nominal, dtype=np.float64)
    n_ctl = int(np.sum(graph.kinds == CONTROLLER))
    if nominal.shape != (config.horizon, n_ctl, 3):
        raise ValidationError(
            f"nominal actions must be {(config.horizon, n_ctl, 3)}, "
            f"got {nominal.shape}")
    lo, hi = config.bounds
    run_params = params_to_f32(params)
    obj_mask = graph.kinds == OBJECT

    noise = rng.normal(
        0.0, config.noise_std,
        size=(config.samples, config.horizon, n_ctl, 3))
    candidates = np.clip(nominal[None] + noise, lo, hi)

    costs = np.full(config.samples, np.inf)
    for m in range(config.samples):
        try:
            traj = rollout(run_params, graph, candidates[m], net,
                           out_scale, fast=True)
        except SimulationFault:
            continue
        costs[m] = _trajectory_cost(traj, obj_mask, target, config)
    ok = np.isfinite(costs)
    if not np.any(ok):
        raise SimulationFault(
            "mppi_step: every sampled rollout faulted",
            stage="plan", samples=config.samples)

    best = float(costs[ok].min())
    weights = np.zeros(config.samples)
    weights[ok] = np.exp(-(costs[ok] - best) / config.temperature)
    weights /= weights.sum()
    updated = np.clip(np.einsum("m,mhkc->hkc", weights, candidates), lo, hi)

    try:
        nom_traj = rollout(run_params, graph, np.clip(nominal, lo, hi),
                           net, out_scale, fast=True)
        nominal_cost = _trajectory_cost(nom_traj, obj_mask, target, config)
    except SimulationFault:
        nominal_cost = float("inf")
    info = {"costs": costs, "weights": weights, "faulted": ~ok,
            "best_cost": best, "nominal_cost": nominal_cost}
    return updated, info


def plan_loop(model, graph, target, config, rng, nominal=None):
    """Receding-horizon planning until the cost threshold or replan budget.

    Executes the first ``replan_stride`` actions of every plan through the
    model, advances the graph along the predicted frames, and warm-starts
    the next plan with the shifted remainder (zero-padded). The cost curve
    holds the state cost before each replan plus the final state; a start
    already at the threshold returns without planning at all.
    """
    params, net, norm = model
    run_params = params_to_f32(params)
    run_model = (run_params, net, norm)
    out_scale = float(norm["out_scale"])
    n_ctl = int(np.sum(graph.kinds == CONTROLLER))
    if nominal is None:
        nominal = np.zeros((config.horizon, n_ctl, 3))
    obj_mask = graph.kinds == OBJECT
    stride = config.replan_stride

    costs = [plan_cost(graph.positions[-1][obj_mask], target)]
    trajectory = [graph.positions[-1].copy()]
    executed = []
    records = []
    reached = costs[-1] <= config.cost_threshold

    while not reached and len(records) < config.max_replans:
        nominal, info = mppi_step(run_model, graph, nominal, target,
                                  config, rng)
        chunk = nominal[:stride]
        traj = rollout(run_params, graph, chunk, net, out_scale, fast=True)
        for pos in traj[1:]:
            graph = advance_graph(graph, pos)
            trajectory.append(pos.copy())
        executed.append(chunk.copy())
        costs.append(plan_cost(graph.positions[-1][obj_mask], target))
        records.append({
            "cost_before": costs[-2],
            "cost_after": costs[-1],
            "best_sample_cost": info["best_cost"],
            "nominal_cost": info["nominal_cost"],
            "actions": chunk.tolist(),
        })
        nominal = np.concatenate(
            [nominal[stride:], np.zeros((stride, n_ctl, 3))])
        reached = costs[-1] <= config.cost_threshold

    actions = (np.concatenate(executed) if executed
               else np.zeros((0, n_ctl, 3)))
    return PlanResult(
        actions=actions,
        cost_curve=np.asarray(costs),
        trajectory=np.stack(trajectory),
        replans=len(records),
        reached=reached,
        records=records,
    )


def plan_transcript(result):
    """Structured-text form of a plan: cost curve plus per-replan records."""
    return json.dumps({
        "replans": result.replans,
        "reached": bool(result.reached),
        "initial_cost": float(result.cost_curve[0]),
        "final_cost": float(result.cost_curve[-1]),
        "cost_curve": result.cost_curve.tolist(),
        "steps": result.records,
    }, indent=2)
