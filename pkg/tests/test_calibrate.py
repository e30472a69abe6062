"""Property-recovery oracles: loss terms, fixed points, sim-to-sim fits."""

import math

import numpy as np
import pytest

from deformsim import autodiff as ad
from deformsim.benchmark import make_uniform_scene
from deformsim.calibrate import (
    BOUNDS,
    CalibConfig,
    GlobalProperties,
    LocalProperties,
    chamfer_bidirectional,
    frame_objective,
    optimize_global,
    optimize_local,
    total_loss,
    track_loss,
)
from deformsim.errors import ValidationError


@pytest.fixture(scope="module")
def uniform_scene():
    return make_uniform_scene(e_true=5e4)


def truth_init(truth, **overrides):
    vals = dict(E=truth["E"][0], mu=truth["mu"], nu=truth["nu"],
                sigma_y=truth["sigma_y"], rho=truth["rho"])
    vals.update(overrides)
    return GlobalProperties(**vals)


def test_chamfer_point_pair():
    val = ad.value_of(chamfer_bidirectional(np.zeros((1, 3)), np.array([[1.0, 0, 0]])))
    assert val == pytest.approx(2.0, abs=1e-9)


def test_chamfer_identical_sets_zero():
    pts = np.random.default_rng(0).normal(size=(12, 3))
    assert ad.value_of(chamfer_bidirectional(pts, pts.copy())) == pytest.approx(0.0, abs=1e-9)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    d = np.linalg.norm(x[:, None] - y[None], axis=-1)
    expected = d.min(axis=1).mean() + d.min(axis=0).mean()
    assert ad.value_of(chamfer_bidirectional(x, y)) == pytest.approx(expected, abs=1e-10)


def test_chamfer_rejects_empty():
    with pytest.raises(ValidationError):
        chamfer_bidirectional(np.zeros((0, 3)), np.zeros((3, 3)))


def test_track_loss_quadratic_branch():
    pred = np.array([[0.5, 0.0, 0.0]])
    val = ad.value_of(track_loss(pred, np.zeros((1, 3))))
    assert val == pytest.approx(0.5 * 0.25 / 3.0, abs=1e-12)


def test_track_loss_linear_branch():
    pred = np.array([[2.0, 0.0, 0.0]])
    val = ad.value_of(track_loss(pred, np.zeros((1, 3))))
    assert val == pytest.approx(1.5 / 3.0, abs=1e-12)


def test_track_loss_identical_zero_and_mismatch():
    pts = np.random.default_rng(2).normal(size=(5, 3))
    assert ad.value_of(track_loss(pts, pts.copy())) == 0.0
    with pytest.raises(ValidationError):
        track_loss(pts, pts[:3])


def test_total_loss_weights():
    assert ad.value_of(total_loss(0.02, 0.1)) == pytest.approx(0.03, abs=1e-15)


def test_frame_objective_recombines():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 3))
    cloud = x + rng.normal(size=(20, 3)) * 0.01
    idx = np.array([2, 7, 11])
    gt = x[idx] + 0.005
    expected = ad.value_of(chamfer_bidirectional(x, cloud)) + 0.1 * ad.value_of(
        track_loss(x[idx], gt)
    )
    assert ad.value_of(frame_objective(x, cloud, idx, gt)) == pytest.approx(
        expected, rel=1e-12
    )


def test_global_fixed_point(uniform_scene):
    scene, truth = uniform_scene
    init = truth_init(truth)
    res = optimize_global(scene, init, CalibConfig(iters_global=10, eval_every=5))
    assert res.eval_losses[0] - res.best_loss < 1e-4
    for name in ("E", "mu", "nu"):
        drift = abs(math.log10(getattr(res.params, name)) - math.log10(getattr(init, name)))
        assert drift < 0.01 * abs(math.log10(getattr(init, name))) + 1e-12


def test_global_recovers_hidden_stiffness(uniform_scene):
    scene, truth = uniform_scene
    init = truth_init(truth, E=1e4)
    res = optimize_global(scene, init, CalibConfig(iters_global=80, eval_every=10))
    assert abs(res.params.E - 5e4) / 5e4 < 0.3
    assert res.best_loss <= res.eval_losses[0]


def test_global_unstable_init_recovers(uniform_scene):
    scene, truth = uniform_scene
    init = truth_init(truth, E=1e9)  # clamps to the bound, which still faults
    res = optimize_global(scene, init, CalibConfig(iters_global=25, eval_every=5))
    assert math.inf in res.window_losses  # first trials rejected
    assert math.isfinite(res.best_loss)
    lo, hi = BOUNDS["E"]
    assert lo <= res.params.E <= hi


def test_global_params_stay_in_bounds(uniform_scene):
    scene, truth = uniform_scene
    init = truth_init(truth, E=2e4, mu=1.5)
    res = optimize_global(scene, init, CalibConfig(iters_global=12, eval_every=4))
    for name in ("E", "mu", "nu", "rho"):
        lo, hi = BOUNDS[name]
        assert lo <= getattr(res.params, name) <= hi


def test_local_zero_iterations_is_broadcast(uniform_scene):
    scene, truth = uniform_scene
    gp = truth_init(truth, E=3e4)
    res = optimize_local(scene, gp, CalibConfig(iters_local=0))
    assert isinstance(res.params, LocalProperties)
    np.testing.assert_array_equal(res.params.E, np.full(96, 3e4))
    np.testing.assert_array_equal(res.params.mu, np.full(96, gp.mu))
    np.testing.assert_array_equal(res.params.rho, np.full(96, gp.rho))


def test_local_homogeneous_twin_keeps_spread_small(uniform_scene):
    scene, truth = uniform_scene
    res = optimize_local(scene, truth_init(truth),
                         CalibConfig(iters_local=8, eval_every=4))
    spread = np.std(res.params.E) / np.mean(res.params.E)
    assert spread < 0.10
    assert res.best_loss <= res.eval_losses[0]
