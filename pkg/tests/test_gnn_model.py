"""Network forward/rollout against a dense reference, equivariances, checkpoints."""

import numpy as np
import pytest

from deformsim import autodiff as ad
from deformsim.errors import SimulationFault, ValidationError
from deformsim.gnn import (
    DynGraph,
    GnnConfig,
    build_graph,
    denormalize_properties,
    forward,
    forward_fast,
    init_params,
    load_model,
    normalize_properties,
    params_to_f32,
    rollout,
    save_model,
)

CONFIG = GnnConfig(hidden=16, propagators=3, history=3)


def _act_ref(x, kind):
    return np.tanh(x) if kind == "tanh" else x / (1.0 + np.abs(x))


def dense_reference(params, graph, config, out_scale=1.0):
    """Per-edge/per-vertex loop implementation of the same architecture."""
    frames = graph.positions.shape[0]
    n = graph.n_vertices
    act = config.activation

    vfeat = np.zeros((n, 8))
    for i in range(n):
        vfeat[i, graph.kinds[i]] = 1.0
        vfeat[i, 2:5] = graph.actions[i] * (graph.frame_dt / out_scale)
        vfeat[i, 5:8] = graph.phi[i]
    n_e = len(graph.edges)
    efeat = np.zeros((n_e, 4 * frames + 2))
    for k, (s, r) in enumerate(graph.edges):
        for t in range(frames):
            d = (graph.positions[t, s] - graph.positions[t, r]) / graph.d_e
            efeat[k, 3 * t:3 * t + 3] = d
            efeat[k, 3 * frames + t] = np.linalg.norm(d)
        efeat[k, 4 * frames + graph.edge_kinds[k]] = 1.0

    v = _act_ref(vfeat @ params["enc_v.w1"] + params["enc_v.b1"], act)
    v = v @ params["enc_v.w2"] + params["enc_v.b2"]
    e = _act_ref(efeat @ params["enc_e.w1"] + params["enc_e.b1"], act)
    e = e @ params["enc_e.w2"] + params["enc_e.b2"]

    for i in range(config.propagators):
        p = f"prop{i}"
        w_edge = np.concatenate(
            [params[f"{p}.ew_e"], params[f"{p}.ew_s"], params[f"{p}.ew_r"]], axis=0
        )
        new_e = np.zeros_like(e)
        for k, (s, r) in enumerate(graph.edges):
            z = np.concatenate([e[k], v[s], v[r]]) @ w_edge + params[f"{p}.eb1"]
            new_e[k] = _act_ref(z, act) @ params[f"{p}.ew2"] + params[f"{p}.eb2"]
        e = new_e
        agg = np.zeros_like(v)
        for k, (_, r) in enumerate(graph.edges):
            agg[r] += e[k]
        w_vert = np.concatenate([params[f"{p}.vw_v"], params[f"{p}.vw_a"]], axis=0)
        new_v = np.zeros_like(v)
        for j in range(n):
            z = np.concatenate([v[j], agg[j]]) @ w_vert + params[f"{p}.vb1"]
            new_v[j] = v[j] + _act_ref(z, act) @ params[f"{p}.vw2"] + params[f"{p}.vb2"]
        v = new_v

    out = np.zeros((n, 3))
    for j in range(n):
        if graph.kinds[j] == 1:
            out[j] = graph.actions[j] * graph.frame_dt
        else:
            z = _act_ref(v[j] @ params["dec.w1"] + params["dec.b1"], act)
            out[j] = (z @ params["dec.w2"] + params["dec.b2"]) * out_scale
    return out


def _random_params(config, rng):
    params = init_params(config, rng)
    params["dec.w2"] = rng.normal(0.0, 0.2, (config.hidden, 3))
    params["dec.b2"] = rng.normal(0.0, 0.05, 3)
    return params


def _props(rng, n):
    return np.stack(
        [
            10.0 ** rng.uniform(3.5, 6.0, n),
            rng.uniform(0.1, 1.0, n),
            10.0 ** rng.uniform(2.0, 3.2, n),
        ],
        axis=1,
    )


def _small_graph(seed=0, n_obj=14, n_ctl=2):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 0.25, (n_obj, 3))
    cloud = base[None] + np.cumsum(rng.normal(0, 0.003, (4, n_obj, 3)), axis=0)
    ctl = base[:n_ctl][None] + rng.normal(0, 0.01, (4, n_ctl, 3))
    vel = rng.normal(0, 0.2, (n_ctl, 3))
    return build_graph(cloud, ctl, _props(rng, n_obj), d_v=1e-4, frame_dt=0.05,
                       control_velocity=vel, d_e=0.12)


class TestPropertyNormalization:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        props = _props(rng, 50)
        np.testing.assert_allclose(
            denormalize_properties(normalize_properties(props)), props, rtol=1e-12
        )

    def test_bounds_map_to_unit_interval(self):
        lo = normalize_properties(np.array([[1e3, 1e-3, 50.0]]))
        hi = normalize_properties(np.array([[1e7, 2.0, 3000.0]]))
        np.testing.assert_allclose(lo, -1.0, atol=1e-12)
        np.testing.assert_allclose(hi, 1.0, atol=1e-12)


class TestForward:
    def test_matches_dense_reference(self):
        for seed in range(3):
            g = _small_graph(seed)
            params = _random_params(CONFIG, np.random.default_rng(100 + seed))
            got = forward(params, g, CONFIG, out_scale=0.7)
            want = dense_reference(params, g, CONFIG, out_scale=0.7)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)

    def test_fast_path_matches_reference_architecture(self):
        g = _small_graph(3)
        params = _random_params(CONFIG, np.random.default_rng(7))
        slow = forward(params, g, CONFIG)
        fast = forward_fast(params_to_f32(params), g, CONFIG)
        np.testing.assert_allclose(fast, slow, rtol=1e-3, atol=1e-5)

    def test_zero_decoder_gives_zero_object_displacement(self):
        g = _small_graph(1)
        params = init_params(CONFIG, np.random.default_rng(0))
        params["dec.w2"] = np.zeros_like(params["dec.w2"])
        params["dec.b2"] = np.zeros_like(params["dec.b2"])
        out = forward(params, g, CONFIG)
        obj = g.kinds == 0
        assert np.all(out[obj] == 0.0)
        np.testing.assert_array_equal(out[~obj], g.actions[~obj] * g.frame_dt)

    def test_controller_rows_are_kinematic(self):
        g = _small_graph(2)
        params = _random_params(CONFIG, np.random.default_rng(1))
        out = forward(params, g, CONFIG)
        ctl = g.kinds == 1
        np.testing.assert_array_equal(out[ctl], g.actions[ctl] * g.frame_dt)

    def test_nonfinite_weight_faults_with_round_index(self):
        g = _small_graph(4)
        params = _random_params(CONFIG, np.random.default_rng(2))
        params["prop2.ew_e"] = params["prop2.ew_e"].copy()
        params["prop2.ew_e"][0, 0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(SimulationFault) as err:
            forward(params, g, CONFIG)
        assert err.value.context["round_index"] == 2


def _lattice_graph(rng, n_obj=12, n_ctl=2):
    """All coordinates dyadic so +c with dyadic c is exact arithmetic."""
    grid = np.arange(32) / 32.0
    pick = rng.choice(32 ** 3, size=n_obj, replace=False)
    base = np.stack([grid[pick % 32], grid[(pick // 32) % 32], grid[pick // 1024]], 1)
    steps = rng.integers(-4, 5, (4, n_obj, 3)) / 256.0
    cloud = base[None] + np.cumsum(steps, axis=0)
    ctl_base = base[:n_ctl] + 1.0 / 64.0
    ctl = ctl_base[None] + np.cumsum(rng.integers(-4, 5, (4, n_ctl, 3)) / 256.0, 0)
    vel = rng.normal(0, 0.2, (n_ctl, 3))
    props = _props(rng, n_obj)
    return cloud, ctl, props, vel


class TestEquivariance:
    def test_translation_is_exact(self):
        rng = np.random.default_rng(5)
        cloud, ctl, props, vel = _lattice_graph(rng)
        params = _random_params(CONFIG, np.random.default_rng(6))
        g1 = build_graph(cloud, ctl, props, d_v=1e-4, frame_dt=0.05,
                         control_velocity=vel, d_e=0.5)
        out1 = forward(params, g1, CONFIG)
        for c in ([0.25, -0.5, 1.0], [2.0, 0.125, -0.75]):
            shift = np.asarray(c)
            g2 = build_graph(cloud + shift, ctl + shift, props, d_v=1e-4,
                             frame_dt=0.05, control_velocity=vel, d_e=0.5)
            np.testing.assert_array_equal(g2.edges, g1.edges)
            out2 = forward(params, g2, CONFIG)
            np.testing.assert_array_equal(out2, out1)

    def test_permutation_consistency(self):
        g = _small_graph(8)
        params = _random_params(CONFIG, np.random.default_rng(9))
        out = forward(params, g, CONFIG)
        rng = np.random.default_rng(10)
        perm = rng.permutation(g.n_vertices)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        g2 = DynGraph(
            positions=g.positions[:, perm],
            kinds=g.kinds[perm],
            phi=g.phi[perm],
            actions=g.actions[perm],
            edges=inv[g.edges],
            edge_kinds=g.edge_kinds,
            d_v=g.d_v,
            d_e=g.d_e,
            frame_dt=g.frame_dt,
            vertex_index=np.arange(int(np.sum(g.kinds == 0))),
        )
        out2 = forward(params, g2, CONFIG)
        np.testing.assert_array_equal(out2, out[perm])


class TestGradients:
    def test_matches_central_differences(self):
        g = _small_graph(11)
        base = _random_params(CONFIG, np.random.default_rng(12))
        slices = [("enc_v.w1", (2, 1)), ("prop1.ew_s", (3, 4)),
                  ("prop2.vw_a", (0, 2)), ("dec.w2", (5, 1))]

        def loss_value(params, phi):
            out = forward(params, g, CONFIG, phi=phi)
            if isinstance(out, ad.Tensor):
                return ad.sum_(ad.mul(out, out))
            return float(np.sum(out * out))

        tracked = {k: ad.Tensor(v.copy(), requires_grad=True)
                   for k, v in base.items()}
        phi = ad.Tensor(g.phi.copy(), requires_grad=True)
        loss = loss_value(tracked, phi)
        loss.backward()

        step = 1e-6
        for name, at in slices:
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][at] += step
            minus[name][at] -= step
            fd = (loss_value(plus, None) - loss_value(minus, None)) / (2 * step)
            got = tracked[name].grad[at]
            assert got == pytest.approx(fd, rel=1e-5, abs=1e-10), name

        obj = np.flatnonzero(g.kinds == 0)
        at = (int(obj[3]), 0)
        phi_plus, phi_minus = g.phi.copy(), g.phi.copy()
        phi_plus[at] += step
        phi_minus[at] -= step
        fd = (loss_value(base, phi_plus) - loss_value(base, phi_minus)) / (2 * step)
        assert phi.grad[at] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestRollout:
    def test_single_step_equals_forward(self):
        from dataclasses import replace

        g = _small_graph(13)
        params = _random_params(CONFIG, np.random.default_rng(14))
        n_ctl = int(np.sum(g.kinds == 1))
        actions = np.random.default_rng(15).normal(0, 0.1, (1, n_ctl, 3))
        traj = rollout(params, g, actions, CONFIG)
        act_full = np.zeros((g.n_vertices, 3))
        act_full[g.kinds == 1] = actions[0]
        dx = forward(params, replace(g, actions=act_full), CONFIG)
        np.testing.assert_array_equal(traj[1], g.positions[-1] + dx)

    def test_zero_decoder_keeps_objects_still_and_moves_controllers(self):
        g = _small_graph(16)
        params = init_params(CONFIG, np.random.default_rng(17))
        params["dec.w2"] = np.zeros_like(params["dec.w2"])
        params["dec.b2"] = np.zeros_like(params["dec.b2"])
        n_ctl = int(np.sum(g.kinds == 1))
        rng = np.random.default_rng(18)
        actions = rng.normal(0, 0.1, (5, n_ctl, 3))
        for fast in (False, True):
            traj = rollout(params, g, actions, CONFIG, fast=fast)
            obj = g.kinds == 0
            assert np.all(traj[:, obj] == traj[0, obj])
            walked = g.positions[-1][~obj] \
                + np.cumsum(actions, axis=0) * g.frame_dt
            np.testing.assert_allclose(traj[1:, ~obj], walked, atol=1e-12)

    def test_fault_carries_step_index(self):
        g = _small_graph(19)
        params = _random_params(CONFIG, np.random.default_rng(20))
        params["prop0.ew_e"] = params["prop0.ew_e"].copy()
        params["prop0.ew_e"][0, 0] = np.nan
        n_ctl = int(np.sum(g.kinds == 1))
        with pytest.raises(SimulationFault) as err:
            rollout(params, g, np.zeros((3, n_ctl, 3)), CONFIG)
        assert err.value.context["step_index"] == 0
        assert err.value.context["round_index"] == 0

    def test_rejects_bad_action_shape(self):
        g = _small_graph(21)
        params = init_params(CONFIG, np.random.default_rng(22))
        with pytest.raises(ValidationError):
            rollout(params, g, np.zeros((3, 5, 3)), CONFIG)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "model.bin"
        params = _random_params(CONFIG, np.random.default_rng(23))
        norm = {"out_scale": 0.02, "d_v": 0.05, "d_e": 0.075, "frame_dt": 0.05}
        save_model(path, params, CONFIG, norm)
        got_params, got_config, got_norm = load_model(path)
        assert got_config == CONFIG
        for k, v in params.items():
            np.testing.assert_array_equal(got_params[k], v.astype(np.float32))
        for k, v in norm.items():
            assert got_norm[k] == pytest.approx(v, rel=1e-6)

    def test_resave_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        params = _random_params(CONFIG, np.random.default_rng(24))
        norm = {"out_scale": 1.0, "d_v": 0.04, "d_e": 0.06, "frame_dt": 0.05}
        save_model(a, params, CONFIG, norm)
        p2, c2, n2 = load_model(a)
        save_model(b, p2, c2, n2)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_wrong_version(self, tmp_path):
        from deformsim.arrayfile import load_arrays, save_arrays

        path = tmp_path / "model.bin"
        params = init_params(CONFIG, np.random.default_rng(25))
        save_model(path, params, CONFIG,
                   {"out_scale": 1.0, "d_v": 0.04, "d_e": 0.06, "frame_dt": 0.05})
        arrays = load_arrays(path)
        arrays["meta/version"] = np.array([9], dtype=np.int64)
        save_arrays(path, arrays)
        with pytest.raises(ValidationError):
            load_model(path)

    def test_loaded_fast_forward_matches_f64_forward(self, tmp_path):
        path = tmp_path / "model.bin"
        g = _small_graph(26)
        params = _random_params(CONFIG, np.random.default_rng(27))
        save_model(path, params, CONFIG,
                   {"out_scale": 1.0, "d_v": g.d_v, "d_e": g.d_e,
                    "frame_dt": g.frame_dt})
        loaded, config, norm = load_model(path)
        fast = forward_fast(loaded, g, config, out_scale=norm["out_scale"])
        slow = forward(params, g, CONFIG)
        np.testing.assert_allclose(fast, slow, rtol=1e-3, atol=1e-5)
