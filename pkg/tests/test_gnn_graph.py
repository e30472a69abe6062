"""Graph construction: FPS, radius edges, history advance."""

import numpy as np
import pytest

from deformsim.errors import ValidationError
from deformsim.gnn import (
    DynGraph,
    advance_graph,
    build_graph,
    fps,
    radius_edges,
    tune_vertex_radius,
)


def _fps_oracle(points, d_v):
    """Brute-force greedy farthest-point reference."""
    points = np.asarray(points, dtype=np.float64)
    selected = [0]
    while True:
        best, best_d = None, -1.0
        for i in range(len(points)):
            d = min(np.linalg.norm(points[i] - points[j]) for j in selected)
            if d > best_d:
                best, best_d = i, d
        if best_d < d_v:
            return np.asarray(selected)
        selected.append(best)


class TestFps:
    def test_collinear_keeps_endpoints(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        assert fps(pts, 1.5).tolist() == [0, 2]

    def test_radius_beyond_diameter_keeps_seed_only(self):
        pts = np.random.default_rng(0).uniform(0, 1, (20, 3))
        assert fps(pts, 10.0).tolist() == [0]

    def test_tiny_radius_keeps_all(self):
        pts = np.random.default_rng(1).uniform(0, 1, (15, 3))
        assert sorted(fps(pts, 1e-12).tolist()) == list(range(15))

    def test_matches_bruteforce_greedy(self):
        rng = np.random.default_rng(2)
        for trial in range(5):
            pts = rng.uniform(0, 1, (40, 3))
            d_v = rng.uniform(0.1, 0.5)
            assert fps(pts, d_v).tolist() == _fps_oracle(pts, d_v).tolist()

    def test_min_separation_property(self):
        pts = np.random.default_rng(3).uniform(0, 1, (200, 3))
        idx = fps(pts, 0.2)
        sel = pts[idx]
        d = np.linalg.norm(sel[:, None] - sel[None], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 0.2

    def test_rejects_empty_and_bad_radius(self):
        with pytest.raises(ValidationError):
            fps(np.zeros((0, 3)), 0.1)
        with pytest.raises(ValidationError):
            fps(np.zeros((4, 3)), 0.0)


class TestTuneVertexRadius:
    def test_lands_in_band_on_dense_cloud(self):
        pts = np.random.default_rng(4).uniform(0, 0.3, (512, 3))
        d_v = tune_vertex_radius(pts, 100, 150)
        assert 100 <= len(fps(pts, d_v)) <= 150

    def test_small_cloud_keeps_everything(self):
        pts = np.random.default_rng(5).uniform(0, 1, (30, 3))
        d_v = tune_vertex_radius(pts, 100, 150)
        assert len(fps(pts, d_v)) == 30


class TestRadiusEdges:
    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(0, 1, (50, 3))
        d_e = 0.35
        edges, splits = radius_edges(pts, d_e)
        want = set()
        for s in range(len(pts)):
            for r in range(len(pts)):
                if s != r and np.linalg.norm(pts[s] - pts[r]) <= d_e:
                    want.add((s, r))
        assert {(int(s), int(r)) for s, r in edges} == want

    def test_receiver_sorted_with_splits(self):
        pts = np.random.default_rng(7).uniform(0, 1, (30, 3))
        edges, splits = radius_edges(pts, 0.4)
        recv = edges[:, 1]
        assert np.all(np.diff(recv) >= 0)
        for r in range(len(pts)):
            seg = edges[splits[r]:splits[r + 1]]
            assert np.all(seg[:, 1] == r)
        assert splits[-1] == len(edges)


def _history(rng, n, frames=4, lo=0.0, hi=0.3):
    base = rng.uniform(lo, hi, (n, 3))
    drift = rng.normal(0, 0.002, (frames, n, 3))
    return base[None] + np.cumsum(drift, axis=0)


def _props(rng, n):
    return np.stack(
        [
            10.0 ** rng.uniform(3.5, 6.0, n),
            rng.uniform(0.1, 1.0, n),
            10.0 ** rng.uniform(2.0, 3.2, n),
        ],
        axis=1,
    )


class TestBuildGraph:
    def test_distant_points_have_no_edges(self):
        cloud = np.array([[0.0, 0, 0], [1.0, 0, 0]])[None].repeat(4, axis=0)
        g = build_graph(cloud, np.zeros((4, 0, 3)), _props(np.random.default_rng(0), 2),
                        d_v=0.01, frame_dt=0.05, d_e=0.5)
        assert len(g.edges) == 0

    def test_controller_in_range_gives_two_directed_edges(self):
        cloud = np.zeros((4, 1, 3))
        ctl = np.full((4, 1, 3), 0.05)
        g = build_graph(cloud, ctl, _props(np.random.default_rng(1), 1),
                        d_v=0.01, frame_dt=0.05, d_e=0.2,
                        control_velocity=np.array([[0.1, 0, 0]]))
        assert len(g.edges) == 2
        assert {(int(s), int(r)) for s, r in g.edges} == {(0, 1), (1, 0)}
        assert np.all(g.edge_kinds == 1)

    def test_gathers_history_and_properties_at_fps_indices(self):
        rng = np.random.default_rng(8)
        cloud = _history(rng, 60)
        props = _props(rng, 60)
        ctl = _history(rng, 2, lo=0.1, hi=0.2)
        g = build_graph(cloud, ctl, props, d_v=0.06, frame_dt=0.05)
        idx = fps(cloud[-1], 0.06)
        n_obj = len(idx)
        assert np.array_equal(g.vertex_index, idx)
        assert np.array_equal(g.positions[:, :n_obj], cloud[:, idx])
        assert np.array_equal(g.positions[:, n_obj:], ctl)
        assert np.all(g.kinds[:n_obj] == 0) and np.all(g.kinds[n_obj:] == 1)
        assert np.all(g.phi[n_obj:] == 0)
        assert np.all(np.abs(g.phi[:n_obj]) <= 1.0)
        assert g.d_e == pytest.approx(1.5 * 0.06)

    def test_edge_lengths_bounded_and_bidirectional(self):
        rng = np.random.default_rng(9)
        g = build_graph(_history(rng, 80), _history(rng, 2, lo=0.1, hi=0.2),
                        _props(rng, 80), d_v=0.05, frame_dt=0.05)
        cur = g.positions[-1]
        span = np.linalg.norm(cur[g.edges[:, 0]] - cur[g.edges[:, 1]], axis=1)
        assert np.all(span <= g.d_e + 1e-12)
        pairs = {(int(s), int(r)) for s, r in g.edges}
        assert all((r, s) in pairs for s, r in pairs)

    def test_rejects_empty_cloud(self):
        with pytest.raises(ValidationError):
            build_graph(np.zeros((4, 0, 3)), np.zeros((4, 1, 3)),
                        np.zeros((0, 3)), d_v=0.01, frame_dt=0.05)


class TestAdvanceGraph:
    def test_shifts_history_and_rebuilds_edges(self):
        rng = np.random.default_rng(10)
        g = build_graph(_history(rng, 40), _history(rng, 1, lo=0.1, hi=0.2),
                        _props(rng, 40), d_v=0.05, frame_dt=0.05)
        new = g.positions[-1] + rng.normal(0, 0.01, (g.n_vertices, 3))
        vel = np.array([[0.2, 0.0, 0.0]])
        g2 = advance_graph(g, new, vel)
        assert np.array_equal(g2.positions[:-1], g.positions[1:])
        assert np.array_equal(g2.positions[-1], new)
        assert np.array_equal(g2.actions[g2.kinds == 1], vel)
        want, _ = radius_edges(new, g.d_e)
        assert np.array_equal(g2.edges, want)

    def test_zero_velocity_when_omitted(self):
        rng = np.random.default_rng(11)
        g = build_graph(_history(rng, 20), _history(rng, 1, lo=0.1, hi=0.2),
                        _props(rng, 20), d_v=0.05, frame_dt=0.05)
        g2 = advance_graph(g, g.positions[-1])
        assert np.all(g2.actions == 0)


class TestValidate:
    def _graph(self):
        rng = np.random.default_rng(12)
        return build_graph(_history(rng, 30), _history(rng, 1, lo=0.1, hi=0.2),
                           _props(rng, 30), d_v=0.05, frame_dt=0.05)

    def test_rejects_object_vertex_with_action(self):
        g = self._graph()
        actions = g.actions.copy()
        actions[0] = [1.0, 0, 0]
        with pytest.raises(ValidationError):
            DynGraph(g.positions, g.kinds, g.phi, actions, g.edges,
                     g.edge_kinds, g.d_v, g.d_e, g.frame_dt, g.vertex_index)

    def test_rejects_one_directional_edge(self):
        g = self._graph()
        with pytest.raises(ValidationError):
            DynGraph(g.positions, g.kinds, g.phi, g.actions, g.edges[:-1],
                     g.edge_kinds[:-1], g.d_v, g.d_e, g.frame_dt, g.vertex_index)

    def test_rejects_edge_longer_than_radius(self):
        g = self._graph()
        with pytest.raises(ValidationError):
            DynGraph(g.positions, g.kinds, g.phi, g.actions, g.edges,
                     g.edge_kinds, g.d_v, g.d_e * 0.2, g.frame_dt, g.vertex_index)
