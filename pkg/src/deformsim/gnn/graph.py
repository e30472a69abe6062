"""Vertex graph construction for the learned dynamics model.

Dense point clouds are decimated with farthest point sampling so vertices
keep a minimum separation d_v, controller reference points are appended as
kinematic vertices, and bidirectional edges connect vertices within radius
d_e on the current frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import ValidationError

OBJECT = 0
CONTROLLER = 1


@dataclass(eq=False)
class DynGraph:
    """Vertex graph over a short position history window.

    positions holds the last h+1 frames, oldest first, so positions[-1]
    is the frame the edges were built on. Controller vertices carry the
    commanded velocity for the upcoming step in ``actions``; object
    vertices carry normalized material properties in ``phi``. The rows
    not applicable to a vertex kind are zero.
    """

    positions: np.ndarray  # (h+1, n, 3) float64
    kinds: np.ndarray  # (n,) uint8: 0 object, 1 controller
    phi: np.ndarray  # (n, 3) normalized properties, controller rows zero
    actions: np.ndarray  # (n, 3) commanded velocity, object rows zero
    edges: np.ndarray  # (E, 2) int64 (sender, receiver)
    edge_kinds: np.ndarray  # (E,) uint8: 0 object-object, 1 controller involved
    d_v: float
    d_e: float
    frame_dt: float
    vertex_index: np.ndarray  # (n_object,) source-cloud indices of object vertices

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_kinds = np.asarray(self.edge_kinds, dtype=np.uint8)
        self.vertex_index = np.asarray(self.vertex_index, dtype=np.int64)
        self.validate()

    @property
    def n_vertices(self):
        return self.positions.shape[1]

    @property
    def history(self):
        return self.positions.shape[0] - 1

    def validate(self):
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ValidationError("positions must have shape (h+1, n, 3)")
        if self.positions.shape[0] < 1:
            raise ValidationError("positions must hold at least one frame")
        n = self.positions.shape[1]
        if n == 0:
            raise ValidationError("graph has no vertices")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions must be finite")
        for name, arr, shape in (
            ("kinds", self.kinds, (n,)),
            ("phi", self.phi, (n, 3)),
            ("actions", self.actions, (n, 3)),
        ):
            if arr.shape != shape:
                raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
        if not np.all((self.kinds == OBJECT) | (self.kinds == CONTROLLER)):
            raise ValidationError("vertex kinds must be 0 (object) or 1 (controller)")
        if np.any(self.actions[self.kinds == OBJECT] != 0.0):
            raise ValidationError("object vertices must have zero actions")
        if np.any(self.phi[self.kinds == CONTROLLER] != 0.0):
            raise ValidationError("controller vertices must have zero properties")
        if not (self.d_v > 0.0 and self.d_e > 0.0 and self.frame_dt > 0.0):
            raise ValidationError("d_v, d_e, frame_dt must be positive")
        if self.edge_kinds.shape != (len(self.edges),):
            raise ValidationError("edge_kinds length must match edges")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValidationError("edge endpoints out of range")
            send, recv = self.edges[:, 0], self.edges[:, 1]
            if np.any(send == recv):
                raise ValidationError("self edges are not allowed")
            fwd = np.sort(send * n + recv)
            if np.any(np.diff(fwd) == 0):
                raise ValidationError("duplicate edges")
            if not np.array_equal(fwd, np.sort(recv * n + send)):
                raise ValidationError("edges must be present in both orientations")
            cur = self.positions[-1]
            span = np.linalg.norm(cur[self.edges[:, 0]] - cur[self.edges[:, 1]], axis=1)
            if np.any(span > self.d_e * (1.0 + 1e-9)):
                raise ValidationError("edge longer than d_e on the current frame")
            pair_kind = np.maximum(
                self.kinds[self.edges[:, 0]], self.kinds[self.edges[:, 1]]
            )
            if np.any(pair_kind != self.edge_kinds):
                raise ValidationError("edge kinds inconsistent with vertex kinds")


def fps(points, d_v):
    """Greedy farthest-point selection with minimum separation ``d_v``.

    Starts from index 0 and keeps adding the point farthest from the
    selected set until that distance drops below d_v, so all returned
    points are pairwise at least d_v apart.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError("points must have shape (n, 3)")
    if len(pts) == 0:
        raise ValidationError("cannot sample an empty point set")
    if not d_v > 0.0:
        raise ValidationError("d_v must be positive")
    selected = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    while True:
        far = int(np.argmax(dist))
        if dist[far] < d_v:
            break
        selected.append(far)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[far], axis=1))
    return np.asarray(selected, dtype=np.int64)


def tune_vertex_radius(points, lo=100, hi=150):
    """Bisect d_v so fps() keeps between ``lo`` and ``hi`` vertices.

    Smaller clouds than ``lo`` cannot reach the band; the radius that
    keeps every point is returned instead.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not 0 < lo <= hi:
        raise ValidationError("need 0 < lo <= hi")
    span = pts.max(axis=0) - pts.min(axis=0) if len(pts) else np.zeros(3)
    diameter = float(np.linalg.norm(span))
    if diameter == 0.0:
        return 1.0
    d_lo = 1e-5 * diameter
    if len(pts) <= hi:
        # any d_v up to the smallest nearest-neighbor gap keeps every
        # point, and 1.5x of it still connects adjacent points
        d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        return max(float(np.sqrt(d2.min(axis=1).min())), d_lo)
    d_hi = 2.0 * diameter
    for _ in range(60):
        mid = 0.5 * (d_lo + d_hi)
        count = len(fps(pts, mid))
        if lo <= count <= hi:
            return mid
        if count > hi:
            d_lo = mid  # too many kept, widen the separation
        else:
            d_hi = mid
    raise ValidationError(
        f"could not tune d_v into [{lo}, {hi}] vertices for this cloud"
    )


def radius_edges(points, d_e):
    """All ordered vertex pairs within ``d_e``, sorted by receiver then sender.

    Returns (edges, splits): edges is (E, 2) columns (sender, receiver);
    splits is the (n+1,) prefix so edges[splits[r]:splits[r+1]] are exactly
    the edges received by vertex r, which segment-sum aggregation relies on.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    recv, send = np.nonzero(d2.T <= d_e * d_e)
    edges = np.stack([send, recv], axis=1).astype(np.int64)
    splits = np.searchsorted(recv, np.arange(n + 1)).astype(np.int64)
    return edges, splits


def build_graph(cloud_hist, control_hist, properties, d_v, frame_dt,
                control_velocity=None, d_e=None):
    """Decimate a cloud history into a DynGraph.

    cloud_hist is (h+1, m, 3) dense object points (oldest frame first),
    control_hist is (h+1, k, 3) controller reference points over the same
    frames, properties is (m, 3) raw per-point (E, mu, rho). Farthest
    point sampling runs on the newest frame; the same indices slice every
    history frame and the property rows. control_velocity (k, 3) is the
    commanded velocity for the upcoming step (zero when omitted).
    """
    from .model import normalize_properties

    cloud_hist = np.asarray(cloud_hist, dtype=np.float64)
    control_hist = np.asarray(control_hist, dtype=np.float64)
    properties = np.asarray(properties, dtype=np.float64)
    if cloud_hist.ndim != 3 or cloud_hist.shape[2] != 3:
        raise ValidationError("cloud_hist must have shape (h+1, m, 3)")
    if control_hist.ndim != 3 or control_hist.shape[2] != 3:
        raise ValidationError("control_hist must have shape (h+1, k, 3)")
    if control_hist.shape[0] != cloud_hist.shape[0]:
        raise ValidationError("cloud and controller histories must cover the same frames")
    if properties.shape != (cloud_hist.shape[1], 3):
        raise ValidationError("properties must have shape (m, 3)")
    if cloud_hist.shape[1] == 0:
        raise ValidationError("no object points to build a graph from")
    if d_e is None:
        d_e = 1.5 * d_v

    idx = fps(cloud_hist[-1], d_v)
    n_obj = len(idx)
    n_ctl = control_hist.shape[1]
    if control_velocity is None:
        control_velocity = np.zeros((n_ctl, 3))
    control_velocity = np.asarray(control_velocity, dtype=np.float64).reshape(n_ctl, 3)

    positions = np.concatenate([cloud_hist[:, idx], control_hist], axis=1)
    kinds = np.concatenate(
        [np.full(n_obj, OBJECT, np.uint8), np.full(n_ctl, CONTROLLER, np.uint8)]
    )
    phi = np.zeros((n_obj + n_ctl, 3))
    phi[:n_obj] = normalize_properties(properties[idx])
    actions = np.zeros((n_obj + n_ctl, 3))
    actions[n_obj:] = control_velocity
    edges, _ = radius_edges(positions[-1], d_e)
    edge_kinds = np.maximum(kinds[edges[:, 0]], kinds[edges[:, 1]]) if len(edges) \
        else np.zeros(0, np.uint8)
    return DynGraph(
        positions=positions,
        kinds=kinds,
        phi=phi,
        actions=actions,
        edges=edges,
        edge_kinds=edge_kinds,
        d_v=float(d_v),
        d_e=float(d_e),
        frame_dt=float(frame_dt),
        vertex_index=idx,
    )


def advance_graph(graph, new_positions, control_velocity=None):
    """Shift the history window by one frame and rebuild edges there.

    new_positions is (n, 3) for all vertices. Vertex identity, kinds and
    properties are preserved; actions are replaced by ``control_velocity``
    (k, 3) for the next step, or zeroed when omitted.
    """
    new_positions = np.asarray(new_positions, dtype=np.float64)
    if new_positions.shape != (graph.n_vertices, 3):
        raise ValidationError("new_positions must have shape (n, 3)")
    positions = np.concatenate([graph.positions[1:], new_positions[None]], axis=0)
    actions = np.zeros_like(graph.actions)
    if control_velocity is not None:
        ctl = graph.kinds == CONTROLLER
        actions[ctl] = np.asarray(control_velocity, dtype=np.float64).reshape(-1, 3)
    edges, _ = radius_edges(new_positions, graph.d_e)
    edge_kinds = np.maximum(graph.kinds[edges[:, 0]], graph.kinds[edges[:, 1]]) \
        if len(edges) else np.zeros(0, np.uint8)
    return replace(
        graph,
        positions=positions,
        actions=actions,
        edges=edges,
        edge_kinds=edge_kinds,
    )
