"""Local session service: load a model and scene, step them on demand.

Transport is a plain TCP socket on a local port carrying length-prefixed
JSON objects: an ASCII decimal byte count, a newline, then the body. The
whole stream stays printable, so a session can be debugged with netcat.
Every message is an envelope {type, session, frame, payload}; requests
are `init`, `step`, and `reset`, answered by `init_ok`, `state`, or
`error{code, detail}`.

Sessions are independent: each holds its own weights, property field, and
rolling history buffer (replication-padded at init so the model always
sees a full window). A session accepts one step at a time; a second
request while one is in flight is rejected with a `busy` error rather
than queued, keeping latency bounded. A numeric fault marks the session
until `reset` rebuilds it from the init snapshot.
"""

from __future__ import annotations

import itertools
import json
import socket
import socketserver
import threading

import numpy as np

from .errors import SimulationFault, ValidationError
from .gnn.graph import CONTROLLER, OBJECT, advance_graph, build_graph
from .gnn.model import denormalize_properties, load_model, rollout
from .scenes import load_scene

DEFAULT_PORT = 8741
MAX_MESSAGE = 1 << 24
_PROPERTY_KEYS = ("E", "friction", "density")


def write_message(stream, message):
    """Frame one JSON message: decimal byte length, newline, body."""
    body = json.dumps(message, separators=(",", ":")).encode("utf-8")
    stream.write(str(len(body)).encode("ascii") + b"\n" + body)
    stream.flush()


def read_message(stream):
    """Read one framed message; returns None on clean end of stream."""
    header = stream.readline(32)
    if not header:
        return None
    if not header.endswith(b"\n"):
        raise ValueError(f"framing: unterminated length header {header!r}")
    try:
        length = int(header)
    except ValueError:
        raise ValueError(f"framing: bad length header {header!r}") from None
    if not 0 <= length <= MAX_MESSAGE:
        raise ValueError(f"framing: length {length} out of range")
    body = stream.read(length)
    if len(body) != length:
        raise ValueError("framing: truncated message body")
    return json.loads(body)


class Session:
    """One loaded model + scene with a rolling history buffer."""

    def __init__(self, session_id, params, net, norm, graph):
        self.id = session_id
        self.params = params
        self.net = net
        self.norm = norm
        self.graph0 = graph
        self.graph = graph
        self.frame = 0
        self.faulted = False
        self.lock = threading.Lock()

    @property
    def n_controllers(self):
        return int(np.sum(self.graph.kinds == CONTROLLER))

    def descriptor(self):
        g = self.graph0
        props = denormalize_properties(g.phi[g.kinds == OBJECT])
        return {
            "vertices": g.positions[-1].tolist(),
            "edges": g.edges.tolist(),
            "kinds": g.kinds.tolist(),
            "dt": g.frame_dt,
            "controllers": np.flatnonzero(g.kinds == CONTROLLER).tolist(),
            "properties": {
                "E": float(np.mean(props[:, 0])),
                "mu": float(np.mean(props[:, 1])),
                "rho": float(np.mean(props[:, 2])),
            },
        }


def _scene_properties(scene, n):
    """Per-point (E, mu, rho) table from the scene's material block."""
    missing = [k for k in _PROPERTY_KEYS if k not in scene.material]
    if missing:
        raise ValidationError(
            f"scene material lacks {missing}; need E, friction, density")
    row = [float(scene.material["E"]), float(scene.material["friction"]),
           float(scene.material["density"])]
    return np.tile(row, (n, 1))


def _session_graph(scene, norm, history):
    """Initial graph: frame 0 replicated into a full history window."""
    cloud = scene.cloud(0)
    controls = scene.control_positions[0]
    cloud_hist = np.repeat(cloud[None], history + 1, axis=0)
    ctl_hist = np.repeat(controls[None], history + 1, axis=0)
    props = _scene_properties(scene, len(cloud))
    return build_graph(cloud_hist, ctl_hist, props, float(norm["d_v"]),
                       scene.frame_dt, d_e=float(norm["d_e"]))


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                message = read_message(self.rfile)
            except ValueError as exc:
                try:
                    write_message(self.wfile, _error(
                        None, None, "bad_message", str(exc)))
                except OSError:
                    pass
                return
            if message is None:
                return
            try:
                write_message(self.wfile, self.server.service.dispatch(message))
            except OSError:
                return


def _error(session_id, frame, code, detail):
    return {"type": "error", "session": session_id, "frame": frame,
            "payload": {"code": code, "detail": detail}}


class InteractionService:
    """TCP front end over independent model-stepping sessions."""

    def __init__(self, host="127.0.0.1", port=DEFAULT_PORT,
                 bounds=(-0.3, 0.3)):
        lo, hi = bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValidationError("bounds must be finite with lo < hi")
        self.bounds = (float(lo), float(hi))
        self._sessions = {}
        self._ids = itertools.count(1)
        self._dict_lock = threading.Lock()
        self._server = _Server((host, port), _Handler)
        self._server.service = self
        self._thread = None

    @property
    def address(self):
        return self._server.server_address[:2]

    def start(self):
        """Serve on a background thread; returns once the socket is live."""
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self):
        self._server.serve_forever()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def dispatch(self, message):
        """Answer one request envelope; never raises."""
        if not isinstance(message, dict) or "type" not in message:
            return _error(None, None, "bad_message",
                          "message must be an object with a type field")
        mtype = message["type"]
        session_id = message.get("session")
        payload = message.get("payload") or {}
        if not isinstance(payload, dict):
            return _error(session_id, None, "bad_message",
                          "payload must be an object")
        try:
            if mtype == "init":
                return self._init(payload)
            if mtype == "step":
                return self._step(session_id, payload)
            if mtype == "reset":
                return self._reset(session_id)
        except Exception as exc:  # keep the channel alive no matter what
            return _error(session_id, None, "internal", str(exc))
        return _error(session_id, None, "bad_message",
                      f"unknown message type {mtype!r}")

    def _init(self, payload):
        model_path = payload.get("model")
        scene_path = payload.get("scene")
        if not model_path or not scene_path:
            return _error(None, None, "bad_message",
                          "init requires model and scene paths")
        try:
            params, net, norm = load_model(model_path)
            scene = load_scene(scene_path)
            graph = _session_graph(scene, norm, net.history)
        except Exception as exc:
            return _error(None, None, "load_failed", str(exc))
        with self._dict_lock:
            session_id = f"s{next(self._ids)}"
            session = Session(session_id, params, net, norm, graph)
            self._sessions[session_id] = session
        return {"type": "init_ok", "session": session_id, "frame": 0,
                "payload": session.descriptor()}

    def _lookup(self, session_id):
        with self._dict_lock:
            return self._sessions.get(session_id)

    def _step(self, session_id, payload):
        session = self._lookup(session_id)
        if session is None:
            return _error(session_id, None, "unknown_session",
                          f"unknown session id {session_id!r}")
        if not session.lock.acquire(blocking=False):
            return _error(session_id, session.frame, "busy",
                          "a step is already in flight for this session")
        try:
            if session.faulted:
                return _error(session_id, session.frame, "faulted",
                              "session faulted; reset required")
            try:
                velocities = np.asarray(payload["velocities"],
                                        dtype=np.float64)
            except (KeyError, TypeError, ValueError):
                return _error(session_id, session.frame, "bad_velocities",
                              "velocities must be a (controllers, 3) array")
            want = (session.n_controllers, 3)
            if velocities.shape != want or not np.all(
                    np.isfinite(velocities)):
                return _error(
                    session_id, session.frame, "bad_velocities",
                    f"velocities must be finite with shape {want}")
            lo, hi = self.bounds
            if velocities.min() < lo or velocities.max() > hi:
                return _error(
                    session_id, session.frame, "bounds",
                    f"velocities must lie in [{lo}, {hi}] m/s")
            try:
                traj = rollout(session.params, session.graph,
                               velocities[None], session.net,
                               float(session.norm["out_scale"]), fast=True)
            except SimulationFault as fault:
                session.faulted = True
                return _error(session_id, session.frame, "faulted",
                              f"step faulted: {fault}; reset required")
            session.graph = advance_graph(session.graph, traj[1])
            session.frame += 1
            return {"type": "state", "session": session_id,
                    "frame": session.frame,
                    "payload": {"positions": traj[1].tolist()}}
        finally:
            session.lock.release()

    def _reset(self, session_id):
        session = self._lookup(session_id)
        if session is None:
            return _error(session_id, None, "unknown_session",
                          f"unknown session id {session_id!r}")
        if not session.lock.acquire(blocking=False):
            return _error(session_id, session.frame, "busy",
                          "a step is already in flight for this session")
        try:
            session.graph = session.graph0
            session.frame = 0
            session.faulted = False
            return {"type": "init_ok", "session": session_id, "frame": 0,
                    "payload": session.descriptor()}
        finally:
            session.lock.release()


class ServiceClient:
    """Blocking request/response client for the session protocol."""

    def __init__(self, host, port, timeout=30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")

    def request(self, message):
        write_message(self._wfile, message)
        response = read_message(self._rfile)
        if response is None:
            raise ConnectionError("service closed the connection")
        return response

    def close(self):
        for closer in (self._rfile, self._wfile, self._sock):
            try:
                closer.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
