"""Filter decisions over TCP, one JSON object per line.

Request::

    {"protocol_version": 1, "state": [..], "task_policy_id": "goal_seeking",
     "block_index": 0, "active_policy": "shield"}

``actions`` (a list of ``L`` control vectors) may replace ``task_policy_id``.
``active_policy`` names the policy executing while the decision is in flight; it
is only read when the served filter is pipelined (``L > 1``).

Response::

    {"allow": true, "block_index": 0, "latency_ms": 0.41, "policy_label": "task",
     "protocol_version": 1, "rollout_digest": {"reason": "reached_target", "step": 7}}

Errors come back as ``{"error": {"code": .., "message": ..}, "protocol_version": 1}``
on the same connection. Keys are sorted, separators are compact, and floats use
Python's shortest round-trip repr.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from typing import Callable

import numpy as np

from . import filter as flt
from .envs import EnvSpec, MarginSpec, goal_seeking_policy

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_LINE = 1 << 20


class RequestError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code, self.message = code, message


def encode(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode()


def default_task_policies(env: EnvSpec, margins: MarginSpec, pols: flt.GameplayPolicies) -> dict:
    return {
        "goal_seeking": goal_seeking_policy(env, margins),
        "null": lambda x: np.zeros((len(np.atleast_2d(x)), env.ctrl_dim)),
        "shield": flt.shield(pols.ctrl, margins),
    }


class FilterService:
    """Immutable bundle of everything a request handler reads."""

    def __init__(self, env: EnvSpec, margins: MarginSpec, pols: flt.GameplayPolicies, cfg: flt.FilterConfig,
                 task_policies: dict[str, Callable] | None = None):
        self.env, self.margins, self.pols, self.cfg = env, margins, pols, cfg
        self.task_policies = dict(task_policies or default_task_policies(env, margins, pols))

    def parse(self, req) -> tuple:
        if not isinstance(req, dict):
            raise RequestError("bad_request", "request must be a JSON object")
        if req.get("protocol_version") != PROTOCOL_VERSION:
            raise RequestError("unsupported_version", f"protocol_version must be {PROTOCOL_VERSION}")
        state = req.get("state")
        if not isinstance(state, list) or not all(_is_number(v) for v in state):
            raise RequestError("bad_request", "state must be a list of numbers")
        if len(state) != self.env.state_dim:
            raise RequestError("bad_state_dim", f"state has {len(state)} entries, expected {self.env.state_dim}")
        x = np.array(state, dtype=float)
        if not np.all(np.isfinite(x)):
            raise RequestError("non_finite", "state contains non-finite values")
        block = req.get("block_index", 0)
        if not isinstance(block, int) or isinstance(block, bool) or block < 0:
            raise RequestError("bad_request", "block_index must be a non-negative integer")
        if "actions" in req:
            task = self._parse_actions(req["actions"])
        elif "task_policy_id" in req:
            pid = req["task_policy_id"]
            if pid not in self.task_policies:
                raise RequestError("unknown_policy", f"unknown task_policy_id {pid!r}")
            task = self.task_policies[pid]
        else:
            raise RequestError("bad_request", "need task_policy_id or actions")
        active = req.get("active_policy", "shield")
        if active not in ("task", "shield"):
            raise RequestError("bad_request", "active_policy must be 'task' or 'shield'")
        return x, task, block, active == "task"

    def _parse_actions(self, actions):
        L, m = self.cfg.latency, self.env.ctrl_dim
        ok = (isinstance(actions, list) and len(actions) == L
              and all(isinstance(a, list) and len(a) == m and all(_is_number(v) for v in a) for a in actions))
        if not ok:
            raise RequestError("bad_actions", f"actions must be {L} lists of {m} numbers")
        seq = np.array(actions, dtype=float)
        if not np.all(np.isfinite(seq)):
            raise RequestError("non_finite", "actions contain non-finite values")
        return seq

    def decide(self, x, task, prefix_task: bool = False) -> flt.MonitorVerdict:
        prefix_len = self.cfg.latency if self.cfg.is_pipelined else 0
        return flt.monitor(x, task, self.cfg, self.pols, self.env, self.margins, prefix_task, prefix_len)

    def handle(self, req) -> dict:
        t0 = time.perf_counter()
        try:
            x, task, block, prefix_task = self.parse(req)
            v = self.decide(x, task, prefix_task)
        except RequestError as e:
            return {"protocol_version": PROTOCOL_VERSION, "error": {"code": e.code, "message": e.message}}
        except (ValueError, FloatingPointError) as e:
            return {"protocol_version": PROTOCOL_VERSION, "error": {"code": "evaluation_failed", "message": str(e)}}
        return {
            "protocol_version": PROTOCOL_VERSION,
            "allow": v.allow,
            "policy_label": "task" if v.allow else "shield",
            "block_index": block,
            "rollout_digest": {"reason": v.reason.value, "step": v.step},
            "latency_ms": (time.perf_counter() - t0) * 1e3,
        }

    def handle_line(self, line: bytes) -> dict:
        try:
            req = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            return {"protocol_version": PROTOCOL_VERSION, "error": {"code": "bad_json", "message": str(e)}}
        return self.handle(req)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.server.track(self.connection, True)

    def finish(self):
        self.server.track(self.connection, False)
        super().finish()

    def handle(self):
        service = self.server.service
        while True:
            try:
                line = self.rfile.readline(MAX_LINE + 1)
            except OSError:
                return
            if not line:
                return
            if len(line) > MAX_LINE and not line.endswith(b"\n"):
                resp = {"protocol_version": PROTOCOL_VERSION,
                        "error": {"code": "line_too_long", "message": f"limit is {MAX_LINE} bytes"}}
                self._discard_rest()
            elif not line.strip():
                continue
            else:
                resp = service.handle_line(line)
            try:
                self.wfile.write(encode(resp))
                self.wfile.flush()
            except OSError:
                return

    def _discard_rest(self):
        while True:
            chunk = self.rfile.readline(MAX_LINE)
            if not chunk or chunk.endswith(b"\n"):
                return


class FilterServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True  # server_close() joins handler threads

    def __init__(self, address, service: FilterService):
        self.service = service
        self._lock = threading.Lock()
        self._conns: set = set()
        super().__init__(address, _Handler)

    def track(self, conn, add: bool) -> None:
        with self._lock:
            (self._conns.add if add else self._conns.discard)(conn)

    def stop(self) -> None:
        """Stop accepting, then close the read side of open connections.

        A handler busy with a request still writes its response before it sees EOF,
        so in-flight requests drain before ``server_close`` joins the threads.
        """
        self.shutdown()
        self.drain()

    def drain(self) -> None:
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        self.server_close()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must look like HOST:PORT, got {bind!r}")
    return host, int(port)


def serve(service: FilterService, bind: str = "127.0.0.1:0", background: bool = False) -> FilterServer:
    """Start a server. With ``background`` the accept loop runs in a thread and the server is returned."""
    server = FilterServer(parse_bind(bind), service)
    host, port = server.server_address[:2]
    log.info("filter service listening on %s:%d", host, port)
    if background:
        threading.Thread(target=server.serve_forever, name="filtersvc", daemon=True).start()
        return server
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.drain()
    return server


class FilterClient:
    """Blocking line-protocol client; one connection, requests answered in order."""

    def __init__(self, address, timeout: float = 30.0):
        host, port = parse_bind(address) if isinstance(address, str) else address
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def send_raw(self, line: bytes) -> dict:
        self.sock.sendall(line if line.endswith(b"\n") else line + b"\n")
        reply = self.rfile.readline()
        if not reply:
            raise ConnectionError("server closed the connection")
        return json.loads(reply)

    def request(self, state, task_policy_id: str | None = None, actions=None, block_index: int = 0,
                active_policy: str | None = None) -> dict:
        req = {"protocol_version": PROTOCOL_VERSION, "state": [float(v) for v in state], "block_index": block_index}
        if actions is not None:
            req["actions"] = np.asarray(actions, dtype=float).tolist()
        else:
            req["task_policy_id"] = task_policy_id
        if active_policy is not None:
            req["active_policy"] = active_policy
        return self.send_raw(encode(req))

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def monitor_via_service(client: FilterClient, task_policy_id: str) -> Callable:
    """A ``monitor_fn`` for :func:`filter.run_filtered_batch` backed by a remote service.

    The verdicts of the previous call are the active policies of the current block,
    which is what the pipelined bridge prefix needs.
    """
    last: dict = {}

    def monitor_fn(states, block):
        states = np.atleast_2d(states)
        prev = last.get("allow", np.zeros(len(states), bool))
        out = []
        for x, act in zip(states, prev):
            resp = client.request(x, task_policy_id, block_index=block, active_policy="task" if act else "shield")
            if "error" in resp:
                raise RuntimeError(f"service error {resp['error']['code']}: {resp['error']['message']}")
            out.append(resp["allow"])
        last["allow"] = np.array(out, bool)
        return last["allow"]

    return monitor_fn
