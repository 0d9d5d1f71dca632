"""Networked deployment of the controller and worker over TCP.

Model steps are sleeps of the configured duration followed by an oracle
lookup. Each process runs one protocol thread that owns its state machine,
a reader thread that decodes frames into an inbox queue, and a delay-line
writer that can hold outgoing frames to emulate WAN latency.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .controller import Controller, ControllerConfig, Finish, StepDraftLocal, StepTarget, Wait
from .oracle import SequenceView, verify
from .sim import RequestMetrics, RunMetrics, expected_output
from .wire import (
    Bye,
    DelayedChannel,
    Eos,
    Hello,
    ProtocolError,
    SequenceChecker,
    WireError,
    encode,
    iter_frames,
)
from .worker import Idle, StepDraft, Worker, WorkerConfig, WorkerFinish

log = logging.getLogger(__name__)

_CLOSED = object()


class HandshakeError(Exception):
    pass


class ConnectionLost(Exception):
    pass


def now_ms() -> float:
    return time.monotonic() * 1000.0


def sleep_ms(duration: float) -> None:
    if duration > 0:
        time.sleep(duration / 1000.0)


@dataclass
class RuntimeConfig:
    role: str
    host: str
    port: int
    ctrl_cfg: ControllerConfig
    worker_cfg: WorkerConfig
    digest: bytes
    emulate_rtt_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0
    connect_timeout: float = 10.0

    def validate(self) -> None:
        if self.role not in ("controller", "worker"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.emulate_rtt_ms < 0 or self.jitter_ms < 0:
            raise ValueError("emulated delays must be non-negative")


class Link:
    """One framed connection: reader thread -> inbox, delay-line writer <- outbox."""

    def __init__(self, sock: socket.socket, one_way_ms: float, jitter_ms: float, seed: int):
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self.writer = DelayedChannel(
            self._sendall, one_way_ms / 1000.0, jitter_ms / 1000.0, seed, threaded=True
        )
        self.error: BaseException | None = None
        self._reader = threading.Thread(target=self._read, daemon=True, name="frame-reader")
        self._reader.start()

    def _sendall(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)

    def _read(self) -> None:
        checker = SequenceChecker()
        try:
            for msg in iter_frames(self.sock.recv):
                checker.check(msg)
                self.inbox.put(msg)
        except (OSError, WireError) as exc:
            self.error = exc
        self.inbox.put(_CLOSED)

    def send(self, msgs) -> None:
        if not msgs:
            return
        # one write per protocol step; the frames stay individually decodable
        self.writer.send(b"".join(encode(m) for m in msgs))

    def get(self, timeout: float | None = None):
        """Next message, or None on timeout. Raises ConnectionLost at EOF."""
        try:
            msg = self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if msg is _CLOSED:
            self.inbox.put(_CLOSED)
            raise ConnectionLost(str(self.error) if self.error else "peer closed the connection")
        return msg

    def drain(self) -> list:
        out = []
        while True:
            try:
                msg = self.inbox.get_nowait()
            except queue.Empty:
                return out
            if msg is _CLOSED:
                self.inbox.put(_CLOSED)
                if out:
                    return out
                raise ConnectionLost(str(self.error) if self.error else "peer closed the connection")
            out.append(msg)

    def close(self) -> None:
        self.writer.close(drain=True)
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._reader.join(timeout=5.0)
        self.sock.close()


@dataclass
class EventLog:
    """Per-request record of every state-machine input, for replay."""

    entries: list = field(default_factory=list)

    def add(self, *entry) -> None:
        self.entries.append(entry)


def _handshake(link: Link, digest: bytes, initiator: bool, timeout: float) -> None:
    if initiator:
        link.send([Hello(digest)])
    msg = link.get(timeout=timeout)
    if not isinstance(msg, Hello):
        raise HandshakeError(f"expected Hello, got {msg!r}")
    if msg.digest != digest:
        link.send([Bye()])
        raise HandshakeError("config digest mismatch; connection refused")
    if not initiator:
        link.send([Hello(digest)])


def run_controller_requests(
    link: Link, cfg: ControllerConfig, views: list[SequenceView], logs: list | None = None
) -> RunMetrics:
    out = []
    for rid, view in enumerate(views):
        start = now_ms()
        ctrl = Controller(cfg, rid, len(view), view.eos_id, start_time=start)
        elog = EventLog()
        inbox: list = []
        while True:
            now = now_ms()
            inbox.extend(link.drain())
            elog.add("poll", now, tuple(inbox))
            action = ctrl.poll(now, inbox)
            inbox = []
            if isinstance(action, Finish):
                break
            if isinstance(action, StepTarget):
                sleep_ms(cfg.t_target)
                result = verify(view, len(ctrl.committed), action.path)
                t = now_ms()
                elog.add("target", t, result)
                link.send(ctrl.apply_target_result(result, t))
            elif isinstance(action, StepDraftLocal):
                sleep_ms(action.duration)
                pred = view.draft_at(action.position)
                elog.add("draft", now_ms(), pred)
                ctrl.apply_local_draft(action, pred)
            elif isinstance(action, Wait):
                timeout = None
                if action.until is not None and action.until > now:
                    timeout = (action.until - now) / 1000.0
                msg = link.get(timeout=timeout)
                if msg is not None:
                    inbox.append(msg)
        finished = now_ms()
        if ctrl.committed != expected_output(view):
            raise AssertionError(f"request {rid}: committed output differs from the target")
        if logs is not None:
            logs.append(elog)
        out.append(
            RequestMetrics(
                finished - start,
                ctrl.local_draft_steps,
                ctrl.draft_passes,
                0,
                ctrl.target_steps,
                ctrl.sync_stalls,
                len(ctrl.committed),
                ctrl.resets,
                list(ctrl.committed),
            )
        )
    link.send([Bye()])
    return RunMetrics(out)


def run_worker_requests(
    link: Link, cfg: WorkerConfig, views: list[SequenceView], logs: list | None = None
) -> list[int]:
    """Serve every request; returns per-request draft step counts."""
    carry: deque = deque()
    steps = []

    def take(block: bool, current: int) -> list:
        if not carry:
            if block:
                msg = link.get()
                if msg is not None:
                    carry.append(msg)
            carry.extend(link.drain())
        batch = []
        # hand over messages up to and including this request's Eos only
        while carry:
            msg = carry[0]
            rid = getattr(msg, "request_id", None)
            if rid is not None and rid > current:
                break
            carry.popleft()
            if isinstance(msg, Bye):
                raise ConnectionLost("controller said Bye mid-request")
            batch.append(msg)
            if isinstance(msg, Eos) and rid == current:
                break
        return batch

    for rid, view in enumerate(views):
        worker = Worker(cfg, rid, len(view), view.eos_id)
        elog = EventLog()
        inbox = take(False, rid)
        while True:
            elog.add("poll", now_ms(), tuple(inbox))
            action = worker.poll(inbox)
            inbox = []
            if isinstance(action, WorkerFinish):
                break
            if isinstance(action, StepDraft):
                sleep_ms(cfg.t_draft)
                arrived = take(False, rid)
                worker.ingest(arrived)
                outputs = [(tg, view.draft_at(tg.position)) for tg in action.targets]
                elog.add("output", now_ms(), tuple(arrived), tuple(outputs))
                link.send(worker.apply_draft_output(outputs))
            elif isinstance(action, Idle):
                inbox = take(True, rid)
        steps.append(worker.draft_steps)
        if logs is not None:
            logs.append(elog)
    while True:
        msg = carry.popleft() if carry else link.get(timeout=30.0)
        if msg is None or isinstance(msg, Bye):
            return steps


@dataclass
class ServeResult:
    metrics: RunMetrics | None
    worker_steps: list[int]
    logs: list


def serve(config: RuntimeConfig, views: list[SequenceView], listener: socket.socket | None = None) -> ServeResult:
    """Run one endpoint to completion over a fresh connection."""
    config.validate()
    one_way = config.emulate_rtt_ms / 2.0
    logs: list = []
    if config.role == "controller":
        srv = listener
        if srv is None:
            srv = socket.create_server((config.host, config.port))
        srv.settimeout(config.connect_timeout)
        try:
            conn, _ = srv.accept()
        finally:
            if listener is None:
                srv.close()
        conn.settimeout(None)
        link = Link(conn, one_way, config.jitter_ms, config.seed)
        try:
            _handshake(link, config.digest, initiator=False, timeout=config.connect_timeout)
            metrics = run_controller_requests(link, config.ctrl_cfg, views, logs)
        finally:
            link.close()
        return ServeResult(metrics, [], logs)
    sock = _connect(config.host, config.port, config.connect_timeout)
    link = Link(sock, one_way, config.jitter_ms, config.seed + 1)
    try:
        _handshake(link, config.digest, initiator=True, timeout=config.connect_timeout)
        steps = run_worker_requests(link, config.worker_cfg, views, logs)
    finally:
        link.close()
    return ServeResult(None, steps, logs)


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return sock
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def run_loopback(
    ctrl_cfg: ControllerConfig,
    worker_cfg: WorkerConfig,
    views: list[SequenceView],
    digest: bytes,
    emulate_rtt_ms: float = 0.0,
    jitter_ms: float = 0.0,
    worker_digest: bytes | None = None,
    seed: int = 0,
) -> tuple[ServeResult, ServeResult]:
    """Controller and worker in one process, talking over a loopback socket."""
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]
    results: dict = {}
    errors: dict = {}

    def run(role, dg):
        cfg = RuntimeConfig(role, "127.0.0.1", port, ctrl_cfg, worker_cfg, dg, emulate_rtt_ms, jitter_ms, seed)
        try:
            results[role] = serve(cfg, views, listener if role == "controller" else None)
        except BaseException as exc:  # re-raised in the caller's thread
            errors[role] = exc

    threads = [
        threading.Thread(target=run, args=("controller", digest), name="controller"),
        threading.Thread(target=run, args=("worker", worker_digest or digest), name="worker"),
    ]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        listener.close()
    if errors:
        raise errors.get("controller") or errors["worker"]
    return results["controller"], results["worker"]


def replay_controller(elog: EventLog, cfg: ControllerConfig, request_id: int, view: SequenceView) -> Controller:
    """Drive a fresh controller through a recorded log, checking each decision."""
    start = elog.entries[0][1]
    ctrl = Controller(cfg, request_id, len(view), view.eos_id, start_time=start)
    action = None
    for entry in elog.entries:
        kind, t = entry[0], entry[1]
        if kind == "poll":
            action = ctrl.poll(t, entry[2])
        elif kind == "target":
            if not isinstance(action, StepTarget):
                raise AssertionError(f"log has a target step where replay chose {action!r}")
            if verify(view, len(ctrl.committed), action.path) != entry[2]:
                raise AssertionError("replayed target step validated a different path")
            ctrl.apply_target_result(entry[2], t)
        elif kind == "draft":
            if not isinstance(action, StepDraftLocal):
                raise AssertionError(f"log has a local draft where replay chose {action!r}")
            ctrl.apply_local_draft(action, entry[2])
    if not isinstance(action, Finish):
        raise AssertionError("replay did not finish")
    return ctrl


def wallclock_baseline(views: list[SequenceView], k: int, t_target: float, t_draft: float) -> RunMetrics:
    """Sequential speculative decoding on one machine, with real sleeps."""
    from .sim import simulate_baseline

    out = []
    for view in views:
        start = now_ms()
        m = simulate_baseline(view, k, t_target, t_draft)
        # one sleep per model step, like a real sequential decoder
        steps = m.target_steps
        per_step = m.total_latency / steps
        for _ in range(steps):
            sleep_ms(per_step)
        m.total_latency = now_ms() - start
        out.append(m)
    return RunMetrics(out)


__all__ = [
    "ConnectionLost",
    "HandshakeError",
    "Link",
    "ProtocolError",
    "RuntimeConfig",
    "ServeResult",
    "replay_controller",
    "run_loopback",
    "serve",
    "wallclock_baseline",
]
