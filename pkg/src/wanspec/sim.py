"""Discrete-event simulation of the controller/worker protocol.

Time is virtual milliseconds. Each model step completes `t_target` or
`t_draft` after it starts, frames arrive `rtt / 2` (+/- jitter) after they are
sent, and events at equal timestamps run in scheduling order. The protocol
decisions come from the same Controller and Worker classes the networked
runtime drives.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import Controller, ControllerConfig, Finish, StepDraftLocal, StepTarget, Wait
from .oracle import OracleConfig, SequenceView, open_oracle, verify
from .worker import StepDraft, Worker, WorkerConfig, WorkerFinish

# event kinds
TARGET_DONE = "TargetStepDone"
CTRL_DRAFT_DONE = "DraftStepDone(controller)"
WORKER_DRAFT_DONE = "DraftStepDone(worker)"
TO_CONTROLLER = "FrameArrival(to_controller)"
TO_WORKER = "FrameArrival(to_worker)"
WAIT_EXPIRY = "WaitExpiry"
WORKER_START = "WorkerStart"

# step durations in ms; swiftspec ships without built-in numbers and must be
# given [timing] t_target / t_draft in the experiment file
PROFILES = {
    "l40s": {"t_target": 23.4, "t_draft": 7.5},
    "swiftspec": {},
}


class SimulationStalled(RuntimeError):
    """Neither endpoint can make progress and no event is pending."""


class OutputMismatch(AssertionError):
    pass


@dataclass
class SimConfig:
    rtt: float = 20.0
    t_target: float = 23.4
    t_draft: float = 7.5
    controller_cfg: ControllerConfig = field(default_factory=ControllerConfig)
    worker_cfg: WorkerConfig = field(default_factory=WorkerConfig)
    oracle_cfg: OracleConfig = field(default_factory=OracleConfig)
    num_requests: int = 10
    mode: str = "wanspec"
    branching: bool = True
    theta_on: bool = True
    phi_on: bool = True
    R: float | None = None
    jitter: float = 0.0
    prompt_relay: bool = False

    def validate(self) -> None:
        if self.mode not in ("wanspec", "baseline_sequential"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.rtt, self.t_target, self.t_draft, self.jitter) < 0:
            raise ValueError("durations must be non-negative")
        if self.t_target <= 0 or self.t_draft <= 0:
            raise ValueError("step durations must be positive")
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")

    def effective_controller(self) -> ControllerConfig:
        return replace(
            self.controller_cfg,
            R=self.rtt if self.R is None else self.R,
            t_target=self.t_target,
            t_draft=self.t_draft,
            phi=self.controller_cfg.phi if self.phi_on else -math.inf,
        )

    def effective_worker(self) -> WorkerConfig:
        return replace(
            self.worker_cfg,
            b=self.worker_cfg.b if self.branching else 1,
            theta=self.worker_cfg.theta if self.theta_on else 0.0,
            t_draft=self.t_draft,
        )


@dataclass
class RequestMetrics:
    total_latency: float
    controller_draft_steps: int
    controller_draft_passes: int
    worker_draft_steps: int
    target_steps: int
    sync_stalls: int
    tokens_committed: int
    resets: int = 0
    committed: list[int] = field(default_factory=list, repr=False)


@dataclass
class RunMetrics:
    requests: list[RequestMetrics]

    def total(self, name: str) -> float:
        return sum(getattr(r, name) for r in self.requests)

    def median(self, name: str) -> float:
        return statistics.median(getattr(r, name) for r in self.requests)

    @property
    def total_latency(self) -> float:
        return self.total("total_latency")

    @property
    def controller_draft_passes(self) -> int:
        return self.total("controller_draft_passes")

    def as_tuples(self) -> list[tuple]:
        return [
            (
                r.total_latency,
                r.controller_draft_steps,
                r.controller_draft_passes,
                r.worker_draft_steps,
                r.target_steps,
                r.sync_stalls,
                r.tokens_committed,
                r.resets,
                tuple(r.committed),
            )
            for r in self.requests
        ]


def expected_output(view: SequenceView) -> list[int]:
    out = []
    for tok in view.target_tokens:
        out.append(tok)
        if tok == view.eos_id:
            break
    return out


def _check(view: SequenceView, committed: list[int]) -> None:
    want = expected_output(view)
    if committed != want:
        first = next((i for i, (a, b) in enumerate(zip(committed, want)) if a != b), None)
        raise OutputMismatch(
            f"committed output diverges from the target sequence at {first} "
            f"(len {len(committed)} vs {len(want)})"
        )


def simulate_baseline(view: SequenceView, k: int, t_target: float, t_draft: float) -> RequestMetrics:
    """Standard speculative decoding on one machine: k drafts, then one target step."""
    L = len(view)
    committed: list[int] = []
    now = 0.0
    passes = steps = stalls = 0
    while not committed or (len(committed) < L and committed[-1] != view.eos_id):
        c = len(committed)
        k_eff = min(k, L - 1 - c)
        path = [view.draft_at(c + i).argmax for i in range(k_eff)]
        now += k_eff * t_draft + t_target
        passes += k_eff
        steps += 1
        result = verify(view, c, path)
        if result.length < k_eff + 1:
            stalls += 1
        committed.extend(result.tokens)
    _check(view, committed)
    return RequestMetrics(now, passes, passes, 0, steps, stalls, len(committed), 0, committed)


@dataclass
class _Side:
    busy: bool = False
    waiting: bool = False
    action: object = None
    wake: int = 0
    inbox: list = field(default_factory=list)


def simulate_request(
    view: SequenceView,
    ctrl_cfg: ControllerConfig,
    worker_cfg: WorkerConfig,
    rtt: float,
    *,
    request_id: int = 0,
    jitter: float = 0.0,
    rng: random.Random | None = None,
    prompt_relay: bool = False,
    log: list | None = None,
) -> tuple[RequestMetrics, Controller, Worker]:
    L = len(view)
    ctrl = Controller(ctrl_cfg, request_id, L, view.eos_id)
    worker = Worker(worker_cfg, request_id, L, view.eos_id)
    heap: list = []
    order = itertools.count()
    half = rtt / 2.0
    last_due = {TO_WORKER: 0.0, TO_CONTROLLER: 0.0}
    if jitter and rng is None:
        rng = random.Random(0)

    def push(t, kind, data=None):
        heapq.heappush(heap, (t, next(order), kind, data))

    def send(now, direction, msgs):
        for m in msgs:
            delay = half
            if jitter:
                delay = max(0.0, delay + rng.uniform(-jitter, jitter))
            due = max(now + delay, last_due[direction])
            last_due[direction] = due
            push(due, direction, m)

    cs, ws = _Side(), _Side()

    def ctrl_poll(now):
        action = ctrl.poll(now, cs.inbox)
        cs.inbox = []
        cs.action = action
        cs.waiting = False
        if isinstance(action, StepTarget):
            cs.busy = True
            push(now + ctrl_cfg.t_target, TARGET_DONE)
        elif isinstance(action, StepDraftLocal):
            cs.busy = True
            push(now + action.duration, CTRL_DRAFT_DONE)
        elif isinstance(action, Wait):
            cs.busy = False
            cs.waiting = True
            cs.wake += 1
            if action.until is not None and action.until > now:
                push(action.until, WAIT_EXPIRY, cs.wake)
        return action

    def worker_poll(now):
        action = ws.action = worker.poll(ws.inbox)
        ws.inbox = []
        if isinstance(action, StepDraft):
            ws.busy = True
            push(now + worker_cfg.t_draft, WORKER_DRAFT_DONE)
        else:
            ws.busy = False

    push(half if prompt_relay else 0.0, WORKER_START)
    now = 0.0
    if isinstance(ctrl_poll(now), Finish):
        raise ValueError("empty request")
    finished_at = None
    while heap:
        t, _, kind, data = heapq.heappop(heap)
        if t < now:
            raise AssertionError("event scheduled in the past")
        now = t
        if log is not None:
            log.append((now, kind, data))
        if kind == TARGET_DONE:
            result = verify(view, len(ctrl.committed), cs.action.path)
            send(now, TO_WORKER, ctrl.apply_target_result(result, now))
            if isinstance(ctrl_poll(now), Finish):
                finished_at = now
                break
        elif kind == CTRL_DRAFT_DONE:
            act = cs.action
            ctrl.apply_local_draft(act, view.draft_at(act.position))
            ctrl_poll(now)
        elif kind == WORKER_DRAFT_DONE:
            worker.ingest(ws.inbox)
            ws.inbox = []
            outputs = [(tg, view.draft_at(tg.position)) for tg in ws.action.targets]
            send(now, TO_CONTROLLER, worker.apply_draft_output(outputs))
            worker_poll(now)
        elif kind == TO_CONTROLLER:
            cs.inbox.append(data)
            if cs.waiting:
                ctrl_poll(now)
        elif kind == TO_WORKER:
            ws.inbox.append(data)
            if not ws.busy and not isinstance(ws.action, WorkerFinish):
                worker_poll(now)
        elif kind == WAIT_EXPIRY:
            if cs.waiting and data == cs.wake:
                ctrl_poll(now)
        elif kind == WORKER_START:
            worker_poll(now)
    if finished_at is None:
        raise SimulationStalled(
            f"request {request_id}: stalled at t={now:.3f} with "
            f"{len(ctrl.committed)}/{L} tokens committed"
        )
    _check(view, ctrl.committed)
    metrics = RequestMetrics(
        finished_at,
        ctrl.local_draft_steps,
        ctrl.draft_passes,
        worker.draft_steps,
        ctrl.target_steps,
        ctrl.sync_stalls,
        len(ctrl.committed),
        ctrl.resets,
        list(ctrl.committed),
    )
    return metrics, ctrl, worker


def sequences_for(oracle_cfg: OracleConfig, n: int) -> list[SequenceView]:
    oracle = open_oracle(oracle_cfg)
    return [SequenceView(oracle.next_sequence(), oracle_cfg.eos_id) for _ in range(n)]


def run_views(config: SimConfig, views: list[SequenceView]) -> RunMetrics:
    config.validate()
    out = []
    if config.mode == "baseline_sequential":
        for view in views:
            out.append(
                simulate_baseline(view, config.controller_cfg.k, config.t_target, config.t_draft)
            )
        return RunMetrics(out)
    ctrl_cfg = config.effective_controller()
    worker_cfg = config.effective_worker()
    rng = random.Random(config.oracle_cfg.seed) if config.jitter else None
    for i, view in enumerate(views):
        m, _, _ = simulate_request(
            view,
            ctrl_cfg,
            worker_cfg,
            config.rtt,
            request_id=i,
            jitter=config.jitter,
            rng=rng,
            prompt_relay=config.prompt_relay,
        )
        out.append(m)
    return RunMetrics(out)


def run_sim(config: SimConfig) -> RunMetrics:
    config.validate()
    return run_views(config, sequences_for(config.oracle_cfg, config.num_requests))


# -- experiment suites -------------------------------------------------------

ABLATION_STAGES = (
    ("none", False, False, False),
    ("branching", True, False, False),
    ("branching+theta", True, True, False),
    ("branching+theta+phi", True, True, True),
)


def _seed_config(base: SimConfig, seed: int) -> SimConfig:
    return replace(base, oracle_cfg=replace(base.oracle_cfg, seed=seed))


@dataclass
class PairedPoint:
    """Per-iteration ratios of one configuration against the baseline."""

    latency_ratios: list[float]
    draft_ratios: list[float]
    latencies: list[float]
    baseline_latencies: list[float]
    draft_passes: list[int]
    baseline_passes: list[int]
    sync_stalls: list[int]

    @property
    def median_latency_ratio(self) -> float:
        return statistics.median(self.latency_ratios)

    @property
    def median_draft_ratio(self) -> float:
        return statistics.median(self.draft_ratios)


def paired_point(config: SimConfig, seeds, views_by_seed, baseline_by_seed) -> PairedPoint:
    p = PairedPoint([], [], [], [], [], [], [])
    for seed in seeds:
        run = run_views(_seed_config(config, seed), views_by_seed[seed])
        base = baseline_by_seed[seed]
        p.latency_ratios.append(run.total_latency / base.total_latency)
        p.draft_ratios.append(run.controller_draft_passes / base.controller_draft_passes)
        p.latencies.append(run.total_latency)
        p.baseline_latencies.append(base.total_latency)
        p.draft_passes.append(run.controller_draft_passes)
        p.baseline_passes.append(base.controller_draft_passes)
        p.sync_stalls.append(int(run.total("sync_stalls")))
    return p


class Workbench:
    """Caches sequences and baseline runs per seed so sweeps pair their draws."""

    def __init__(self, base: SimConfig, iterations: int):
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        base.validate()
        self.base = base
        self.seeds = [base.oracle_cfg.seed + i for i in range(iterations)]
        self.views = {
            s: sequences_for(replace(base.oracle_cfg, seed=s), base.num_requests) for s in self.seeds
        }
        baseline = replace(base, mode="baseline_sequential")
        self.baseline = {s: run_views(_seed_config(baseline, s), self.views[s]) for s in self.seeds}

    def point(self, config: SimConfig) -> PairedPoint:
        return paired_point(config, self.seeds, self.views, self.baseline)

    def target_entropies(self) -> np.ndarray:
        return np.array(
            [r.target_prediction.entropy for s in self.seeds for v in self.views[s] for r in v.records]
        )


def _row(suite: str, stage: str, cfg: SimConfig, point: PairedPoint, seed: int, n: int) -> dict:
    ctrl = cfg.effective_controller()
    wk = cfg.effective_worker()
    return {
        "suite": suite,
        "stage": stage,
        "mode": cfg.mode,
        "branching": int(cfg.branching),
        "theta_on": int(cfg.theta_on),
        "phi_on": int(cfg.phi_on),
        "rtt_ms": cfg.rtt,
        "phi": ctrl.phi,
        "theta": wk.theta,
        "b": wk.b,
        "s": wk.s,
        "k": ctrl.k,
        "seed": seed,
        "iterations": n,
        "median_latency_ratio": point.median_latency_ratio,
        "median_ctrl_draft_ratio": point.median_draft_ratio,
        "median_latency_ms": statistics.median(point.latencies),
        "median_baseline_latency_ms": statistics.median(point.baseline_latencies),
        "median_ctrl_draft_passes": statistics.median(point.draft_passes),
        "median_baseline_draft_passes": statistics.median(point.baseline_passes),
        "sync_stalls": statistics.median(point.sync_stalls),
    }


def run_ablation(base: SimConfig, rtt_grid, iterations: int = 20, bench: Workbench | None = None) -> list[dict]:
    """Four cumulative stages per RTT, each as median paired ratios vs baseline."""
    bench = bench or Workbench(base, iterations)
    rows = []
    for rtt in rtt_grid:
        for stage, branching, theta_on, phi_on in ABLATION_STAGES:
            cfg = replace(
                base, rtt=float(rtt), branching=branching, theta_on=theta_on, phi_on=phi_on
            )
            rows.append(_row("ablation", stage, cfg, bench.point(cfg), base.oracle_cfg.seed, iterations))
    return rows


def phi_grid(entropies: np.ndarray, points: int) -> list[float]:
    """`points` quantiles spanning the smallest to the largest observed entropy."""
    if points < 2:
        raise ValueError("phi_points must be >= 2")
    qs = np.linspace(0.0, 1.0, points)
    return [float(x) for x in np.quantile(entropies, qs)]


def run_phi_sweep(
    base: SimConfig, rtt_grid, phi_points: int = 100, iterations: int = 20, bench: Workbench | None = None
) -> list[dict]:
    bench = bench or Workbench(base, iterations)
    grid = phi_grid(bench.target_entropies(), phi_points)
    rows = []
    for rtt in rtt_grid:
        for phi in grid:
            cfg = replace(
                base,
                rtt=float(rtt),
                phi_on=True,
                controller_cfg=replace(base.controller_cfg, phi=phi),
            )
            rows.append(_row("phi_sweep", "phi", cfg, bench.point(cfg), base.oracle_cfg.seed, iterations))
    return rows


def pareto_fraction(points) -> float:
    """Share of (latency, tokens) points not strictly dominated by another."""
    pts = list(points)
    keep = 0
    for i, (a, b) in enumerate(pts):
        dominated = any(
            (c <= a and d <= b and (c < a or d < b)) for j, (c, d) in enumerate(pts) if j != i
        )
        keep += not dominated
    return keep / len(pts)
