"""Target-model endpoint.

The controller validates `k` candidates at a time with the target model. When
its tree is too shallow it either drafts locally (while the worker is
presumed out of date) or waits for the worker's speculations. It is a pure
state machine: the harness injects the clock and performs the model steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .spectree import ROOT, SpecNode, SpecTree, StaleParent, ValidationResult
from .wire import Eos, Speculation, Validation


@dataclass
class ControllerConfig:
    k: int = 2
    R: float = 0.0
    phi: float = 0.5
    t_target: float = 23.4
    t_draft: float = 7.5
    catchup_batch_limit: int = 32
    liveness_backstop: bool = False
    max_nodes: int = 64

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.R < 0:
            raise ValueError("R must be >= 0")
        if self.t_target <= 0 or self.t_draft <= 0:
            raise ValueError("step durations must be positive")
        if self.catchup_batch_limit < 1:
            raise ValueError("catchup_batch_limit must be >= 1")
        if self.liveness_backstop and self.R <= 0:
            raise ValueError("the liveness backstop needs R > 0")


@dataclass(frozen=True)
class StepTarget:
    path: tuple[int, ...]
    nodes: tuple[int, ...]


@dataclass(frozen=True)
class StepDraftLocal:
    leaf: int
    position: int
    batches: tuple[int, ...]
    duration: float


@dataclass(frozen=True)
class Wait:
    until: float | None


@dataclass(frozen=True)
class Finish:
    pass


def locate(tree: SpecTree, committed: list[int], offset: int, path) -> int | None:
    """Resolve a content address (committed offset + token path) to a node.

    Returns None when the address contradicts the committed output, points
    at an already-committed position, or names a node this tree lacks.
    """
    c = len(committed)
    skip = c - offset
    if skip < 0 or skip > len(path):
        return None
    if skip and tuple(committed[offset:c]) != tuple(path[:skip]):
        return None
    try:
        return tree.find(path[skip:])
    except StaleParent:
        return None


def catchup_batches(lag: int, limit: int) -> list[int]:
    """Split `lag` unprocessed tokens into forward-pass batches of <= `limit`."""
    full, rest = divmod(lag, limit)
    return [limit] * full + ([rest] if rest else [])


@dataclass
class Controller:
    config: ControllerConfig
    request_id: int = 0
    max_tokens: int = 100
    eos_id: int = 0
    start_time: float = 0.0
    tree: SpecTree = field(init=False)
    committed: list[int] = field(default_factory=list)
    t_update: float = field(init=False)
    draft_context: list[int] = field(default_factory=list)
    target_steps: int = 0
    local_draft_steps: int = 0
    catchup_extra_passes: int = 0
    sync_stalls: int = 0
    resets: int = 0
    speculations_in: int = 0
    speculations_dropped: int = 0
    t_update_log: list[float] = field(default_factory=list)
    _seq: int = 0
    _in_flight: int | None = None
    _wait_since: float | None = None

    def __post_init__(self):
        self.config.validate()
        self.tree = SpecTree(self.config.max_nodes)
        self.t_update = self.start_time
        self.t_update_log.append(self.start_time)

    @property
    def finished(self) -> bool:
        c = len(self.committed)
        return c >= self.max_tokens or (c > 0 and self.committed[-1] == self.eos_id)

    @property
    def draft_position(self) -> int:
        return len(self.draft_context)

    @property
    def draft_passes(self) -> int:
        return self.local_draft_steps + self.catchup_extra_passes

    def _next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def _extendable(self, node: SpecNode) -> bool:
        return node.token != self.eos_id and len(self.committed) + node.depth < self.max_tokens

    def ingest(self, inbox) -> None:
        for msg in inbox:
            if not isinstance(msg, Speculation) or msg.request_id != self.request_id:
                continue
            self.speculations_in += 1
            parent = locate(self.tree, self.committed, msg.offset, msg.path)
            if parent is None:
                self.speculations_dropped += 1
                continue
            self.tree.append(parent, msg.candidates, "worker")

    def poll(self, now: float, inbox=()):
        self.ingest(inbox)
        if self.finished:
            return Finish()
        k_eff = min(self.config.k, self.max_tokens - 1 - len(self.committed))
        if k_eff <= 0:
            return self._step_target(())
        path = self.tree.best_path(k_eff)
        if path is not None:
            return self._step_target(path)
        cfg = self.config
        if self.t_update + cfg.R > now:
            self._wait_since = None
            return self._step_draft() or self._wait(now)
        if (
            cfg.liveness_backstop
            and self._wait_since is not None
            and now - self._wait_since >= 3 * cfg.R
        ):
            self._wait_since = None
            return self._step_draft() or self._wait(now)
        return self._wait(now)

    def _wait(self, now: float) -> Wait:
        if self._wait_since is None:
            self._wait_since = now
        if self.config.liveness_backstop:
            return Wait(self._wait_since + 3 * self.config.R)
        return Wait(self.t_update + self.config.R)

    def _step_target(self, path) -> StepTarget:
        self._wait_since = None
        self._in_flight = len(path)
        return StepTarget(tuple(t for _, t in path), tuple(n for n, _ in path))

    def catchup_draft(self, leaf: int) -> list[int]:
        """Batches needed to bring the local draft context up to `leaf`."""
        full = self.committed + self.tree.path_tokens(leaf)
        ctx = self.draft_context
        m = 0
        for a, b in zip(ctx, full):
            if a != b:
                break
            m += 1
        return catchup_batches(len(full) - m, self.config.catchup_batch_limit)

    def _step_draft(self) -> StepDraftLocal | None:
        leaves = self.tree.frontier(1, self._extendable)
        if not leaves:
            return None
        leaf = leaves[0]
        batches = self.catchup_draft(leaf)
        passes = max(1, len(batches))
        position = len(self.committed) + self.tree.node_depth(leaf)
        return StepDraftLocal(leaf, position, tuple(batches), passes * self.config.t_draft)

    def apply_local_draft(self, action: StepDraftLocal, prediction) -> int:
        """Record a finished local draft step; returns the appended node id."""
        self.local_draft_steps += 1
        self.catchup_extra_passes += max(0, len(action.batches) - 1)
        self.draft_context = self.committed + self.tree.path_tokens(action.leaf)
        tok, prob = prediction.top[0]
        (nid,) = self.tree.append(action.leaf, [(tok, prob, prediction.entropy)], "controller")
        return nid

    def apply_target_result(self, result: ValidationResult, now: float) -> list:
        k_eff = self._in_flight if self._in_flight is not None else self.config.k
        self._in_flight = None
        base = len(self.committed)
        self.tree.prune(result)
        self.committed.extend(result.tokens)
        self.target_steps += 1
        out = [
            Validation(
                self.request_id,
                self._next_seq(),
                base,
                result.accepted,
                result.bonus_token,
                result.final_entropy,
            )
        ]
        if result.length < k_eff + 1:
            self.sync_stalls += 1
            self._mark(now)
        elif result.final_entropy > self.config.phi:
            self._mark(now)
        if self.finished:
            out.append(Eos(self.request_id, self._next_seq(), len(self.committed)))
        return out

    def _mark(self, now: float) -> None:
        self.t_update = now
        self.resets += 1
        self.t_update_log.append(now)


__all__ = [
    "ROOT",
    "Controller",
    "ControllerConfig",
    "Finish",
    "StepDraftLocal",
    "StepTarget",
    "Wait",
    "catchup_batches",
    "locate",
]
