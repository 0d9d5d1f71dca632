"""Draft-model endpoint.

Each draft step extends up to `s` of the most probable leaves in one batch.
A leaf whose draft distribution is uncertain (entropy >= theta) gets its top
two candidates instead of one, so the controller has an alternative ready if
the first guess is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .controller import locate
from .spectree import ROOT, SpecNode, SpecTree, ValidationResult
from .wire import Eos, Speculation, Validation


@dataclass
class WorkerConfig:
    b: int = 2
    theta: float = 0.5
    s: int = 4
    t_draft: float = 7.5
    max_nodes: int = 64

    def validate(self) -> None:
        if self.b not in (1, 2):
            raise ValueError("b must be 1 or 2")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.t_draft <= 0:
            raise ValueError("t_draft must be positive")


@dataclass(frozen=True)
class DraftTarget:
    """One leaf to extend, addressed by content so it survives interleaved prunes."""

    leaf: int
    offset: int
    path: tuple[int, ...]

    @property
    def position(self) -> int:
        return self.offset + len(self.path)


@dataclass(frozen=True)
class StepDraft:
    targets: tuple[DraftTarget, ...]


@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class WorkerFinish:
    pass


@dataclass
class Worker:
    config: WorkerConfig
    request_id: int = 0
    max_tokens: int = 100
    eos_id: int = 0
    tree: SpecTree = field(init=False)
    committed: list[int] = field(default_factory=list)
    finished: bool = False
    draft_steps: int = 0
    speculations_sent: int = 0
    prunes_applied: int = 0
    branches: int = 0
    stale_outputs: int = 0
    _seq: int = 0

    def __post_init__(self):
        self.config.validate()
        self.tree = SpecTree(self.config.max_nodes)

    def _extendable(self, node: SpecNode) -> bool:
        return node.token != self.eos_id and len(self.committed) + node.depth < self.max_tokens

    def ingest(self, inbox) -> None:
        for msg in inbox:
            if getattr(msg, "request_id", None) != self.request_id:
                continue
            if isinstance(msg, Validation):
                if msg.base_offset != len(self.committed):
                    # a stream transport cannot produce this
                    raise ValueError(
                        f"validation at offset {msg.base_offset}, committed {len(self.committed)}"
                    )
                self.tree.prune(ValidationResult(msg.accepted, msg.bonus, msg.final_entropy))
                self.committed.extend(msg.accepted)
                self.committed.append(msg.bonus)
                self.prunes_applied += 1
            elif isinstance(msg, Eos):
                self.finished = True

    def poll(self, inbox=()):
        self.ingest(inbox)
        if self.finished:
            return WorkerFinish()
        if len(self.committed) >= self.max_tokens:
            return Idle()
        leaves = self.tree.frontier(self.config.s, self._extendable)
        if not leaves:
            return Idle()
        offset = len(self.committed)
        return StepDraft(
            tuple(DraftTarget(leaf, offset, tuple(self.tree.path_tokens(leaf))) for leaf in leaves)
        )

    def candidates_for(self, prediction) -> list[tuple[int, float, float]]:
        (t1, p1), (t2, p2) = prediction.top[0], prediction.top[1]
        if self.config.b == 1 or prediction.entropy < self.config.theta:
            return [(t1, p1, prediction.entropy)]
        return [(t1, p1, prediction.entropy), (t2, p2, prediction.entropy)]

    def apply_draft_output(self, outputs) -> list[Speculation]:
        """Append one step's outputs and build the speculations to send.

        `outputs` pairs each DraftTarget of the step with its Prediction.
        Targets that an interleaved prune made unreachable are dropped.
        """
        self.draft_steps += 1
        out = []
        for target, prediction in outputs:
            if target.offset == len(self.committed) and target.leaf in self.tree:
                parent = target.leaf
            else:
                parent = locate(self.tree, self.committed, target.offset, target.path)
            if parent is None:
                self.stale_outputs += 1
                continue
            if parent != ROOT and not self._extendable(self.tree.nodes[parent]):
                continue
            cands = self.candidates_for(prediction)
            if len(cands) > 1:
                self.branches += 1
            path = tuple(self.tree.path_tokens(parent))
            self.tree.append(parent, cands, "worker")
            out.append(
                Speculation(
                    self.request_id, self._seq, len(self.committed), path, tuple(cands)
                )
            )
            self._seq += 1
        self.speculations_sent += len(out)
        return out


__all__ = ["DraftTarget", "Idle", "StepDraft", "Worker", "WorkerConfig", "WorkerFinish"]
