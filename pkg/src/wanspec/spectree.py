"""Speculative token tree.

Both endpoints keep their own copy. The root is implicit: it stands for the
last committed token, so every node's path from the root is a candidate
continuation of the committed output. Validations address the tree by token
content, never by node id, which keeps pruning total even when the two copies
have drifted apart in shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

ROOT = -1
DEFAULT_MAX_NODES = 64


class StaleParent(KeyError):
    """The requested parent node no longer exists in this tree."""


@dataclass(slots=True)
class SpecNode:
    node_id: int
    token: int
    prob: float
    entropy: float
    parent: int
    origin: str
    depth: int
    path_prob: float
    path: tuple[int, ...]
    children: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class ValidationResult:
    """Outcome of one target step: accepted candidates plus the target's own token."""

    accepted: tuple[int, ...]
    bonus_token: int
    final_entropy: float

    @property
    def length(self) -> int:
        return len(self.accepted) + 1

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.accepted + (self.bonus_token,)


@dataclass(frozen=True)
class PruneOutcome:
    advanced_by: int
    survivor: int | None


class SpecTree:
    def __init__(self, max_nodes: int = DEFAULT_MAX_NODES, committed_len: int = 0):
        if max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")
        self.max_nodes = max_nodes
        self.committed_len = committed_len
        self.nodes: dict[int, SpecNode] = {}
        self.root_children: dict[int, int] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: int) -> bool:
        return node_id == ROOT or node_id in self.nodes

    @property
    def depth(self) -> int:
        return max((n.depth for n in self.nodes.values()), default=0)

    def children_of(self, parent: int) -> dict[int, int]:
        if parent == ROOT:
            return self.root_children
        try:
            return self.nodes[parent].children
        except KeyError:
            raise StaleParent(parent) from None

    def is_leaf(self, node_id: int) -> bool:
        return not self.children_of(node_id)

    def leaves(self) -> list[SpecNode]:
        return [n for n in self.nodes.values() if not n.children]

    def node_depth(self, node_id: int) -> int:
        return 0 if node_id == ROOT else self.nodes[node_id].depth

    def path_tokens(self, node_id: int) -> list[int]:
        """Tokens from the root (exclusive) down to `node_id` (inclusive)."""
        if node_id == ROOT:
            return []
        return list(self.nodes[node_id].path)

    def find(self, tokens: Iterable[int]) -> int | None:
        """Node reached by following `tokens` from the root, or None."""
        node_id = ROOT
        for tok in tokens:
            nxt = self.children_of(node_id).get(tok)
            if nxt is None:
                return None
            node_id = nxt
        return node_id

    # -- mutation ------------------------------------------------------------

    def append(
        self,
        parent: int,
        candidates: Sequence[tuple[int, float, float]],
        origin: str = "worker",
    ) -> list[int]:
        if not candidates:
            raise ValueError("append needs at least one candidate")
        children = self.children_of(parent)
        if parent == ROOT:
            depth, base_prob, base_path = 1, 1.0, ()
        else:
            pnode = self.nodes[parent]
            depth, base_prob, base_path = pnode.depth + 1, pnode.path_prob, pnode.path
        ids = []
        for tok, prob, ent in candidates:
            existing = children.get(tok)
            if existing is not None:
                ids.append(existing)
                continue
            if not 0.0 < prob <= 1.0:
                raise ValueError(f"candidate probability {prob} outside (0, 1]")
            nid = self._next_id
            self._next_id += 1
            self.nodes[nid] = SpecNode(
                nid, tok, prob, ent, parent, origin, depth, base_prob * prob, base_path + (tok,)
            )
            children[tok] = nid
            ids.append(nid)
        self._evict()
        return ids

    def _evict(self) -> None:
        while len(self.nodes) > self.max_nodes:
            victim = min(self.leaves(), key=lambda n: (n.path_prob, -n.depth, -n.node_id))
            self._remove_leaf(victim)

    def _remove_leaf(self, node: SpecNode) -> None:
        del self.children_of(node.parent)[node.token]
        del self.nodes[node.node_id]

    def clear(self) -> None:
        self.nodes.clear()
        self.root_children = {}

    def prune(self, validation: ValidationResult) -> PruneOutcome:
        """Commit a validation and keep only what still extends the output."""
        node_id = ROOT
        for tok in validation.tokens:
            nxt = self.children_of(node_id).get(tok)
            if nxt is None:
                node_id = None
                break
            node_id = nxt
        self.committed_len += validation.length
        if node_id is None:
            self.clear()
            return PruneOutcome(validation.length, None)
        self._reroot(node_id)
        return PruneOutcome(validation.length, node_id)

    def _reroot(self, new_root: int) -> None:
        anchor = self.nodes[new_root]
        cut = anchor.depth
        kept: dict[int, SpecNode] = {}
        stack = [(cid, 1, 1.0) for cid in anchor.children.values()]
        while stack:
            nid, depth, base = stack.pop()
            node = self.nodes[nid]
            node.depth = depth
            node.path_prob = base * node.prob
            node.path = node.path[cut:]
            kept[nid] = node
            stack.extend((cid, depth + 1, node.path_prob) for cid in node.children.values())
        for cid in anchor.children.values():
            kept[cid].parent = ROOT
        self.root_children = anchor.children
        self.nodes = kept

    # -- queries -------------------------------------------------------------

    @staticmethod
    def _rank(node: SpecNode):
        return (-node.path_prob, node.depth, node.node_id)

    def frontier(
        self, s: int, extendable: Callable[[SpecNode], bool] | None = None
    ) -> list[int]:
        """Up to `s` leaves, most probable path first; [ROOT] on an empty tree."""
        if s < 1:
            raise ValueError("s must be >= 1")
        if not self.nodes:
            return [ROOT]
        leaves = self.leaves()
        if extendable is not None:
            leaves = [n for n in leaves if extendable(n)]
        leaves.sort(key=self._rank)
        return [n.node_id for n in leaves[:s]]

    def best_path(self, k: int) -> list[tuple[int, int]] | None:
        """Highest-probability root path of length `k`, or None if too shallow."""
        if k < 1:
            raise ValueError("k must be >= 1")
        at_k = [n for n in self.nodes.values() if n.depth == k]
        if not at_k:
            return None
        end = min(at_k, key=self._rank)
        path = []
        node_id = end.node_id
        while node_id != ROOT:
            node = self.nodes[node_id]
            path.append((node.node_id, node.token))
            node_id = node.parent
        path.reverse()
        return path

    def dump(self) -> str:
        """Depth-first rendering, children in creation order."""
        lines = []

        def walk(children: dict[int, int]):
            for nid in sorted(children.values()):
                n = self.nodes[nid]
                lines.append(
                    f"{'  ' * (n.depth - 1)}{n.token} p={n.prob:.6g} path={n.path_prob:.6g}"
                )
                walk(n.children)

        lines.append(f"root@{self.committed_len}")
        walk(self.root_children)
        return "\n".join(lines)

    def signature(self) -> list[tuple[int, ...]]:
        """Sorted root-to-node token paths; equal for structurally equal trees."""
        return sorted(tuple(self.path_tokens(nid)) for nid in self.nodes)
