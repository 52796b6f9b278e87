"""Prefix-tree flow network over tokenized titles.

Every title gets an END marker appended, so items are exactly the leaves.  A
leaf's flow is the item's outcome reward and an inner node's flow is the sum
of its children's flows; the ratio child/parent is the process reward of the
edge.  Nodes are numbered breadth-first, which makes the children of every
node a contiguous index range; all per-edge quantities are therefore stored
as arrays indexed by the child node (node 0 is the root and has no edge).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .catalog import Catalog


class _EndMarker:
    __slots__ = ()

    def __repr__(self):
        return "<END>"

    def __reduce__(self):
        return "END"


END = _EndMarker()


def _token_key(tok):
    # END sorts after every real token
    return (tok is END, "" if tok is END else tok)


class DegenerateFlowError(ValueError):
    pass


class InvalidActionError(KeyError):
    pass


class SingularityError(ZeroDivisionError):
    pass


class RewardVariant(str, enum.Enum):
    PLAIN = "plain"
    DIV = "div"
    MUL = "mul"


@dataclass(eq=False)
class FlowNode:
    index: int
    token: object
    flow: float
    parent: int
    children: dict = field(default_factory=dict)
    item_id: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


class FlowTree:
    """Immutable prefix tree with exact state flows.

    Array attributes (length ``n_nodes``): ``parent``, ``flow``, ``depth``,
    ``child_start``/``child_end`` (children of node ``s`` are
    ``range(child_start[s], child_end[s])``) and ``log_rp`` (log process
    reward of the edge entering each node, 0 at the root).
    """

    def __init__(self, nodes: list[FlowNode], catalog_ref=None):
        self.nodes = nodes
        self.catalog_ref = catalog_ref
        n = len(nodes)
        self.parent = np.array([nd.parent for nd in nodes], dtype=np.int64)
        self.flow = np.array([nd.flow for nd in nodes], dtype=float)
        self.child_start = np.zeros(n, dtype=np.int64)
        self.child_end = np.zeros(n, dtype=np.int64)
        self.depth = np.zeros(n, dtype=np.int64)
        for nd in nodes:
            kids = [c.index for c in nd.children.values()]
            if kids:
                self.child_start[nd.index] = kids[0]
                self.child_end[nd.index] = kids[-1] + 1
            else:
                self.child_start[nd.index] = self.child_end[nd.index] = nd.index
            if nd.parent >= 0:
                self.depth[nd.index] = self.depth[nd.parent] + 1
        self.n_children = self.child_end - self.child_start
        self.is_leaf = self.n_children == 0
        self.internal = np.flatnonzero(~self.is_leaf)

        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.zeros(n)
            lr[1:] = np.log(self.flow[1:]) - np.log(self.flow[self.parent[1:]])
        self.log_rp = lr

        self.leaf_of: dict[str, int] = {}
        self.item_of_leaf: dict[int, str] = {}
        for nd in nodes:
            if nd.item_id is not None:
                self.leaf_of[nd.item_id] = nd.index
                self.item_of_leaf[nd.index] = nd.item_id
        self._item_ids = sorted(self.leaf_of)
        self._paths: dict[str, np.ndarray] = {}

    # ------------------------------------------------------------------
    @property
    def root(self) -> FlowNode:
        return self.nodes[0]

    @property
    def Z(self) -> float:
        return float(self.flow[0])

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def item_ids(self) -> list[str]:
        return self._item_ids

    def __contains__(self, item_id) -> bool:
        return item_id in self.leaf_of

    def path(self, item_id: str) -> np.ndarray:
        """Node indices from the first token down to the END leaf (root excluded)."""
        p = self._paths.get(item_id)
        if p is None:
            if item_id not in self.leaf_of:
                raise KeyError(f"unknown item {item_id!r}")
            out = []
            s = self.leaf_of[item_id]
            while s > 0:
                out.append(s)
                s = int(self.parent[s])
            p = np.array(out[::-1], dtype=np.int64)
            self._paths[item_id] = p
        return p

    def children(self, s: int) -> range:
        return range(int(self.child_start[s]), int(self.child_end[s]))

    def prefix(self, s: int) -> tuple:
        toks = []
        while s > 0:
            toks.append(self.nodes[s].token)
            s = int(self.parent[s])
        return tuple(toks[::-1])

    def item_reward(self, item_id: str) -> float:
        return float(self.flow[self.leaf_of[item_id]])

    def rows(self):
        """``(path tokens, flow)`` for every node, sorted by path."""
        rows = []
        for nd in self.nodes:
            toks = ["<END>" if t is END else t for t in self.prefix(nd.index)]
            rows.append((toks, float(nd.flow)))
        rows.sort(key=lambda r: [(t == "<END>", t) for t in r[0]])
        return rows

    def dump(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for toks, f in self.rows():
                fh.write(json.dumps({"path": toks, "flow": f}, ensure_ascii=False) + "\n")


def frequency_rewards(catalog: Catalog, floor: float = 0.0) -> dict[str, float]:
    """Item frequencies as outcome rewards; zero-frequency items get ``floor``."""
    return {i: float(it.frequency) if it.frequency > 0 else float(floor)
            for i, it in catalog.items.items()}


def build_prefix_tree(catalog: Catalog, outcome_rewards: Mapping[str, float] | None = None) -> FlowTree:
    """Insert every positive-reward title (plus END) and compute flows bottom-up.

    Items whose reward is 0 are left out of the tree, since they would create
    zero-flow subtrees on which the process reward is undefined.
    """
    if outcome_rewards is None:
        outcome_rewards = frequency_rewards(catalog)
    missing = [i for i in catalog.items if i not in outcome_rewards]
    if missing:
        raise KeyError(f"no reward for items {missing[:5]}")
    if any(r < 0 or not math.isfinite(r) for r in outcome_rewards.values()):
        raise ValueError("rewards must be finite and non-negative")

    # nested dict trie first, then renumber breadth-first
    trie: dict = {}
    n_items = 0
    for item_id in sorted(catalog.items):
        r = float(outcome_rewards[item_id])
        if r <= 0:
            continue
        node = trie
        for tok in catalog.items[item_id].tokens:
            node = node.setdefault(tok, {})
        if END in node:
            raise ValueError(f"items {node[END][0]!r} and {item_id!r} share a title")
        node[END] = (item_id, r)
        n_items += 1
    if n_items == 0:
        raise DegenerateFlowError("all outcome rewards are zero")

    nodes = [FlowNode(0, None, 0.0, -1)]
    queue = [(0, trie)]
    head = 0
    while head < len(queue):
        idx, sub = queue[head]
        head += 1
        for tok in sorted(sub, key=_token_key):
            child = FlowNode(len(nodes), tok, 0.0, idx)
            nodes.append(child)
            nodes[idx].children[tok] = child
            if tok is END:
                child.item_id, child.flow = sub[tok]
            else:
                queue.append((child.index, sub[tok]))
    # children always carry larger indices than parents
    for nd in reversed(nodes):
        if nd.children:
            nd.flow = math.fsum(c.flow for c in nd.children.values())
    return FlowTree(nodes, catalog_ref=id(catalog))


def process_reward(tree: FlowTree, state: int | FlowNode, action) -> float:
    """F(child) / F(state) for the child reached by token ``action``."""
    s = state.index if isinstance(state, FlowNode) else int(state)
    node = tree.nodes[s]
    if action not in node.children:
        raise InvalidActionError(f"token {action!r} is not a child of node {s}")
    if node.flow <= 0:
        raise SingularityError(f"node {s} has zero flow")
    return node.children[action].flow / node.flow


def path_log_reward(tree: FlowTree, item_id: str) -> float:
    """Sum of log process rewards along the item's path; equals log(R(y) / Z)."""
    if item_id not in tree:
        raise KeyError(f"unknown item {item_id!r}")
    if tree.item_reward(item_id) <= 0:
        raise SingularityError(f"item {item_id!r} has zero reward")
    return float(tree.log_rp[tree.path(item_id)].sum())


def personalized_log_reward(variant: RewardVariant | str, log_rp, p_ui: float | None = None):
    """Per-edge log-reward term, optionally reshaped by a preference score.

    ``plain`` keeps ``log_rp``; ``div`` divides it by ``p_ui``; ``mul`` adds
    ``log p_ui``.  Works elementwise on arrays.
    """
    variant = RewardVariant(variant)
    if variant is RewardVariant.PLAIN:
        return log_rp
    if p_ui is None or not p_ui > 0 or p_ui > 1:
        raise ValueError(f"preference score must be in (0, 1], got {p_ui!r}")
    if variant is RewardVariant.DIV:
        return log_rp / p_ui
    return log_rp + math.log(p_ui)
