"""Tree-constrained top-K generation."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flownet import FlowTree
from .policy import PolicyParams, edge_log_probs, sample_nodes


@dataclass
class RankedList:
    entries: list[tuple[str, float]]
    K: int
    settings: dict = field(default_factory=dict)

    @property
    def items(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def __len__(self):
        return len(self.entries)


def generate_topk(tree: FlowTree, context, params: PolicyParams, K: int,
                  temperature: float = 1.0) -> RankedList:
    """Exact top-K items by sequence log-probability via best-first search.

    A path's log-probability can only drop as it is extended, so leaves come
    off the priority queue in order of their final score.  Equal scores are
    ordered by item id.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    lp = edge_log_probs(tree, params, context, temperature)
    heap = [(-0.0, 0)]
    found: list[tuple[str, float]] = []
    kth = None
    while heap:
        neg, s = heap[0]
        # keep popping past K only while scores still tie with the K-th leaf
        if kth is not None and -neg < kth:
            break
        heapq.heappop(heap)
        if tree.is_leaf[s]:
            found.append((tree.item_of_leaf[s], -neg))
            if len(found) == K:
                kth = -neg
            continue
        for c in range(tree.child_start[s], tree.child_end[s]):
            heapq.heappush(heap, (neg - lp[c], int(c)))
    found.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(found[:K], K, {"strategy": "topk", "temperature": temperature})


def sample_list(tree: FlowTree, context, params: PolicyParams, K: int, temperature: float = 1.0,
                seed=None) -> RankedList:
    """K distinct items drawn by repeated constrained sampling.

    Duplicates are skipped; after ``100 * K`` draws the list is topped up
    from the exact top-K.  The sampled set is ranked by its log-probability
    under the temperature-scaled policy.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    lp = edge_log_probs(tree, params, context, temperature)
    K_eff = min(K, len(tree.leaf_of))
    picked: dict[str, None] = {}
    draws = 0
    cap = 100 * K
    while len(picked) < K_eff and draws < cap:
        n = min(K_eff, cap - draws)
        for s in sample_nodes(tree, lp, n, rng):
            draws += 1
            picked.setdefault(tree.item_of_leaf[int(s)])
            if len(picked) == K_eff:
                break
    if len(picked) < K_eff:
        for item, _ in generate_topk(tree, context, params, K_eff + len(picked), temperature).entries:
            if len(picked) == K_eff:
                break
            picked.setdefault(item)
    entries = [(i, float(lp[tree.path(i)].sum())) for i in picked]
    entries.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(entries, K, {"strategy": "sample", "temperature": temperature, "seed": seed})


def write_recommendations(rows, path) -> None:
    """JSONL: one ``{user_id, items, scores, settings}`` object per ranked list."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for user_id, rl in rows:
            fh.write(json.dumps({"user_id": user_id, "items": rl.items, "scores": rl.scores,
                                 "settings": rl.settings}, ensure_ascii=False) + "\n")


def read_recommendations(path) -> list[tuple[str, RankedList]]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                rl = RankedList(list(zip(row["items"], row["scores"])), len(row["items"]), row.get("settings", {}))
                out.append((row["user_id"], rl))
    return out
