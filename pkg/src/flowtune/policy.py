"""Log-linear autoregressive policy over prefix-tree edges.

The logit of an edge ``e`` (identified by the node it leads into) is
``b[e]`` in tabular mode and ``b[e] + U[e] @ c`` in contextual mode, where
``c`` is the mean embedding of the user's history.  A softmax over the
children of each node gives the next-token distribution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flownet import END, FlowNode, FlowTree

logger = logging.getLogger(__name__)

TABULAR = "tabular"
CONTEXTUAL = "contextual"
CHECKPOINT_VERSION = 1


class InvalidStateError(ValueError):
    pass


@dataclass
class PolicyParams:
    mode: str
    bias: np.ndarray
    weight: np.ndarray | None = None
    embedding: np.ndarray | None = None
    item_index: dict[str, int] | None = None

    @property
    def dim(self) -> int:
        return 0 if self.weight is None else self.weight.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.mode,
            self.bias.copy(),
            None if self.weight is None else self.weight.copy(),
            None if self.embedding is None else self.embedding.copy(),
            self.item_index,
        )

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(
            self.mode,
            np.zeros_like(self.bias),
            None if self.weight is None else np.zeros_like(self.weight),
            None if self.embedding is None else np.zeros_like(self.embedding),
            self.item_index,
        )

    def arrays(self) -> list[np.ndarray]:
        return [a for a in (self.bias, self.weight, self.embedding) if a is not None]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for a in self.arrays():
            a.ravel()[:] = vec[pos:pos + a.size]
            pos += a.size

    def axpy(self, alpha: float, other: "PolicyParams") -> None:
        """In-place ``self += alpha * other``."""
        for a, b in zip(self.arrays(), other.arrays()):
            a += alpha * b


def init_params(tree: FlowTree, mode: str = TABULAR, dim: int = 8,
                item_ids: Sequence[str] | None = None, seed: int = 0) -> PolicyParams:
    """Zero biases (uniform policy); weights and embeddings uniform in [-0.01, 0.01]."""
    bias = np.zeros(tree.n_nodes)
    if mode == TABULAR:
        return PolicyParams(TABULAR, bias)
    if mode != CONTEXTUAL:
        raise ValueError(f"unknown policy mode {mode!r}")
    if dim < 1:
        raise ValueError("contextual policies need dim >= 1")
    item_ids = sorted(item_ids if item_ids is not None else tree.item_ids)
    rng = np.random.default_rng(seed)
    weight = rng.uniform(-0.01, 0.01, size=(tree.n_nodes, dim))
    weight[0] = 0.0
    emb = rng.uniform(-0.01, 0.01, size=(len(item_ids), dim))
    return PolicyParams(CONTEXTUAL, bias, weight, emb, {i: k for k, i in enumerate(item_ids)})


def flow_optimal_params(tree: FlowTree) -> PolicyParams:
    """Tabular policy whose edge probabilities are exactly the flow ratios."""
    return PolicyParams(TABULAR, tree.log_rp.copy())


# ---------------------------------------------------------------------------
# contexts and distributions
# ---------------------------------------------------------------------------


def history_counts(history: Sequence[str], params: PolicyParams) -> tuple[np.ndarray, np.ndarray]:
    """Embedding rows used by a history and the weight of each row in the mean."""
    if params.mode != CONTEXTUAL or not history:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    rows = []
    for i in history:
        k = params.item_index.get(i)
        if k is None:
            logger.warning("history item %r has no embedding; skipped", i)
        else:
            rows.append(k)
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    uniq, cnt = np.unique(rows, return_counts=True)
    return uniq, cnt / len(rows)


def encode_context(history: Sequence[str], params: PolicyParams) -> np.ndarray:
    """Mean embedding of the known history items (zero vector when there are none)."""
    if params.mode != CONTEXTUAL:
        return np.zeros(0)
    rows, w = history_counts(history, params)
    if rows.size == 0:
        return np.zeros(params.dim)
    return w @ params.embedding[rows]


def edge_logits(tree: FlowTree, params: PolicyParams, context: np.ndarray | None = None) -> np.ndarray:
    if params.mode == CONTEXTUAL and context is not None and context.size:
        return params.bias + params.weight @ context
    return params.bias


def _segments(tree: FlowTree):
    seg = getattr(tree, "_seg_cache", None)
    if seg is None:
        # children of consecutive internal nodes tile [1, n_nodes)
        offsets = tree.child_start[tree.internal] - 1
        seg_of_edge = np.searchsorted(tree.internal, tree.parent[1:])
        seg = (offsets, seg_of_edge)
        tree._seg_cache = seg
    return seg


def edge_log_probs(tree: FlowTree, params: PolicyParams, context=None, temperature: float = 1.0) -> np.ndarray:
    """log pi of the edge into every node (entry 0, the root, is 0)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = edge_logits(tree, params, context)
    out = np.zeros(tree.n_nodes)
    if tree.n_nodes == 1:
        return out
    l = logits[1:] if temperature == 1.0 else logits[1:] / temperature
    offsets, seg = _segments(tree)
    m = np.maximum.reduceat(l, offsets)
    z = l - m[seg]
    lse = np.log(np.add.reduceat(np.exp(z), offsets))
    out[1:] = z - lse[seg]
    return out


def next_token_dist(node: FlowNode, context, params: PolicyParams, temperature: float = 1.0) -> np.ndarray:
    """Softmax over ``node``'s children, in child order."""
    if not node.children:
        raise InvalidStateError(f"node {node.index} is a leaf")
    idx = np.array([c.index for c in node.children.values()])
    l = params.bias[idx].copy()
    if params.mode == CONTEXTUAL and context is not None and np.size(context):
        l = l + params.weight[idx] @ context
    l = l / temperature
    l -= l.max()
    p = np.exp(l)
    return p / p.sum()


def seq_log_prob(item_id: str, context, params: PolicyParams, tree: FlowTree,
                 temperature: float = 1.0) -> float:
    """Log-probability of generating the item's full title, END included."""
    if item_id not in tree:
        raise KeyError(f"unknown item {item_id!r}")
    lp = edge_log_probs(tree, params, context, temperature)
    return float(lp[tree.path(item_id)].sum())


def item_log_probs(tree: FlowTree, params: PolicyParams, context=None, temperature: float = 1.0) -> dict[str, float]:
    """Log-probability of every item in the tree under one context."""
    lp = edge_log_probs(tree, params, context, temperature)
    return {item: float(v) for item, v in zip(tree.item_ids, leaf_log_probs(tree, lp))}


def leaf_log_probs(tree: FlowTree, log_probs: np.ndarray) -> np.ndarray:
    """Path sums of edge log-probs for every leaf, ordered as ``tree.item_ids``."""
    cum = log_probs.copy()
    # breadth-first numbering: each depth level is one contiguous block
    bounds = np.flatnonzero(np.diff(tree.depth)) + 1
    for lo, hi in zip(bounds, np.append(bounds[1:], tree.n_nodes)):
        cum[lo:hi] += cum[tree.parent[lo:hi]]
    return cum[[tree.leaf_of[i] for i in tree.item_ids]]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_nodes(tree: FlowTree, log_probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` leaves by descending the tree; ``log_probs`` as from :func:`edge_log_probs`."""
    cur = np.zeros(n, dtype=np.int64)
    if tree.n_nodes == 1 or n == 0:
        return cur
    offsets, seg = _segments(tree)
    p = np.exp(log_probs[1:])
    cum = np.cumsum(p)
    base = np.concatenate([[0.0], cum])[offsets]
    within = cum - base[seg]
    ends = np.append(offsets[1:], p.size) - 1
    within = within / within[ends][seg]
    within[ends] = 1.0
    key = seg + within
    seg_of_node = np.full(tree.n_nodes, -1, dtype=np.int64)
    seg_of_node[tree.internal] = np.arange(tree.internal.size)
    active = np.arange(n)
    while active.size:
        u = rng.random(active.size)
        e = np.searchsorted(key, seg_of_node[cur[active]] + u, side="right")
        cur[active] = e + 1
        active = active[~tree.is_leaf[cur[active]]]
    return cur


def sample_titles(tree: FlowTree, context, params: PolicyParams, n: int,
                  temperature: float = 1.0, rng: np.random.Generator | int | None = None) -> list[str]:
    rng = np.random.default_rng(rng)
    lp = edge_log_probs(tree, params, context, temperature)
    return [tree.item_of_leaf[int(s)] for s in sample_nodes(tree, lp, n, rng)]


def sample_title(tree: FlowTree, context, params: PolicyParams, temperature: float = 1.0,
                 seed: int | np.random.Generator | None = None) -> str:
    """One constrained sample; identical output for identical inputs and seed."""
    return sample_titles(tree, context, params, 1, temperature, seed)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _encode_tok(t):
    return "<END>" if t is END else t


def save_params(params: PolicyParams, tree: FlowTree, path) -> None:
    """JSON checkpoint keyed by edge path; floats round-trip exactly."""
    edges = []
    for s in range(1, tree.n_nodes):
        row = {"path": [_encode_tok(t) for t in tree.prefix(s)], "b": float(params.bias[s])}
        if params.weight is not None:
            row["u"] = [float(x) for x in params.weight[s]]
        edges.append(row)
    doc = {"format": "flowtune-policy", "version": CHECKPOINT_VERSION, "mode": params.mode,
           "dim": params.dim, "edges": edges}
    if params.embedding is not None:
        doc["embedding"] = {i: [float(x) for x in params.embedding[k]]
                            for i, k in sorted(params.item_index.items(), key=lambda kv: kv[1])}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_params(path, tree: FlowTree) -> PolicyParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "flowtune-policy" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
    index = {}
    for s in range(1, tree.n_nodes):
        index[tuple(_encode_tok(t) for t in tree.prefix(s))] = s
    bias = np.zeros(tree.n_nodes)
    dim = int(doc["dim"])
    weight = np.zeros((tree.n_nodes, dim)) if doc["mode"] == CONTEXTUAL else None
    seen = 0
    for row in doc["edges"]:
        s = index.get(tuple(row["path"]))
        if s is None:
            raise ValueError(f"{path}: edge {row['path']} not in tree")
        bias[s] = row["b"]
        if weight is not None:
            weight[s] = row["u"]
        seen += 1
    if seen != tree.n_nodes - 1:
        raise ValueError(f"{path}: checkpoint covers {seen} of {tree.n_nodes - 1} edges")
    if doc["mode"] != CONTEXTUAL:
        return PolicyParams(doc["mode"], bias)
    ids = list(doc["embedding"])
    emb = np.array([doc["embedding"][i] for i in ids], dtype=float).reshape(len(ids), dim)
    return PolicyParams(CONTEXTUAL, bias, weight, emb, {i: k for k, i in enumerate(ids)})
