"""First-order co-occurrence preference scorer supplying p_ui in (0, 1]."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS_P = 1e-6


@dataclass
class PrefModel:
    item_ids: list[str]
    cooccurrence: dict[tuple[str, str], int]
    item_prior: dict[str, int]
    alpha: float = 1.0
    eps: float = EPS_P
    overrides: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {i: k for k, i in enumerate(self.item_ids)}
        nxt: dict[str, dict[str, int]] = defaultdict(dict)
        for (a, b), c in self.cooccurrence.items():
            nxt[a][b] = c
        self._next = dict(nxt)
        self._prior = np.array([self.item_prior.get(i, 0) for i in self.item_ids], dtype=float)
        self._cache: dict = {}

    def scores(self, history: Sequence[str] = (), user: str | None = None) -> np.ndarray:
        """p_ui for every catalog item (order of ``item_ids``); sums to 1."""
        if user is not None and user in self.overrides:
            key = ("user", user)
        else:
            key = ("last", history[-1] if len(history) else None)
        p = self._cache.get(key)
        if p is not None:
            return p
        if key[0] == "user":
            raw = np.full(len(self.item_ids), self.eps)
            for i, v in self.overrides[user].items():
                if i in self._index:
                    raw[self._index[i]] = v
        elif key[1] is None:
            raw = self.alpha + self._prior
        else:
            raw = np.full(len(self.item_ids), float(self.alpha))
            for b, c in self._next.get(key[1], {}).items():
                k = self._index.get(b)
                if k is not None:
                    raw[k] += c
        p = raw / raw.sum()
        p = np.maximum(p, self.eps)
        p = p / p.sum()
        p.flags.writeable = False
        self._cache[key] = p
        return p

    def score(self, history: Sequence[str], item: str, user: str | None = None) -> float:
        if item not in self._index:
            raise KeyError(f"unknown item {item!r}")
        return float(self.scores(history, user)[self._index[item]])


def fit(sequences: Iterable[Sequence[str]], item_ids: Sequence[str], alpha: float = 1.0) -> PrefModel:
    """Count adjacent ordered pairs ``a -> b`` in each sequence, plus item frequencies."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    pairs: Counter = Counter()
    prior: Counter = Counter()
    for seq in sequences:
        prior.update(seq)
        pairs.update(zip(seq[:-1], seq[1:]))
    return PrefModel(sorted(item_ids), dict(pairs), dict(prior), alpha)


def load_overrides(model: PrefModel, path) -> PrefModel:
    """Attach externally computed scores (JSONL rows ``user_id, item_id, p``).

    Scores are used verbatim up to renormalization over the catalog; items a
    user has no row for get the floor value.
    """
    table: dict[str, dict[str, float]] = defaultdict(dict)
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            p = float(row["p"])
            if p < 0:
                raise ValueError(f"{path}:{n}: negative score")
            table[str(row["user_id"])][str(row["item_id"])] = p
    return PrefModel(model.item_ids, model.cooccurrence, model.item_prior, model.alpha,
                     model.eps, dict(table))
