"""Accuracy, popularity-fairness, diversity and distribution-mismatch metrics."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .catalog import Catalog, GroupAssignment
from .decode import RankedList

KL_SMOOTHING = 1e-9


def _items(rec) -> list[str]:
    return rec.items if isinstance(rec, RankedList) else list(rec)


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------


def hr_ndcg(recs: Sequence, targets: Sequence[str]) -> tuple[float, float]:
    """Hit ratio and NDCG with a single relevant item per list (ideal DCG = 1)."""
    if len(recs) != len(targets):
        raise ValueError("one target per recommendation list")
    if not recs:
        return 0.0, 0.0
    hit = ndcg = 0.0
    for rec, t in zip(recs, targets):
        items = _items(rec)
        if t in items:
            hit += 1.0
            ndcg += 1.0 / math.log2(items.index(t) + 2)
    return hit / len(recs), ndcg / len(recs)


# ---------------------------------------------------------------------------
# fairness
# ---------------------------------------------------------------------------


def group_histogram(recs: Sequence, groups: GroupAssignment, G: int | None = None):
    """Share of recommendation slots per popularity group, next to the history share.

    Slots are pooled over all lists with multiplicity.
    """
    G = groups.G if G is None else G
    if G != groups.G:
        raise ValueError(f"group assignment has G={groups.G}, asked for {G}")
    counts = np.zeros(G)
    for rec in recs:
        for i in _items(rec):
            counts[groups.group_of[i]] += 1
    total = counts.sum()
    r = counts / total if total else counts
    return r, np.asarray(groups.history_share, dtype=float)


def aggregate_deviation(r: np.ndarray, h: np.ndarray) -> tuple[float, float]:
    """(max, mean) absolute deviation between recommended and historical group shares."""
    d = np.abs(np.asarray(r, float) - np.asarray(h, float))
    return float(d.max()), float(d.mean())


def dgu_mgu(recs: Sequence, groups: GroupAssignment) -> tuple[float, float]:
    r, h = group_histogram(recs, groups)
    return aggregate_deviation(r, h)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def entropy_bits(counts) -> float:
    c = np.asarray(list(counts), dtype=float)
    c = c[c > 0]
    p = c / c.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def diversity(recs: Sequence, catalog: Catalog | None = None) -> tuple[float, float]:
    """Word entropy (bits) and type-token ratio over every recommended title.

    ``recs`` holds ranked lists (titles looked up in ``catalog``) or, without
    a catalog, plain title strings.
    """
    words: Counter = Counter()
    for rec in recs:
        if catalog is None:
            words.update(str(rec).split())
        else:
            for i in _items(rec):
                words.update(catalog.items[i].title.split())
    total = sum(words.values())
    if total == 0:
        raise ValueError("no words in the recommendations")
    return entropy_bits(words.values()), len(words) / total


# ---------------------------------------------------------------------------
# distribution mismatch
# ---------------------------------------------------------------------------


def _align(p: Mapping, q: Mapping) -> tuple[np.ndarray, np.ndarray]:
    keys = sorted(set(p) | set(q), key=str)
    a = np.array([float(p.get(k, 0.0)) for k in keys])
    b = np.array([float(q.get(k, 0.0)) for k in keys])
    if (a < 0).any() or (b < 0).any():
        raise ValueError("counts must be non-negative")
    if a.sum() <= 0 or b.sum() <= 0:
        raise ValueError("both distributions need positive total mass")
    return a / a.sum(), b / b.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, smoothing: float = KL_SMOOTHING) -> float:
    """KL(p || q) in nats after adding ``smoothing`` to every entry and renormalizing."""
    n = p.size
    ps = (p + smoothing) / (1.0 + n * smoothing)
    qs = (q + smoothing) / (1.0 + n * smoothing)
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in bits (no smoothing; lies in [0, 1])."""
    m = 0.5 * (p + q)

    def part(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(x[nz] / m[nz])))

    return min(max(0.5 * part(p) + 0.5 * part(q), 0.0), 1.0)


def distribution_mismatch(target_counts: Mapping, generated_counts: Mapping,
                          level: str = "title") -> tuple[float, float, float]:
    """``(KL(T||R), KL(R||T), JS)`` between target and generated counts.

    ``level`` is informational; token-level callers pass token counts (see
    :func:`token_counts`).
    """
    if level not in ("title", "token"):
        raise ValueError(f"unknown level {level!r}")
    t, r = _align(target_counts, generated_counts)
    return kl_divergence(t, r), kl_divergence(r, t), js_divergence(t, r)


def token_counts(item_counts: Mapping[str, float], catalog: Catalog) -> dict[str, float]:
    """Expand item counts into counts of their title tokens (END not included)."""
    out: dict[str, float] = {}
    for i, c in item_counts.items():
        for tok in catalog.items[i].tokens:
            out[tok] = out.get(tok, 0.0) + c
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    k_accuracy: int
    k_fairness: int
    hr_k: float
    ndcg_k: float
    dgu_k: float
    mgu_k: float
    entropy_h: float
    ttr: float
    title_kl_t_r: float
    title_kl_r_t: float
    title_js: float
    token_kl_t_r: float
    token_kl_r_t: float
    token_js: float
    group_hist: np.ndarray = field(repr=False, default=None)
    history_share: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("group_hist")
        d.pop("history_share")
        return d

    def table(self) -> str:
        ka, kf = self.k_accuracy, self.k_fairness
        lines = [
            (f"NDCG@{ka}", self.ndcg_k), (f"HR@{ka}", self.hr_k),
            (f"DGU@{kf}", self.dgu_k), (f"MGU@{kf}", self.mgu_k),
            ("H (bits)", self.entropy_h), ("TTR", self.ttr),
            ("Title KL(T||R)", self.title_kl_t_r), ("Title KL(R||T)", self.title_kl_r_t),
            ("Title JS", self.title_js),
            ("Token KL(T||R)", self.token_kl_t_r), ("Token KL(R||T)", self.token_kl_r_t),
            ("Token JS", self.token_js),
        ]
        w = max(len(n) for n, _ in lines)
        return "\n".join(f"{n:<{w}}  {v:.4f}" for n, v in lines)


def evaluate(recs_acc: Sequence, targets: Sequence[str], recs_fair: Sequence,
             catalog: Catalog, groups: GroupAssignment) -> MetricsReport:
    """Full metric set.

    Accuracy uses ``recs_acc`` (e.g. top-5 lists); fairness, diversity and
    distribution mismatch use ``recs_fair`` (e.g. top-10 lists).  The target
    distribution is the catalog's train frequency.
    """
    hr, ndcg = hr_ndcg(recs_acc, targets)
    r, h = group_histogram(recs_fair, groups)
    dgu, mgu = aggregate_deviation(r, h)
    H, ttr = diversity(recs_fair, catalog)
    gen = Counter(i for rec in recs_fair for i in _items(rec))
    tgt = {i: it.frequency for i, it in catalog.items.items() if it.frequency > 0}
    title = distribution_mismatch(tgt, gen, "title")
    token = distribution_mismatch(token_counts(tgt, catalog), token_counts(gen, catalog), "token")
    k_acc = max((len(_items(x)) for x in recs_acc), default=0)
    k_fair = max((len(_items(x)) for x in recs_fair), default=0)
    return MetricsReport(k_acc, k_fair, hr, ndcg, dgu, mgu, H, ttr, *title, *token,
                         group_hist=r, history_share=h)


def exact_fit(tree, params, catalog: Catalog, context=None) -> dict[str, float]:
    """Title- and token-level mismatch between catalog frequencies and exact model probabilities."""
    from .policy import item_log_probs

    model = {i: math.exp(v) for i, v in item_log_probs(tree, params, context).items()}
    tgt = {i: it.frequency for i, it in catalog.items.items() if it.frequency > 0}
    t = distribution_mismatch(tgt, model, "title")
    k = distribution_mismatch(token_counts(tgt, catalog), token_counts(model, catalog), "token")
    return {"title_kl_t_r": t[0], "title_kl_r_t": t[1], "title_js": t[2],
            "token_kl_t_r": k[0], "token_kl_r_t": k[1], "token_js": k[2]}


def write_metrics(report: MetricsReport, path) -> None:
    row = report.row()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_group_histogram(r, h, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "h_g", "r_g"])
        for g, (hg, rg) in enumerate(zip(h, r)):
            w.writerow([g, repr(float(hg)), repr(float(rg))])
