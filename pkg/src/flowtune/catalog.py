"""Interaction ingestion, preprocessing, tokenization and popularity groups."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TOKENIZERS = ("word", "char")


class ParseError(ValueError):
    """A row of an interaction file is missing fields or malformed."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptyDatasetError(ValueError):
    pass


class DuplicateTitleError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    title: str
    timestamp: int

    def __post_init__(self):
        if not self.title.strip():
            raise ValueError(f"empty title for item {self.item_id!r}")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class Example:
    """One next-item prediction instance: a user, their recent history and the target."""

    user_id: str
    history: tuple[str, ...]
    target: str


@dataclass
class Dataset:
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    max_history_len: int
    titles: dict[str, str] = field(default_factory=dict)

    def train_sequences(self) -> list[list[str]]:
        """Per-user chronological item sequences restricted to the train split."""
        seqs: dict[str, list[str]] = defaultdict(list)
        for ex in self.train:
            seqs[ex.user_id].append(ex.target)
        return [seqs[u] for u in sorted(seqs)]


@dataclass(frozen=True)
class CatalogItem:
    title: str
    tokens: tuple[str, ...]
    frequency: int


@dataclass
class Catalog:
    items: dict[str, CatalogItem]
    tokenizer_id: str = "word"

    def __len__(self):
        return len(self.items)

    def __contains__(self, item_id):
        return item_id in self.items

    @property
    def item_ids(self) -> list[str]:
        return sorted(self.items)

    def frequencies(self) -> dict[str, int]:
        return {i: it.frequency for i, it in self.items.items()}


@dataclass
class GroupAssignment:
    group_of: dict[str, int]
    G: int
    history_share: np.ndarray

    def sizes(self) -> np.ndarray:
        return np.bincount(list(self.group_of.values()), minlength=self.G)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_CSV_FIELDS = ("user", "item", "title", "timestamp")
_JSONL_FIELDS = ("user", "item", "title", "ts")


def _make_record(row: int, user, item, title, ts) -> InteractionRecord:
    try:
        ts = int(ts)
    except (TypeError, ValueError):
        raise ParseError(row, f"timestamp {ts!r} is not an integer") from None
    title = str(title)
    if not title.strip():
        raise ParseError(row, "empty title")
    if ts < 0:
        raise ParseError(row, "negative timestamp")
    return InteractionRecord(str(user), str(item), title, ts)


def ingest_interactions(path, format: str = "jsonl") -> list[InteractionRecord]:
    """Read an interaction log.

    CSV files need a ``user,item,title,timestamp`` header; JSONL rows carry the
    keys ``user, item, title, ts``.  Records come back in file order.  Rows with
    a missing field raise :class:`ParseError`; blank lines are skipped and
    counted in the log.
    """
    path = Path(path)
    records: list[InteractionRecord] = []
    skipped = 0
    with path.open(encoding="utf-8", newline="") as fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            missing = [f for f in _CSV_FIELDS if f not in (reader.fieldnames or [])]
            if reader.fieldnames is None:
                return records
            if missing:
                raise ParseError(1, f"header lacks {missing}")
            for n, row in enumerate(reader, start=2):
                if not any(row.values()):
                    skipped += 1
                    continue
                lacking = [f for f in _CSV_FIELDS if row.get(f) in (None, "")]
                if lacking:
                    raise ParseError(n, f"missing field(s) {lacking}")
                records.append(
                    _make_record(n, row["user"], row["item"], row["title"], row["timestamp"])
                )
        elif format == "jsonl":
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    skipped += 1
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(n, f"invalid JSON ({e.msg})") from None
                if not isinstance(row, dict):
                    raise ParseError(n, "row is not an object")
                lacking = [f for f in _JSONL_FIELDS if f not in row]
                if lacking:
                    raise ParseError(n, f"missing field(s) {lacking}")
                records.append(_make_record(n, row["user"], row["item"], row["title"], row["ts"]))
        else:
            raise ValueError(f"unknown format {format!r}")
    if skipped:
        logger.warning("%s: skipped %d blank rows", path, skipped)
    return records


def write_interactions(records: Iterable[InteractionRecord], path, format: str = "jsonl") -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if format == "csv":
            w = csv.writer(fh)
            w.writerow(_CSV_FIELDS)
            for r in records:
                w.writerow([r.user_id, r.item_id, r.title, r.timestamp])
        else:
            for r in records:
                row = {"user": r.user_id, "item": r.item_id, "title": r.title, "ts": r.timestamp}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def k_core_filter(records: Sequence[InteractionRecord], k_core: int) -> list[InteractionRecord]:
    """Drop users and items with fewer than ``k_core`` interactions until nothing changes."""
    kept = list(records)
    while True:
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        nxt = [r for r in kept if users[r.user_id] >= k_core and items[r.item_id] >= k_core]
        if len(nxt) == len(kept):
            return nxt
        kept = nxt


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = (8 * n) // 10
    n_valid = (9 * n) // 10 - n_train
    return n_train, n_valid, n - n_train - n_valid


def preprocess(
    records: Sequence[InteractionRecord],
    k_core: int = 5,
    max_len: int = 10,
    time_window: tuple[int, int] | None = None,
) -> Dataset:
    """Filter, order and split an interaction log into train/valid/test examples.

    Interactions are k-core filtered to a fixpoint, sorted by
    ``(timestamp, user_id, item_id)`` and cut 8:1:1 by position.  Every
    interaction becomes one example whose history is the user's preceding
    interactions (at most ``max_len``, most recent kept).
    """
    if k_core < 1 or max_len < 1:
        raise ConfigurationError("k_core and max_len must be >= 1")
    recs = list(records)
    if time_window is not None:
        t0, t1 = time_window
        recs = [r for r in recs if t0 <= r.timestamp <= t1]
    recs = k_core_filter(recs, k_core)
    if not recs:
        raise EmptyDatasetError("no interactions left after filtering")

    titles: dict[str, str] = {}
    for r in recs:
        titles.setdefault(r.item_id, r.title)

    recs.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    past: dict[str, list[str]] = defaultdict(list)
    examples = []
    for r in recs:
        h = past[r.user_id]
        examples.append(Example(r.user_id, tuple(h[-max_len:]), r.item_id))
        h.append(r.item_id)

    n_train, n_valid, _ = split_sizes(len(examples))
    return Dataset(
        train=examples[:n_train],
        valid=examples[n_train:n_train + n_valid],
        test=examples[n_train + n_valid:],
        max_history_len=max_len,
        titles=titles,
    )


def history_free_dataset(records: Sequence[InteractionRecord]) -> Dataset:
    """Every interaction as a context-free training example (distribution-fitting setup)."""
    titles: dict[str, str] = {}
    train = []
    for r in sorted(records, key=lambda r: (r.timestamp, r.user_id, r.item_id)):
        titles.setdefault(r.item_id, r.title)
        train.append(Example(r.user_id, (), r.item_id))
    if not train:
        raise EmptyDatasetError("no interactions")
    return Dataset(train=train, valid=[], test=[], max_history_len=0, titles=titles)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


def tokenize(title: str, tokenizer_id: str = "word") -> list[str]:
    if tokenizer_id == "word":
        return title.split()
    if tokenizer_id == "char":
        return list(title)
    raise ValueError(f"unknown tokenizer {tokenizer_id!r}")


def build_catalog(dataset: Dataset, tokenizer_id: str = "word") -> Catalog:
    """Tokenize every title and count train-split occurrences per item.

    Items that only show up in valid/test (or only in histories) get
    frequency 0.
    """
    if not dataset.train:
        raise EmptyDatasetError("train split is empty")
    counts = Counter(ex.target for ex in dataset.train)
    return _catalog_from_counts(dataset.titles, counts, tokenizer_id)


def _catalog_from_counts(titles, counts, tokenizer_id):
    items = {}
    seen: dict[tuple[str, ...], str] = {}
    for item_id in sorted(titles):
        toks = tuple(tokenize(titles[item_id], tokenizer_id))
        if not toks:
            raise ValueError(f"item {item_id!r} has an empty token sequence")
        if toks in seen:
            raise DuplicateTitleError(
                f"items {seen[toks]!r} and {item_id!r} share the token sequence {list(toks)}"
            )
        seen[toks] = item_id
        items[item_id] = CatalogItem(titles[item_id], toks, int(counts.get(item_id, 0)))
    return Catalog(items, tokenizer_id)


def catalog_from_frequencies(
    titles: dict[str, str], frequencies: dict[str, int], tokenizer_id: str = "word"
) -> Catalog:
    """Build a catalog straight from titles and counts (fixtures, manifests)."""
    return _catalog_from_counts(titles, frequencies, tokenizer_id)


def assign_popularity_groups(catalog: Catalog, G: int = 8) -> GroupAssignment:
    """Split the catalog into ``G`` equal-size bins by descending train frequency.

    Ties are broken by item id; when the catalog size is not a multiple of
    ``G`` the extra items go to the most popular bins.  Zero-frequency items
    sort to the tail, i.e. into the least popular bins.
    """
    n = len(catalog)
    if n == 0:
        raise ConfigurationError("empty catalog")
    if G < 1 or G > n:
        raise ConfigurationError(f"G={G} must be in [1, {n}]")
    order = sorted(catalog.items, key=lambda i: (-catalog.items[i].frequency, i))
    base, extra = divmod(n, G)
    group_of = {}
    pos = 0
    for g in range(G):
        size = base + (1 if g < extra else 0)
        for item_id in order[pos:pos + size]:
            group_of[item_id] = g
        pos += size
    mass = np.zeros(G)
    for item_id, g in group_of.items():
        mass[g] += catalog.items[item_id].frequency
    if mass.sum() > 0:
        share = mass / mass.sum()
    else:
        share = np.bincount(list(group_of.values()), minlength=G) / n
    return GroupAssignment(group_of, G, share)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def write_catalog_manifest(catalog: Catalog, groups: GroupAssignment | None, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item_id in catalog.item_ids:
            it = catalog.items[item_id]
            row = {
                "id": item_id,
                "title": it.title,
                "tokens": list(it.tokens),
                "frequency": it.frequency,
                "group": None if groups is None else groups.group_of[item_id],
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_catalog_manifest(path, tokenizer_id: str = "word") -> tuple[Catalog, dict[str, int | None]]:
    items = {}
    group_of = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            items[row["id"]] = CatalogItem(row["title"], tuple(row["tokens"]), int(row["frequency"]))
            group_of[row["id"]] = row.get("group")
    return Catalog(items, tokenizer_id), group_of


def write_dataset_manifest(dataset: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"max_history_len": dataset.max_history_len}) + "\n")
        for split in ("train", "valid", "test"):
            for ex in getattr(dataset, split):
                row = {"split": split, "user": ex.user_id, "history": list(ex.history), "target": ex.target}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_dataset_manifest(path, titles: dict[str, str]) -> Dataset:
    splits: dict[str, list[Example]] = {"train": [], "valid": [], "test": []}
    with Path(path).open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            splits[row["split"]].append(Example(row["user"], tuple(row["history"]), row["target"]))
    return Dataset(max_history_len=header["max_history_len"], titles=dict(titles), **splits)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_WORDS = (
    "Back", "to", "the", "Future", "Life", "School", "Night", "Star", "Blue", "River",
    "Last", "King", "Dark", "City", "Lost", "Dream", "Red", "Storm", "Moon", "Road",
)


def synthetic_titles(n: int, rng: np.random.Generator, vocab: Sequence[str] = _WORDS,
                     max_words: int = 3) -> list[str]:
    """``n`` distinct short titles over a small vocabulary, so prefixes are shared."""
    max_distinct = sum(len(vocab) ** k for k in range(1, max_words + 1))
    if n > max_distinct:
        raise ConfigurationError(f"cannot draw {n} distinct titles from this vocabulary")
    out: list[str] = []
    seen = set()
    while len(out) < n:
        k = int(rng.integers(1, max_words + 1))
        title = " ".join(vocab[j] for j in rng.integers(0, len(vocab), size=k))
        if title not in seen:
            seen.add(title)
            out.append(title)
    return out


def zipf_counts(n_items: int, exponent: float, n_interactions: int) -> list[int]:
    w = np.arange(1, n_items + 1, dtype=float) ** -exponent
    return [max(1, int(round(c))) for c in n_interactions * w / w.sum()]


def make_zipf_log(
    n_items: int = 100,
    exponent: float = 1.0,
    n_interactions: int = 2000,
    seed: int = 0,
    n_users: int | None = None,
) -> list[InteractionRecord]:
    """Synthetic interaction log whose item counts follow a Zipf law.

    Item ``i{r:04d}`` (rank ``r`` starting at 1) gets
    ``round(n_interactions * r**-s / H)`` interactions (at least one).  Users
    and timestamps are random but fixed by ``seed``.
    """
    rng = np.random.default_rng(seed)
    titles = synthetic_titles(n_items, rng)
    counts = zipf_counts(n_items, exponent, n_interactions)
    n_users = n_users or max(1, sum(counts) // 10)
    records = []
    for r, (title, c) in enumerate(zip(titles, counts), start=1):
        for _ in range(c):
            records.append(InteractionRecord(
                f"u{int(rng.integers(n_users)):05d}", f"i{r:04d}", title, int(rng.integers(0, 10**6))
            ))
    order = rng.permutation(len(records))
    return [records[j] for j in order]


def make_cluster_log(
    n_users: int = 60,
    items_per_cluster: int = 8,
    seq_len: int = 12,
    seed: int = 0,
) -> list[InteractionRecord]:
    """Two disjoint taste clusters: A-users only touch A-items, B-users only B-items."""
    rng = np.random.default_rng(seed)
    words = ("red", "blue", "green", "gold", "gray", "pink", "teal", "jade", "ruby", "onyx")
    catalog = {}
    for cluster in ("Alpha", "Beta"):
        for j in range(items_per_cluster):
            catalog[f"{cluster[0]}{j:02d}"] = f"{cluster} {words[j % len(words)]} {j}"
    records = []
    for u in range(n_users):
        cluster = "A" if u % 2 == 0 else "B"
        pool = [i for i in sorted(catalog) if i.startswith(cluster)]
        w = 1.0 / np.arange(1, len(pool) + 1)
        w /= w.sum()
        # interleave users in time so every split sees every user
        times = np.sort(rng.integers(0, 10**6, size=seq_len))
        for t in times:
            item = pool[int(rng.choice(len(pool), p=w))]
            records.append(InteractionRecord(f"u{u:03d}", item, catalog[item], int(t)))
    return records
