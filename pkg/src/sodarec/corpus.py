"""Interaction logs, k-core filtering, leave-one-out splits and embedding tables."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

INTERACTION_HEADER = ["user_id", "item_id", "timestamp"]


class CorpusFormatError(ValueError):
    pass


def load_interactions(path) -> pd.DataFrame:
    """Read a tab-separated ``user_id, item_id, timestamp`` log.

    Rows come back sorted by timestamp with file order kept among ties, and
    exact duplicate triples dropped.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CorpusFormatError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        return _empty_log()
    header = lines[0].rstrip("\r").split("\t")
    if header != INTERACTION_HEADER:
        expected = "\t".join(INTERACTION_HEADER)
        raise CorpusFormatError(f"{path}:1: expected header {expected!r}, got {lines[0]!r}")
    users, items, stamps = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise CorpusFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            ts = int(fields[2])
        except ValueError:
            raise CorpusFormatError(f"{path}:{lineno}: non-numeric timestamp {fields[2]!r}") from None
        users.append(fields[0])
        items.append(fields[1])
        stamps.append(ts)
    log = pd.DataFrame({"user_id": users, "item_id": items, "timestamp": np.asarray(stamps, dtype=np.int64)})
    return _normalize(log)


def _empty_log() -> pd.DataFrame:
    return pd.DataFrame({"user_id": pd.Series(dtype=str), "item_id": pd.Series(dtype=str),
                         "timestamp": pd.Series(dtype=np.int64)})


def _normalize(log: pd.DataFrame) -> pd.DataFrame:
    log = log.drop_duplicates(subset=INTERACTION_HEADER)
    return log.sort_values("timestamp", kind="stable").reset_index(drop=True)


def write_interactions(log: pd.DataFrame, path) -> None:
    log[INTERACTION_HEADER].to_csv(path, sep="\t", index=False)


def k_core_filter(log: pd.DataFrame, k: int) -> pd.DataFrame:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    while True:
        user_deg = log["user_id"].map(log["user_id"].value_counts())
        item_deg = log["item_id"].map(log["item_id"].value_counts())
        keep = (user_deg >= k) & (item_deg >= k)
        if keep.all():
            return log.reset_index(drop=True)
        log = log[keep]


def build_sequences(log: pd.DataFrame, max_len: int = 20) -> dict[str, list[str]]:
    """Chronological item list per user, keeping the latest ``max_len + 2``."""
    ordered = log.sort_values("timestamp", kind="stable")
    seqs = {}
    for user, items in ordered.groupby("user_id", sort=True)["item_id"]:
        seqs[user] = items.tolist()[-(max_len + 2):]
    return seqs


@dataclass
class Example:
    user_id: str
    history: list[str]
    target: str


@dataclass
class SplitDataset:
    train: list[Example] = field(default_factory=list)
    validation: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def items(self) -> set[str]:
        out = set()
        for part in (self.train, self.validation, self.test):
            for ex in part:
                out.update(ex.history)
                out.add(ex.target)
        return out


def split_leave_one_out(sequences: dict[str, list[str]], max_len: int = 20) -> SplitDataset:
    """Last item to test, second-to-last to validation, every earlier prefix to train."""
    split = SplitDataset()
    for user, seq in sequences.items():
        if len(seq) < 3:
            warnings.warn(f"user {user!r} has {len(seq)} interactions (< 3); excluded", stacklevel=2)
            continue
        n = len(seq)
        split.test.append(Example(user, seq[: n - 1][-max_len:], seq[-1]))
        split.validation.append(Example(user, seq[: n - 2][-max_len:], seq[-2]))
        for j in range(1, n - 2):
            split.train.append(Example(user, seq[:j][-max_len:], seq[j]))
    return split


@dataclass
class EmbeddingTable:
    item_ids: list[str]
    vectors: np.ndarray  # (n, d) float64

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.item_ids) != self.vectors.shape[0]:
            raise CorpusFormatError("item_ids and vectors disagree in length")
        if not np.isfinite(self.vectors).all():
            raise CorpusFormatError("embedding table contains non-finite values")
        self._row = {item: i for i, item in enumerate(self.item_ids)}
        if len(self._row) != len(self.item_ids):
            raise CorpusFormatError("duplicate item ids in embedding table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.item_ids)

    def __contains__(self, item):
        return item in self._row

    def __getitem__(self, item) -> np.ndarray:
        return self.vectors[self._row[item]]

    def rows(self, items) -> np.ndarray:
        return self.vectors[[self._row[i] for i in items]]

    def subset(self, items) -> "EmbeddingTable":
        items = sorted(items)
        missing = [i for i in items if i not in self._row]
        if missing:
            raise KeyError(f"{len(missing)} items have no embedding, e.g. {missing[:3]}")
        return EmbeddingTable(items, self.rows(items))


def save_embeddings(table: EmbeddingTable, embeddings_path, item_map_path) -> None:
    with open(embeddings_path, "w") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        np.savetxt(fh, table.vectors, fmt="%.17g", delimiter=" ")
    with open(item_map_path, "w") as fh:
        fh.write("item_id\trow\n")
        for row, item in enumerate(table.item_ids):
            fh.write(f"{item}\t{row}\n")


def load_embeddings(embeddings_path, item_map_path) -> EmbeddingTable:
    with open(embeddings_path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusFormatError(f"{embeddings_path}:1: expected header 'n d'")
        n, d = int(header[0]), int(header[1])
        rows = [line.split() for line in fh if line.strip()]
    if len(rows) != n:
        raise CorpusFormatError(f"{embeddings_path}: header declares {n} rows, found {len(rows)}")
    for i, row in enumerate(rows):
        if len(row) != d:
            raise CorpusFormatError(f"{embeddings_path}:{i + 2}: expected {d} values, got {len(row)}")
    vectors = np.array(rows, dtype=np.float64).reshape(n, d)
    ids = [None] * n
    with open(item_map_path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        item, row = line.split("\t")
        row = int(row)
        if not 0 <= row < n:
            raise CorpusFormatError(f"{item_map_path}:{lineno}: row {row} out of range")
        ids[row] = item
    if any(i is None for i in ids):
        raise CorpusFormatError(f"{item_map_path}: not every embedding row has an item id")
    return EmbeddingTable(ids, vectors)


def synth_corpus(n_users: int, n_items: int, n_clusters: int, seed: int = 0, dim: int = 32,
                 min_len: int = 5, max_len: int = 15, in_cluster: float = 0.8,
                 spread: float = 0.3, affinity: float = 0.0) -> tuple[pd.DataFrame, EmbeddingTable]:
    """Planted-cluster corpus: users favour one item cluster.

    Items are split round-robin into ``n_clusters`` Gaussian clusters. Each
    user draws a preferred cluster and between ``min_len`` and ``max_len``
    distinct items, each from the preferred cluster with probability
    ``in_cluster`` and from another cluster otherwise.

    With ``affinity > 0`` each user also has a taste point inside the
    preferred cluster, and in-cluster picks are weighted by
    ``exp(-affinity * ||item - taste||^2 / spread^2)`` instead of uniform.
    """
    if n_clusters > n_items:
        raise ValueError("n_clusters must not exceed n_items")
    rng = np.random.default_rng(seed)
    width = len(str(n_items - 1))
    item_ids = [f"i{j:0{width}d}" for j in range(n_items)]
    cluster_of = np.arange(n_items) % n_clusters
    centers = rng.normal(size=(n_clusters, dim))
    vectors = centers[cluster_of] + spread * rng.normal(size=(n_items, dim))
    members = [np.flatnonzero(cluster_of == c) for c in range(n_clusters)]

    uwidth = len(str(n_users - 1))
    rows = []
    for u in range(n_users):
        pref = rng.integers(n_clusters)
        taste = vectors[rng.choice(members[pref])]
        length = min(int(rng.integers(min_len, max_len + 1)), n_items)
        chosen: list[int] = []
        t = int(rng.integers(0, 1000))
        while len(chosen) < length:
            if n_clusters == 1 or rng.random() < in_cluster:
                pool = members[pref]
            else:
                other = rng.choice([c for c in range(n_clusters) if c != pref])
                pool = members[other]
            pool = [j for j in pool if j not in chosen]
            if not pool:
                continue
            weights = None
            if affinity > 0 and pool[0] in members[pref]:
                d2 = ((vectors[pool] - taste) ** 2).sum(1) / spread**2
                w = np.exp(-affinity * (d2 - d2.min()))
                weights = w / w.sum()
            chosen.append(int(rng.choice(pool, p=weights)))
        for j in chosen:
            t += int(rng.integers(1, 100))
            rows.append((f"u{u:0{uwidth}d}", item_ids[j], t))
    log = pd.DataFrame(rows, columns=INTERACTION_HEADER)
    log["timestamp"] = log["timestamp"].astype(np.int64)
    return _normalize(log), EmbeddingTable(item_ids, vectors)


def item_clusters(n_items: int, n_clusters: int) -> np.ndarray:
    """Cluster index of each synthetic item, in item order."""
    return np.arange(n_items) % n_clusters
