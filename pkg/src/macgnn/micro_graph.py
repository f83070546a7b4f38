"""Interaction logs and the micro user-item graph built from their positive records."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np
import scipy.sparse as sp

from .errors import DataError

USER = "user"
ITEM = "item"
SIDES = (USER, ITEM)
HEADER = ["user_id", "item_id", "label", "timestamp"]


def other_side(side: str) -> str:
    if side == USER:
        return ITEM
    if side == ITEM:
        return USER
    raise ValueError(f"unknown node side {side!r}")


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    label: int
    timestamp: int


@dataclass
class InteractionLog:
    """Column-oriented interaction records in file order.

    ``user_ids`` / ``item_ids`` hold the raw identifiers so that dense index
    ``k`` maps back to ``user_ids[k]``.
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    n: int
    m: int
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.labels) == len(self.timestamps)):
            raise DataError("interaction columns have different lengths")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.m:
                raise DataError("item index out of range")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must be 0 or 1")
        if not self.user_ids:
            self.user_ids = [str(k) for k in range(self.n)]
        if not self.item_ids:
            self.item_ids = [str(k) for k in range(self.m)]

    def __len__(self):
        return len(self.users)

    def __iter__(self):
        for u, i, y, t in zip(self.users, self.items, self.labels, self.timestamps):
            yield Interaction(int(u), int(i), int(y), int(t))

    def __getitem__(self, k: int) -> Interaction:
        return Interaction(int(self.users[k]), int(self.items[k]), int(self.labels[k]), int(self.timestamps[k]))

    def subset(self, mask_or_index) -> "InteractionLog":
        """Records selected by a boolean mask or index array, keeping the id spaces."""
        return InteractionLog(
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.labels[mask_or_index],
            self.timestamps[mask_or_index],
            self.n,
            self.m,
            self.user_ids,
            self.item_ids,
        )

    @classmethod
    def from_records(cls, records: Iterable[tuple], n: int | None = None, m: int | None = None) -> "InteractionLog":
        rows = [tuple(int(v) for v in r) for r in records]
        if rows:
            users, items, labels, ts = (np.array(c, dtype=np.int64) for c in zip(*rows))
        else:
            users = items = labels = ts = np.zeros(0, dtype=np.int64)
        if n is None:
            n = int(users.max()) + 1 if len(users) else 0
        if m is None:
            m = int(items.max()) + 1 if len(items) else 0
        return cls(users, items, labels, ts, n, m)

    def positive_pairs(self) -> int:
        return len(set(zip(self.users[self.labels == 1].tolist(), self.items[self.labels == 1].tolist())))


def _parse_int(text: str, what: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {lineno}: {what} is not an integer: {text!r}") from None


def load_interactions(source: IO) -> InteractionLog:
    """Parse ``user_id,item_id,label,timestamp`` CSV into a densely indexed log.

    Raw ids may be arbitrary strings; dense indices are assigned in order of
    first appearance. ``source`` may be a text or binary stream.
    """
    if isinstance(source, (io.RawIOBase, io.BufferedIOBase)) or "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("line 1: missing header") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"input is not UTF-8: {exc}") from None
    if [h.strip() for h in header] != HEADER:
        raise DataError(f"line 1: expected header {','.join(HEADER)!r}, got {','.join(header)!r}")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, labels, stamps = [], [], [], []
    lineno = 1
    try:
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            raw_user, raw_item = row[0].strip(), row[1].strip()
            if not raw_user or not raw_item:
                raise DataError(f"line {lineno}: empty id")
            label = _parse_int(row[2].strip(), "label", lineno)
            if label not in (0, 1):
                raise DataError(f"line {lineno}: label must be 0 or 1, got {label}")
            ts = _parse_int(row[3].strip(), "timestamp", lineno)
            users.append(user_index.setdefault(raw_user, len(user_index)))
            items.append(item_index.setdefault(raw_item, len(item_index)))
            labels.append(label)
            stamps.append(ts)
    except UnicodeDecodeError as exc:
        raise DataError(f"line {lineno + 1}: input is not UTF-8: {exc}") from None
    except csv.Error as exc:
        raise DataError(f"line {lineno}: {exc}") from None

    return InteractionLog(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array(labels, dtype=np.int8),
        np.array(stamps, dtype=np.int64),
        len(user_index),
        len(item_index),
        list(user_index),
        list(item_index),
    )


def write_remap(log: InteractionLog, out: IO[str]) -> None:
    """Two-column id map; node ids are prefixed with their side (``user:`` / ``item:``)."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["node_id", "index"])
    for k, raw in enumerate(log.user_ids):
        w.writerow([f"{USER}:{raw}", k])
    for k, raw in enumerate(log.item_ids):
        w.writerow([f"{ITEM}:{raw}", k])


def read_remap(source: IO[str]) -> tuple[list[str], list[str]]:
    reader = csv.reader(source)
    header = next(reader, None)
    if header != ["node_id", "index"]:
        raise DataError("id map: bad header")
    users: dict[int, str] = {}
    items: dict[int, str] = {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 2:
            raise DataError(f"id map line {lineno}: expected 2 fields")
        side, _, raw = row[0].partition(":")
        target = {USER: users, ITEM: items}.get(side)
        if target is None:
            raise DataError(f"id map line {lineno}: unknown side {side!r}")
        target[_parse_int(row[1], "index", lineno)] = raw
    return [users[k] for k in range(len(users))], [items[k] for k in range(len(items))]


class MicroGraph:
    """Binary bipartite adjacency over distinct positive (user, item) pairs.

    Both directions are kept in compressed sparse row form with sorted
    neighbor lists, so ``user_adj(u)`` and ``item_adj(i)`` are array slices.
    Instances are treated as immutable once built.
    """

    def __init__(self, user_indptr, user_indices, item_indptr, item_indices, n: int, m: int):
        self.n = n
        self.m = m
        self._indptr = {USER: np.asarray(user_indptr, dtype=np.int64), ITEM: np.asarray(item_indptr, dtype=np.int64)}
        self._indices = {USER: np.asarray(user_indices, dtype=np.int64), ITEM: np.asarray(item_indices, dtype=np.int64)}

    @classmethod
    def from_pairs(cls, users, items, n: int, m: int) -> "MicroGraph":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        R = sp.csr_matrix((np.ones(len(users), dtype=np.int64), (users, items)), shape=(n, m))
        R.sum_duplicates()
        R.data[:] = 1
        R.sort_indices()
        C = R.T.tocsr()
        C.sort_indices()
        return cls(R.indptr, R.indices, C.indptr, C.indices, n, m)

    def size(self, side: str) -> int:
        return self.n if side == USER else self.m

    def adj(self, side: str, node: int) -> np.ndarray:
        if not 0 <= node < self.size(side):
            raise IndexError(f"{side} {node} out of range [0, {self.size(side)})")
        p = self._indptr[side]
        return self._indices[side][p[node]:p[node + 1]]

    def user_adj(self, u: int) -> np.ndarray:
        return self.adj(USER, u)

    def item_adj(self, i: int) -> np.ndarray:
        return self.adj(ITEM, i)

    def degrees(self, side: str) -> np.ndarray:
        return np.diff(self._indptr[side])

    def csr(self, side: str = USER) -> sp.csr_matrix:
        """Binary matrix R (users x items) for ``side='user'``, R^T otherwise."""
        shape = (self.n, self.m) if side == USER else (self.m, self.n)
        indices = self._indices[side]
        return sp.csr_matrix((np.ones(len(indices)), indices, self._indptr[side]), shape=shape)

    @property
    def edge_count(self) -> int:
        return len(self._indices[USER])

    def has_edge(self, u: int, i: int) -> bool:
        row = self.user_adj(u)
        k = np.searchsorted(row, i)
        return bool(k < len(row) and row[k] == i)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "user_indptr": self._indptr[USER],
            "user_indices": self._indices[USER],
            "item_indptr": self._indptr[ITEM],
            "item_indices": self._indices[ITEM],
            "shape": np.array([self.n, self.m], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays) -> "MicroGraph":
        n, m = (int(v) for v in arrays["shape"])
        return cls(arrays["user_indptr"], arrays["user_indices"], arrays["item_indptr"], arrays["item_indices"], n, m)

    def __eq__(self, other):
        if not isinstance(other, MicroGraph):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return all(np.array_equal(a[k], b[k]) for k in a)


def build_micro_graph(log: InteractionLog) -> MicroGraph:
    pos = log.labels == 1
    return MicroGraph.from_pairs(log.users[pos], log.items[pos], log.n, log.m)


def neighbors(graph: MicroGraph, side: str, node: int, k: int = 1) -> set[int]:
    """k-hop neighbor set of a node; k=2 may contain the node itself."""
    if k not in (1, 2):
        raise ValueError("hop count must be 1 or 2")
    first = graph.adj(side, node)
    if k == 1:
        return set(first.tolist())
    opposite = other_side(side)
    out: set[int] = set()
    for a in first:
        out.update(graph.adj(opposite, int(a)).tolist())
    return out


class RecentIndex:
    """Per-node chronologically sorted positive counterparts for fast recent-sequence lookups.

    Ordering is by timestamp with ties broken by log order.
    """

    def __init__(self, log: InteractionLog, side: str):
        pos = np.flatnonzero(log.labels == 1)
        owner = (log.users if side == USER else log.items)[pos]
        counterpart = (log.items if side == USER else log.users)[pos]
        ts = log.timestamps[pos]
        order = np.lexsort((pos, ts, owner))
        self.side = side
        self.size = log.n if side == USER else log.m
        self.counterpart = counterpart[order]
        self.ts = ts[order]
        self.indptr = np.zeros(self.size + 1, dtype=np.int64)
        np.add.at(self.indptr, owner[order] + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        # node-major composite key so one searchsorted covers every node
        self._t0 = int(self.ts.min()) if len(self.ts) else 0
        self._span = (int(self.ts.max()) - self._t0 + 2) if len(self.ts) else 2
        owners = np.repeat(np.arange(self.size, dtype=np.int64), np.diff(self.indptr))
        self._key = self._composite(owners, self.ts)

    def _composite(self, nodes, times):
        t = np.clip(np.asarray(times, dtype=np.int64) - self._t0, -1, self._span - 1) + 1
        return np.asarray(nodes, dtype=np.int64) * (self._span + 1) + t

    def sequence(self, node: int, length: int, cutoff: int | None = None) -> np.ndarray:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        if cutoff is not None:
            hi = lo + np.searchsorted(self.ts[lo:hi], cutoff, side="left")
        return self.counterpart[max(lo, hi - length):hi]

    def batch(self, nodes: np.ndarray, length: int, cutoffs) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``(ids, mask)`` matrices of shape ``(len(nodes), length)``; most recent last."""
        nodes = np.asarray(nodes, dtype=np.int64)
        cutoffs = np.broadcast_to(np.asarray(cutoffs, dtype=np.int64), nodes.shape)
        lo = self.indptr[nodes]
        ends = np.searchsorted(self._key, self._composite(nodes, cutoffs), side="left")
        starts = np.maximum(lo, ends - length)
        counts = ends - starts
        ids = np.zeros((len(nodes), length), dtype=np.int64)
        mask = np.zeros((len(nodes), length), dtype=bool)
        col = np.arange(length)
        offset = length - counts
        valid = col[None, :] >= offset[:, None]
        src = starts[:, None] + (col[None, :] - offset[:, None])
        ids[valid] = self.counterpart[src[valid]]
        mask[valid] = True
        return ids, mask


def recent_sequence(log: InteractionLog, side: str, node: int, length: int = 20, cutoff: int | None = None) -> list[int]:
    """Last ``length`` positive counterparts of ``node`` strictly before ``cutoff``, oldest first."""
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    return RecentIndex(log, side).sequence(node, length, cutoff).tolist()
