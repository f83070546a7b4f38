"""Turn graphs, groupings and logs into padded model batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .macro_graph import MacroNodeRegistry, hop_matrices
from .micro_graph import ITEM, USER, InteractionLog, MicroGraph, RecentIndex, build_micro_graph
from .model import Batch


@dataclass
class HopTable:
    """Row-padded sparse matrix: macro ids, sums and validity per target."""

    ids: np.ndarray
    sums: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_csr(cls, H: sp.csr_matrix) -> "HopTable":
        counts = np.diff(H.indptr)
        width = int(counts.max()) if len(counts) else 0
        rows = H.shape[0]
        ids = np.zeros((rows, width), dtype=np.int64)
        sums = np.zeros((rows, width), dtype=np.float64)
        mask = np.arange(width)[None, :] < counts[:, None]
        ids[mask] = H.indices
        sums[mask] = H.data
        return cls(ids, sums, mask)


class GraphContext:
    """Everything needed to featurize examples against one stock snapshot.

    ``history`` provides both the micro graph (its positive records) and the
    recent sequences; recent lookups only see records strictly before each
    example's cutoff.
    """

    def __init__(self, history: InteractionLog, registry: MacroNodeRegistry, recent_len: int = 20, graph: MicroGraph | None = None):
        self.history = history
        self.registry = registry
        self.recent_len = recent_len
        self.graph = build_micro_graph(history) if graph is None else graph
        self.hops = {}
        for side in (USER, ITEM):
            H1, H2 = hop_matrices(self.graph, registry, side)
            self.hops[side] = (HopTable.from_csr(H1), HopTable.from_csr(H2))
        self.recent = {USER: RecentIndex(history, USER), ITEM: RecentIndex(history, ITEM)}

    def examples(self, users, items, labels, cutoffs) -> "ExampleSet":
        """Featurize pairs against the stock graph; recents stop before ``cutoffs``."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ru, ru_mask = self.recent[USER].batch(users, self.recent_len, cutoffs)
        ri, ri_mask = self.recent[ITEM].batch(items, self.recent_len, cutoffs)
        labels = None if labels is None else np.asarray(labels, dtype=np.float64)
        return ExampleSet(self, users, items, labels, ru, ru_mask, ri, ri_mask)

    def examples_from_log(self, log: InteractionLog, cutoff: int | None = None) -> "ExampleSet":
        """Examples for every record of ``log``.

        With ``cutoff`` all records are scored against the stock graph as a
        held-out period. Without it ``log`` must be this context's history and
        every record sees only what happened strictly before its own
        timestamp: recents and macro sums alike (see :func:`replay_hops`).
        """
        if cutoff is not None:
            return self.examples(log.users, log.items, log.labels, np.full(len(log), cutoff, dtype=np.int64))
        out = self.examples(log.users, log.items, log.labels, log.timestamps)
        out.hops = replay_hops(log, self.registry)
        return out


@dataclass
class ExampleSet:
    context: GraphContext
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray | None
    recent_items: np.ndarray
    recent_items_mask: np.ndarray
    recent_users: np.ndarray
    recent_users_mask: np.ndarray
    hops: dict | None = None  # block -> HopTable with one row per example

    def __len__(self):
        return len(self.users)

    def batch(self, idx) -> Batch:
        u, i = self.users[idx], self.items[idx]
        b = Batch(u, i, None if self.labels is None else self.labels[idx])
        if self.hops is not None:
            blocks = [(name, table, idx) for name, table in self.hops.items()]
        else:
            (uh1, uh2), (ih1, ih2) = self.context.hops[USER], self.context.hops[ITEM]
            blocks = [("u_hop1", uh1, u), ("u_hop2", uh2, u), ("i_hop1", ih1, i), ("i_hop2", ih2, i)]
        for name, table, rows in blocks:
            b.ids[name] = table.ids[rows]
            b.sums[name] = table.sums[rows]
            b.mask[name] = table.mask[rows]
        b.ids["u_recent"], b.mask["u_recent"] = self.recent_items[idx], self.recent_items_mask[idx]
        b.ids["i_recent"], b.mask["i_recent"] = self.recent_users[idx], self.recent_users_mask[idx]
        return b

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for s in range(0, len(order), batch_size):
            yield self.batch(order[s:s + batch_size])


def replay_hops(log: InteractionLog, registry: MacroNodeRegistry, chunk: int = 4096) -> dict:
    """Per-record macro sums of both endpoints as of just before the record's timestamp.

    Positive records are replayed in time order (ties by log order) as new
    micro edges, maintaining dense hop-1/hop-2 sums for every node with the
    same increments as :func:`~macgnn.macro_graph.accumulate_delta`. Edges
    stamped at time ``t`` become visible to records strictly after ``t``.
    """
    W = registry.table_size
    gu_all, gi_all = registry.gid[USER], registry.gid[ITEM]
    h1 = {USER: np.zeros((log.n, W)), ITEM: np.zeros((log.m, W))}
    h2 = {USER: np.zeros((log.n, W)), ITEM: np.zeros((log.m, W))}
    adj_u: list[list[int]] = [[] for _ in range(log.n)]
    adj_i: list[list[int]] = [[] for _ in range(log.m)]
    seen: set[tuple[int, int]] = set()

    order = np.lexsort((np.arange(len(log)), log.timestamps))
    users, items, labels, ts = log.users.tolist(), log.items.tolist(), log.labels.tolist(), log.timestamps.tolist()
    names = ("u_hop1", "u_hop2", "i_hop1", "i_hop2")
    parts = {name: [] for name in names}
    buf = {name: np.zeros((min(chunk, len(log)), W)) for name in names}
    rows_in_buf: list[int] = []
    out_rows = np.empty(len(log), dtype=np.int64)

    def flush():
        k = len(rows_in_buf)
        for name in names:
            parts[name].append(sp.csr_matrix(buf[name][:k]))
        rows_in_buf.clear()

    pending = 0  # position in ``order`` of the next edge to apply
    for pos, r in enumerate(order.tolist()):
        t = ts[r]
        while pending < pos and ts[order[pending]] < t:
            e = int(order[pending])
            pending += 1
            u, i = users[e], items[e]
            if labels[e] != 1 or (u, i) in seen:
                continue
            seen.add((u, i))
            gu, gi = gu_all[u], gi_all[i]
            old_i, old_u = adj_i[i], adj_u[u]
            h1[USER][u, gi] += 1
            h1[ITEM][i, gu] += 1
            if old_i:
                h2[USER][old_i, gu] += 1
            if old_u:
                h2[ITEM][old_u, gi] += 1
            adj_i[i].append(u)
            adj_u[u].append(i)
            h2[USER][u] += h1[ITEM][i]
            h2[ITEM][i] += h1[USER][u]
        slot = len(rows_in_buf)
        u, i = users[r], items[r]
        buf["u_hop1"][slot] = h1[USER][u]
        buf["u_hop2"][slot] = h2[USER][u]
        buf["i_hop1"][slot] = h1[ITEM][i]
        buf["i_hop2"][slot] = h2[ITEM][i]
        out_rows[r] = sum(p.shape[0] for p in parts["u_hop1"]) + slot
        rows_in_buf.append(r)
        if len(rows_in_buf) == chunk:
            flush()
    if rows_in_buf:
        flush()
    tables = {}
    for name in names:
        H = sp.vstack(parts[name], format="csr") if parts[name] else sp.csr_matrix((0, W))
        H = H[out_rows] if len(out_rows) else H
        H.sort_indices()
        tables[name] = HopTable.from_csr(sp.csr_matrix(H))
    return tables
