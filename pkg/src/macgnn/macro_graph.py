"""Macro nodes, per-target macro edge weights and stock + incremental updates.

Macro ids are global: user macros ``[0, n_user)``, item macros
``[n_user, n_user + n_item)``, then one isolated bucket per side. For a
target ``v`` the hop-1 weights count ``v``'s micro neighbors per macro node;
hop-2 weights count micro edges ``(a, b)`` with ``a`` a neighbor of ``v``,
keyed by the macro pair ``(macro(a), macro(b))``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DuplicateEdgeError
from .grouping import Grouping
from .micro_graph import ITEM, USER, Interaction, MicroGraph, other_side

Node = tuple  # (side, index)


class MacroNodeRegistry:
    def __init__(self, user_grouping: Grouping, item_grouping: Grouping):
        self.user_grouping = user_grouping
        self.item_grouping = item_grouping
        self.n_user = user_grouping.K
        self.n_item = item_grouping.K
        self.user_bucket = self.n_user + self.n_item
        self.item_bucket = self.user_bucket + 1
        ua = np.asarray(user_grouping.assignments, dtype=np.int64)
        ia = np.asarray(item_grouping.assignments, dtype=np.int64)
        self.gid = {
            USER: np.where(ua < self.n_user, ua, self.user_bucket),
            ITEM: np.where(ia < self.n_item, ia + self.n_user, self.item_bucket),
        }

    @property
    def macro_count(self) -> int:
        """Number of proper macro nodes (buckets excluded)."""
        return self.n_user + self.n_item

    @property
    def table_size(self) -> int:
        return self.macro_count + 2

    def macro_of(self, side: str, node: int) -> int:
        return int(self.gid[side][node])

    def side_of(self, macro_id: int) -> str:
        if macro_id < self.n_user or macro_id == self.user_bucket:
            return USER
        return ITEM

    def members(self, macro_id: int) -> np.ndarray:
        return np.flatnonzero(self.gid[self.side_of(macro_id)] == macro_id)

    def member_counts(self) -> np.ndarray:
        counts = np.zeros(self.table_size, dtype=np.int64)
        for side in (USER, ITEM):
            counts += np.bincount(self.gid[side], minlength=self.table_size)
        return counts

    def is_user_macro(self, macro_ids) -> np.ndarray:
        macro_ids = np.asarray(macro_ids)
        return (macro_ids < self.n_user) | (macro_ids == self.user_bucket)


def build_registry(user_grouping: Grouping, item_grouping: Grouping) -> MacroNodeRegistry:
    return MacroNodeRegistry(user_grouping, item_grouping)


@dataclass
class MacroSubgraph:
    target: Node
    hop1: dict = field(default_factory=dict)
    hop2_pairs: dict = field(default_factory=dict)

    @property
    def hop2_sums(self) -> dict:
        sums: Counter = Counter()
        for (_, q), w in self.hop2_pairs.items():
            sums[q] += w
        return dict(sums)

    def to_dict(self) -> dict:
        return {
            "target": [self.target[0], int(self.target[1])],
            "hop1": {str(q): int(w) for q, w in sorted(self.hop1.items())},
            "hop2": [[int(p), int(q), int(w)] for (p, q), w in sorted(self.hop2_pairs.items())],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MacroSubgraph":
        try:
            side, idx = d["target"]
            if side not in (USER, ITEM):
                raise ValueError(f"bad side {side!r}")
            hop1 = {int(q): int(w) for q, w in d["hop1"].items()}
            hop2 = {}
            for p, q, w in d["hop2"]:
                hop2[(int(p), int(q))] = int(w)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed macro subgraph: {exc}") from None
        if any(w <= 0 for w in hop1.values()) or any(w <= 0 for w in hop2.values()):
            raise DataError("macro edge weights must be positive integers")
        return cls((side, int(idx)), hop1, hop2)

    @classmethod
    def from_json(cls, text: str) -> "MacroSubgraph":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed macro subgraph JSON: {exc}") from None


def build_macro_subgraph(graph: MicroGraph, registry: MacroNodeRegistry, side: str, node: int) -> MacroSubgraph:
    """Macro edge weights of one target, straight from its micro neighborhood."""
    opp = other_side(side)
    first = graph.adj(side, node)
    hop1 = Counter(registry.gid[opp][first].tolist())
    hop2: Counter = Counter()
    for a in first.tolist():
        p = int(registry.gid[opp][a])
        for q in registry.gid[side][graph.adj(opp, a)].tolist():
            hop2[(p, q)] += 1
    return MacroSubgraph((side, int(node)), dict(hop1), dict(hop2))


def _onehot(gid: np.ndarray, width: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(gid), dtype=np.int64), (np.arange(len(gid)), gid)), shape=(len(gid), width))


def hop_matrices(graph: MicroGraph, registry: MacroNodeRegistry, side: str) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Hop-1 and hop-2 macro sums for every target of ``side`` as (targets x macro ids) matrices."""
    opp = other_side(side)
    W = registry.table_size
    R = graph.csr(side).astype(np.int64)
    H1 = sp.csr_matrix(R @ _onehot(registry.gid[opp], W))
    M = graph.csr(opp).astype(np.int64) @ _onehot(registry.gid[side], W)
    H2 = sp.csr_matrix(R @ M)
    H1.sort_indices()
    H2.sort_indices()
    return H1, H2


def build_all_subgraphs(graph: MicroGraph, registry: MacroNodeRegistry, side: str) -> list[MacroSubgraph]:
    """Every target's subgraph on one side via sparse products (one product per hop-1 macro)."""
    opp = other_side(side)
    W = registry.table_size
    R = graph.csr(side).astype(np.int64).tocsc()
    M = sp.csr_matrix(graph.csr(opp).astype(np.int64) @ _onehot(registry.gid[side], W))
    H1, _ = hop_matrices(graph, registry, side)
    size = graph.size(side)
    out = [MacroSubgraph((side, v)) for v in range(size)]
    for v in range(size):
        lo, hi = H1.indptr[v], H1.indptr[v + 1]
        out[v].hop1 = dict(zip(H1.indices[lo:hi].tolist(), H1.data[lo:hi].astype(np.int64).tolist()))
    gid_opp = registry.gid[opp]
    for p in np.unique(gid_opp).tolist():
        cols = np.flatnonzero(gid_opp == p)
        T = sp.coo_matrix(R[:, cols] @ M[cols])
        for v, q, w in zip(T.row.tolist(), T.col.tolist(), T.data.tolist()):
            if w:
                out[v].hop2_pairs[(p, q)] = int(w)
    for sg in out:
        sg.hop2_pairs = dict(sorted(sg.hop2_pairs.items()))
    return out


def related_node_count(subgraph: MacroSubgraph) -> int:
    return len(set(subgraph.hop1) | set(subgraph.hop2_sums))


class EdgeDeltaStore:
    """Pending macro-edge increments from new positive interactions, keyed by target node.

    The store keeps an overlay of the new micro edges so that later
    submissions see earlier ones; the stock graph itself is never mutated.
    """

    def __init__(self):
        self.hop1: dict[Node, Counter] = {}
        self.hop2: dict[Node, Counter] = {}
        self.added: dict[Node, list[int]] = {}
        self.edges: set[tuple[int, int]] = set()
        self.watermark: int | None = None

    def __len__(self):
        return len(self.edges)

    def neighbors(self, graph: MicroGraph, side: str, node: int) -> list[int]:
        base = graph.adj(side, node).tolist() if node < graph.size(side) else []
        return base + self.added.get((side, node), [])

    def delta(self, target: Node) -> MacroSubgraph:
        return MacroSubgraph(
            target,
            dict(self.hop1.get(target, {})),
            dict(self.hop2.get(target, {})),
        )

    def targets(self) -> list[Node]:
        return sorted(set(self.hop1) | set(self.hop2))

    def _bump1(self, target: Node, q: int):
        self.hop1.setdefault(target, Counter())[q] += 1

    def _bump2(self, target: Node, p: int, q: int, w: int = 1):
        self.hop2.setdefault(target, Counter())[(p, q)] += w


def accumulate_delta(store: EdgeDeltaStore, interaction: Interaction, graph: MicroGraph, registry: MacroNodeRegistry) -> EdgeDeltaStore:
    """Record the macro-edge increments caused by one new positive micro edge."""
    u, i = interaction.user, interaction.item
    if interaction.label != 1:
        raise DataError("only positive interactions create micro edges")
    if not (0 <= u < graph.n and 0 <= i < graph.m):
        raise DataError(f"interaction ({u}, {i}) outside the registered node ranges")
    if (u, i) in store.edges or graph.has_edge(u, i):
        raise DuplicateEdgeError(f"edge ({u}, {i}) already present")
    gu = registry.macro_of(USER, u)
    gi = registry.macro_of(ITEM, i)
    old_i = store.neighbors(graph, ITEM, i)  # users already adjacent to i
    old_u = store.neighbors(graph, USER, u)  # items already adjacent to u
    store.edges.add((u, i))
    store.added.setdefault((USER, u), []).append(i)
    store.added.setdefault((ITEM, i), []).append(u)

    store._bump1((USER, u), gi)
    store._bump1((ITEM, i), gu)
    # i joins u's first hop: every edge (i, b) now lands in u's second hop, b = u included
    for b in old_i + [u]:
        store._bump2((USER, u), gi, registry.macro_of(USER, b))
    for b in old_u + [i]:
        store._bump2((ITEM, i), gu, registry.macro_of(ITEM, b))
    # the new edge is a second-hop edge for the existing neighbors of its endpoints
    for v in old_i:
        store._bump2((USER, v), gi, gu)
    for j in old_u:
        store._bump2((ITEM, j), gu, gi)
    if store.watermark is None or interaction.timestamp > store.watermark:
        store.watermark = interaction.timestamp
    return store


def merge(stock: MacroSubgraph, delta, snapshot_time: int | None = None) -> MacroSubgraph:
    """Entrywise sum of a stock subgraph and its pending increments.

    ``delta`` is either an :class:`EdgeDeltaStore` or a :class:`MacroSubgraph`
    holding increments for the same target.
    """
    if isinstance(delta, EdgeDeltaStore):
        if snapshot_time is not None and delta.watermark is not None and delta.watermark < snapshot_time:
            raise DataError("delta watermark precedes the stock snapshot")
        delta = delta.delta(tuple(stock.target))
    if tuple(delta.target) != tuple(stock.target):
        raise DataError(f"target mismatch: stock {stock.target} vs delta {delta.target}")
    hop1 = Counter(stock.hop1)
    hop1.update(delta.hop1)
    hop2 = Counter(stock.hop2_pairs)
    hop2.update(delta.hop2_pairs)
    return MacroSubgraph(
        tuple(stock.target),
        dict(sorted((k, v) for k, v in hop1.items() if v)),
        dict(sorted((k, v) for k, v in hop2.items() if v)),
    )


def apply_store(graph: MicroGraph, store: EdgeDeltaStore) -> MicroGraph:
    """Stock graph plus the store's new edges (the next stock snapshot)."""
    R = graph.csr(USER)
    users, items = R.nonzero()
    if store.edges:
        extra = np.array(sorted(store.edges), dtype=np.int64)
        users = np.concatenate([users, extra[:, 0]])
        items = np.concatenate([items, extra[:, 1]])
    return MicroGraph.from_pairs(users, items, graph.n, graph.m)
