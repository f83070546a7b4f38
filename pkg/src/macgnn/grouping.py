"""Behavior-pattern grouping of micro nodes into macro nodes.

Each node is represented by its L2-normalized interaction row; nodes are
grouped by alternating nearest-centroid assignment and mean updates. The
reported objective is the sum of (unsquared) Euclidean distances from every
node to its centroid.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .micro_graph import ITEM, USER, MicroGraph

_TIE_EPS = 1e-13
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class BehaviorEmbedding:
    indices: np.ndarray
    values: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2)))

    def __len__(self):
        return len(self.indices)

    def dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        out[self.indices] = self.values
        return out


@dataclass
class Grouping:
    """Macro assignment of one side's micro nodes.

    ``assignments[v] == K`` marks an isolated node (no positive interactions).
    """

    assignments: np.ndarray
    K: int
    objective: float
    centroids: np.ndarray | None = None
    iterations: int = 0
    seed: int | None = None
    history: list[float] = field(default_factory=list)
    mode: str = "kmeans"

    @property
    def isolated_index(self) -> int:
        return self.K

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def save(self, path: str, side: str | None = None) -> None:
        """Write ``node_id,macro_index`` CSV plus a JSON metadata file alongside it."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "macro_index"])
            for v, k in enumerate(self.assignments.tolist()):
                w.writerow([v, k])
        meta = {
            "K": self.K,
            "objective": self.objective,
            "iterations": self.iterations,
            "seed": self.seed,
            "mode": self.mode,
            "side": side,
        }
        with open(metadata_path(path), "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Grouping":
        try:
            with open(metadata_path(path)) as fh:
                meta = json.load(fh)
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                if next(reader, None) != ["node_id", "macro_index"]:
                    raise DataError(f"{path}: bad header")
                rows = [(int(a), int(b)) for a, b in reader]
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read grouping {path}: {exc}") from None
        assignments = np.zeros(len(rows), dtype=np.int64)
        for v, k in rows:
            assignments[v] = k
        K = int(meta["K"])
        if len(rows) and (assignments.min() < 0 or assignments.max() > K):
            raise DataError(f"{path}: macro index outside [0, {K}]")
        return cls(assignments, K, float(meta["objective"]), None, int(meta["iterations"]), meta.get("seed"), mode=meta.get("mode", "kmeans"))


def metadata_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".json"


def behavior_embedding(graph: MicroGraph, side: str, node: int) -> BehaviorEmbedding:
    idx = graph.adj(side, node).copy()
    if len(idx) == 0:
        return BehaviorEmbedding(idx, np.zeros(0))
    return BehaviorEmbedding(idx, np.full(len(idx), 1.0 / np.sqrt(len(idx))))


def behavior_matrix(graph: MicroGraph, side: str) -> sp.csr_matrix:
    """All behavior embeddings of one side as rows of a sparse matrix (isolated rows empty)."""
    R = graph.csr(side)
    deg = np.diff(R.indptr)
    scale = np.zeros(len(deg))
    scale[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return sp.csr_matrix(sp.diags(scale) @ R)


def as_matrix(embeddings, dim: int | None = None) -> sp.csr_matrix:
    """Accept a sparse/dense matrix or a list of :class:`BehaviorEmbedding`."""
    if sp.issparse(embeddings):
        return sp.csr_matrix(embeddings, dtype=np.float64)
    if isinstance(embeddings, np.ndarray):
        return sp.csr_matrix(embeddings.astype(np.float64))
    embeddings = list(embeddings)
    if dim is None:
        dim = max((int(e.indices.max()) + 1 for e in embeddings if len(e)), default=0)
    rows = [np.full(len(e), r) for r, e in enumerate(embeddings)]
    cols = [e.indices for e in embeddings]
    vals = [e.values for e in embeddings]
    if not embeddings:
        return sp.csr_matrix((0, dim))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows).astype(np.int64), np.concatenate(cols).astype(np.int64))),
        shape=(len(embeddings), dim),
    )


def _active(X: sp.csr_matrix) -> np.ndarray:
    return np.diff(X.indptr) > 0


def init_centroids(embeddings, K: int, seed: int) -> np.ndarray:
    """Pick ``K`` distinct non-isolated members uniformly at random as starting centroids."""
    X = as_matrix(embeddings)
    if K < 1:
        raise ValueError("K must be >= 1")
    active = np.flatnonzero(_active(X))
    if K > len(active):
        raise ValueError(f"K={K} exceeds the number of non-isolated nodes ({len(active)})")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(active, size=K, replace=False))
    return X[chosen].toarray()


def _sq_distances(X: sp.csr_matrix, centroids: np.ndarray) -> np.ndarray:
    xx = np.asarray(X.multiply(X).sum(axis=1)).ravel()
    cc = np.einsum("kd,kd->k", centroids, centroids)
    d2 = xx[:, None] + cc[None, :] - 2.0 * np.asarray(X @ centroids.T)
    return np.maximum(d2, 0.0)


def assign(embeddings, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per node (lowest index on ties); isolated nodes get index ``K``."""
    X = as_matrix(embeddings, centroids.shape[1])
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    K = len(centroids)
    if K == 0:
        raise ValueError("centroids must be non-empty")
    d2 = _sq_distances(X, centroids)
    near = d2 <= d2.min(axis=1, keepdims=True) + _TIE_EPS
    out = near.argmax(axis=1).astype(np.int64)
    out[~_active(X)] = K
    return out


def update_centroids(embeddings, assignments: np.ndarray, K: int, previous: np.ndarray | None = None) -> np.ndarray:
    """Mean of member embeddings per macro node; empty macro nodes keep ``previous``."""
    X = as_matrix(embeddings)
    assignments = np.asarray(assignments)
    live = assignments < K
    rows = np.flatnonzero(live)
    P = sp.csr_matrix((np.ones(len(rows)), (assignments[live], rows)), shape=(K, X.shape[0]))
    sums = np.asarray((P @ X).todense())
    counts = np.bincount(assignments[live], minlength=K)
    out = np.zeros((K, X.shape[1])) if previous is None else np.array(previous, dtype=np.float64, copy=True)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled, None]
    return out


def node_distances(embeddings, assignments: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance of every assigned node to its centroid (0 for isolated)."""
    X = as_matrix(embeddings, centroids.shape[1])
    K = len(centroids)
    out = np.zeros(X.shape[0])
    rows = np.flatnonzero(np.asarray(assignments) < K)
    step = max(1, _CHUNK_ELEMS // max(1, X.shape[1]))
    for s in range(0, len(rows), step):
        r = rows[s:s + step]
        diff = X[r].toarray() - centroids[assignments[r]]
        out[r] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return out


def objective(embeddings, assignments: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum(node_distances(embeddings, assignments, centroids)))


def _lloyd(X, start: np.ndarray, max_iter: int, tol: float):
    K = len(start)
    assignments = assign(X, start)
    centroids = update_centroids(X, assignments, K, previous=start)
    J = objective(X, assignments, centroids)
    history = [J]
    it = 1
    while it < max_iter and J > 0:
        new_assign = assign(X, centroids)
        new_centroids = update_centroids(X, new_assign, K, previous=centroids)
        new_J = objective(X, new_assign, new_centroids)
        it += 1
        if new_J > J:
            # mean update is not the exact minimizer of the unsquared sum; keep the better state
            break
        decrease = (J - new_J) / J
        assignments, centroids, J = new_assign, new_centroids, new_J
        history.append(J)
        if decrease < tol:
            break
    return assignments, centroids, J, it, history


def group(
    embeddings,
    K: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    n_init: int = 10,
    init: np.ndarray | None = None,
) -> Grouping:
    """Group nodes into ``K`` macro nodes.

    ``n_init`` independent uniform-member initializations are run (child seeds
    of ``seed``) and the one with the lowest objective is kept. Passing
    ``init`` runs a single refinement from those centroids.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    X = as_matrix(embeddings)
    if init is not None:
        starts = [np.asarray(init, dtype=np.float64)]
        K = len(starts[0])
    else:
        if n_init < 1:
            raise ValueError("n_init must be >= 1")
        children = np.random.SeedSequence(seed).spawn(n_init)
        starts = [init_centroids(X, K, int(c.generate_state(1)[0])) for c in children]
    best = None
    for start in starts:
        run = _lloyd(X, start, max_iter, tol)
        if best is None or run[2] < best[2]:
            best = run
    assignments, centroids, J, it, history = best
    return Grouping(assignments, K, J, centroids, it, seed, history)


def group_by_category(graph: MicroGraph, categories: Mapping[int, str], side: str = ITEM) -> Grouping:
    """One macro node per distinct category (sorted by label); isolated nodes go to the bucket."""
    size = graph.size(side)
    labels = sorted({str(c) for c in categories.values()})
    index = {c: k for k, c in enumerate(labels)}
    K = len(labels)
    deg = graph.degrees(side)
    assignments = np.full(size, K, dtype=np.int64)
    missing = []
    for v in range(size):
        if deg[v] == 0:
            continue
        c = categories.get(v)
        if c is None:
            missing.append(v)
        else:
            assignments[v] = index[str(c)]
    if missing:
        raise DataError(f"{len(missing)} non-isolated {side} nodes lack a category (first: {missing[0]})")
    X = behavior_matrix(graph, side)
    centroids = update_centroids(X, assignments, K) if K else np.zeros((0, X.shape[1]))
    J = objective(X, assignments, centroids) if K else 0.0
    return Grouping(assignments, K, J, centroids, 0, None, [J], mode="category")


def read_categories(path: str, node_index: Mapping[str, int] | None = None) -> dict[int, str]:
    """Read a ``node_id,category`` CSV; raw ids are mapped through ``node_index`` when given."""
    out: dict[int, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 2:
            raise DataError(f"{path}: expected header node_id,category")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path} line {lineno}: expected 2 fields")
            raw, cat = row[0].strip(), row[1].strip()
            if node_index is not None:
                if raw not in node_index:
                    continue
                out[node_index[raw]] = cat
            else:
                try:
                    out[int(raw)] = cat
                except ValueError:
                    raise DataError(f"{path} line {lineno}: node id is not an integer") from None
    return out


def group_side(graph: MicroGraph, side: str, K: int, seed: int = 0, **kwargs) -> Grouping:
    return group(behavior_matrix(graph, side), K, seed=seed, **kwargs)

