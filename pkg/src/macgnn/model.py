"""MacGNN forward pass, losses and hand-derived gradients (numpy, float64).

Every quantity is computed for a whole mini-batch at once. A batch carries
six neighbor blocks, each padded to a fixed width with a validity mask:

=========  ==================  ===============  ==========  ============
block      neighbors           parameters       anchor      weights
=========  ==================  ===============  ==========  ============
u_hop1     user's hop-1 macros item attention   user emb    macro weight
u_hop2     user's hop-2 macros user attention   user emb    macro weight
i_hop1     item's hop-1 macros user attention   item emb    macro weight
i_hop2     item's hop-2 macros item attention   item emb    macro weight
u_recent   user's recent items item attention   item emb    1
i_recent   item's recent users user attention   user emb    1
=========  ==================  ===============  ==========  ============
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

PROB_EPS = 1e-7

# (name, embedding table, attention triple, anchor side, weighted by macro weights)
BLOCKS = (
    ("u_hop1", "macro_emb", "item", "user", True),
    ("u_hop2", "macro_emb", "user", "user", True),
    ("i_hop1", "macro_emb", "user", "item", True),
    ("i_hop2", "macro_emb", "item", "item", True),
    ("u_recent", "item_emb", "item", "item", False),
    ("i_recent", "user_emb", "user", "user", False),
)
BLOCK_NAMES = tuple(b[0] for b in BLOCKS)
ANCHOR_TABLE = {"user": "user_emb", "item": "item_emb"}


@dataclass
class ModelConfig:
    n_users: int
    n_items: int
    n_macros: int  # rows of the macro table, isolated buckets included
    dim: int = 10
    attn_dim: int = 10
    hidden: tuple = (200, 80)
    tau: float = 1.0
    l2: float = 1e-5
    activation: str = "relu"
    no_weighting: bool = False
    no_recent: bool = False
    no_highorder: bool = False
    no_itemgraph: bool = False
    no_graph: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_width(self) -> int:
        return 6 * self.attn_dim + 2 * self.dim

    def disabled_blocks(self) -> set[str]:
        off = set()
        if self.no_graph:
            off.update(BLOCK_NAMES)
        if self.no_recent:
            off.update(("u_recent", "i_recent"))
        if self.no_highorder:
            off.update(("u_hop2", "i_hop2"))
        if self.no_itemgraph:
            off.update(("i_hop1", "i_hop2", "i_recent"))
        return off

    def shapes(self) -> dict[str, tuple]:
        d, a = self.dim, self.attn_dim
        out = {
            "user_emb": (self.n_users, d),
            "item_emb": (self.n_items, d),
            "macro_emb": (self.n_macros, d),
        }
        for side in ("user", "item"):
            for m in "QKV":
                out[f"{m}_{side}"] = (d, a)
        widths = (self.input_width,) + self.hidden + (2,)
        for k in range(len(widths) - 1):
            out[f"W{k + 1}"] = (widths[k], widths[k + 1])
            out[f"b{k + 1}"] = (widths[k + 1],)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams(dict):
    """Name -> float64 array; see :meth:`ModelConfig.shapes` for the layout."""

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.items()})

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self if k.startswith("W"))


def is_table(name: str) -> bool:
    return name.endswith("_emb")


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray | None
    ids: dict = field(default_factory=dict)  # block -> (B, S) int
    mask: dict = field(default_factory=dict)  # block -> (B, S) bool
    sums: dict = field(default_factory=dict)  # hop block -> (B, S) macro edge sums

    def __len__(self):
        return len(self.users)


@dataclass
class ForwardTrace:
    batch: Batch
    weights: dict  # block -> (B, S) macro weights (or 1 for recent blocks)
    alpha: dict  # block -> (B, S) attention
    z: dict  # block -> (B, S, d') aggregated neighbor embeddings (alpha * V E)
    readouts: dict  # block -> (B, d')
    cache: dict
    concat: np.ndarray
    hidden: list
    logits: np.ndarray
    probs: np.ndarray

    @property
    def y_hat(self) -> np.ndarray:
        return self.probs[:, 1]


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; all-masked rows give zeros."""
    x = np.where(mask, logits, -np.inf)
    top = np.max(x, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(x - top), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def macro_weight_matrix(sums: np.ndarray, mask: np.ndarray, tau: float, uniform: bool = False) -> np.ndarray:
    if uniform:
        return masked_softmax(np.zeros_like(sums, dtype=np.float64), mask)
    return masked_softmax(np.log(np.asarray(sums, dtype=np.float64) + 1.0) / tau, mask)


def macro_weights(hop_sums: dict, tau: float) -> dict:
    """Log-smoothed temperature softmax over one hop's macro neighbors."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not hop_sums:
        return {}
    keys = list(hop_sums)
    s = np.array([hop_sums[k] for k in keys], dtype=np.float64)
    w = macro_weight_matrix(s[None, :], np.ones((1, len(keys)), dtype=bool), tau)[0]
    return dict(zip(keys, w.tolist()))


def _attend(anchor, neigh, mask, Q, K, V, dim):
    q = neigh @ Q
    k = anchor @ K
    v = neigh @ V
    logits = np.einsum("bsa,ba->bs", q, k) / np.sqrt(dim)
    alpha = masked_softmax(logits, mask)
    return q, k, v, alpha


def attention_aggregate(anchor: np.ndarray, neighbors: list, triple: tuple) -> dict:
    """Attention of ``anchor`` over ``(id, embedding)`` neighbors; returns ``id -> (alpha, Z)``."""
    if not neighbors:
        return {}
    Q, K, V = triple
    ids = [n[0] for n in neighbors]
    E = np.asarray([n[1] for n in neighbors], dtype=np.float64)[None]
    mask = np.ones(E.shape[:2], dtype=bool)
    _, _, v, alpha = _attend(np.asarray(anchor, dtype=np.float64)[None], E, mask, Q, K, V, E.shape[-1])
    return {i: (float(alpha[0, s]), alpha[0, s] * v[0, s]) for s, i in enumerate(ids)}


def layer_readout(weights: dict, z: dict) -> np.ndarray:
    if set(weights) != set(z):
        raise KeyError("macro weights and aggregated embeddings cover different macro ids")
    return sum(weights[q] * np.asarray(z[q]) for q in sorted(weights))


def recent_readout(anchor: np.ndarray, recent: list, triple: tuple) -> np.ndarray:
    """Unweighted sum of attention-scaled recent neighbors (zero vector when empty)."""
    if len(recent) == 0:
        return np.zeros(triple[2].shape[1])
    agg = attention_aggregate(anchor, list(enumerate(recent)), triple)
    return sum(z for _, z in agg.values())


def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else x


def forward(params: ModelParams, batch: Batch, config: ModelConfig) -> ForwardTrace:
    d = config.dim
    off = config.disabled_blocks()
    anchors = {side: params[table][batch.users if side == "user" else batch.items] for side, table in ANCHOR_TABLE.items()}
    B = len(batch)
    weights, alpha, z, readouts, cache = {}, {}, {}, {}, {}
    for name, table, triple, anchor_side, weighted in BLOCKS:
        if name in off or name not in batch.ids or batch.ids[name].shape[1] == 0:
            readouts[name] = np.zeros((B, config.attn_dim))
            continue
        ids, mask = batch.ids[name], batch.mask[name]
        neigh = params[table][ids]
        Q, K, V = params[f"Q_{triple}"], params[f"K_{triple}"], params[f"V_{triple}"]
        q, k, v, a = _attend(anchors[anchor_side], neigh, mask, Q, K, V, d)
        if weighted:
            c = macro_weight_matrix(batch.sums[name], mask, config.tau, uniform=config.no_weighting)
        else:
            c = mask.astype(np.float64)
        zz = a[..., None] * v
        weights[name], alpha[name], z[name] = c, a, zz
        readouts[name] = np.einsum("bs,bsa->ba", c, zz)
        cache[name] = (neigh, q, k, v)

    parts = [readouts[n] for n in BLOCK_NAMES] + [anchors["user"], anchors["item"]]
    x = np.concatenate(parts, axis=1)
    hidden = [x]
    h = x
    L = params.n_layers
    for k in range(1, L + 1):
        h = h @ params[f"W{k}"] + params[f"b{k}"]
        if k < L:
            h = _act(h, config.activation)
            hidden.append(h)
    logits = h
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return ForwardTrace(batch, weights, alpha, z, readouts, cache, x, hidden, logits, probs)


def bce_loss(y_hat, y) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.clip(np.asarray(y_hat, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def touched_rows(batch: Batch, config: ModelConfig) -> dict[str, np.ndarray]:
    """Sorted unique embedding rows read by the forward pass for this batch."""
    off = config.disabled_blocks()
    rows = {"user_emb": [batch.users], "item_emb": [batch.items], "macro_emb": []}
    for name, table, *_ in BLOCKS:
        if name in off or name not in batch.ids:
            continue
        rows[table].append(batch.ids[name][batch.mask[name]])
    return {k: np.unique(np.concatenate(v)) if v else np.zeros(0, dtype=np.int64) for k, v in rows.items()}


def l2_penalty(params: ModelParams, touched: dict) -> float:
    """Squared norm of dense tensors plus the touched embedding rows."""
    total = 0.0
    for name, value in params.items():
        if is_table(name):
            r = value[touched[name]]
            total += float(np.sum(r * r))
        else:
            total += float(np.sum(value * value))
    return total


def total_loss(bce: float, params: ModelParams, l2: float, touched: dict | None = None) -> float:
    if touched is None:
        touched = {k: np.arange(len(v)) for k, v in params.items() if is_table(k)}
    return bce + l2 * l2_penalty(params, touched)


def loss(params: ModelParams, batch: Batch, config: ModelConfig) -> float:
    trace = forward(params, batch, config)
    return total_loss(bce_loss(trace.y_hat, batch.labels), params, config.l2, touched_rows(batch, config))


def backward(trace: ForwardTrace, params: ModelParams, config: ModelConfig, labels=None) -> ModelParams:
    """Gradients of the regularized loss for every tensor in ``params``."""
    batch = trace.batch
    y = np.asarray(batch.labels if labels is None else labels, dtype=np.float64)
    B = len(batch)
    grads = params.zeros_like()

    target = np.stack([1.0 - y, y], axis=1)
    g = (trace.probs - target) / B
    L = params.n_layers
    for k in range(L, 0, -1):
        h_in = trace.hidden[k - 1]
        grads[f"W{k}"] += h_in.T @ g
        grads[f"b{k}"] += g.sum(axis=0)
        g = g @ params[f"W{k}"].T
        if k > 1 and config.activation == "relu":
            g = g * (h_in > 0)
    gx = g

    a_dim, d = config.attn_dim, config.dim
    g_anchor = {"user": gx[:, 6 * a_dim:6 * a_dim + d].copy(), "item": gx[:, 6 * a_dim + d:].copy()}
    anchors = {"user": params["user_emb"][batch.users], "item": params["item_emb"][batch.items]}
    scale = 1.0 / np.sqrt(d)
    for slot, (name, table, triple, anchor_side, _) in enumerate(BLOCKS):
        if name not in trace.cache:
            continue
        gr = gx[:, slot * a_dim:(slot + 1) * a_dim]
        neigh, q, k, v = trace.cache[name]
        c, a = trace.weights[name], trace.alpha[name]
        mask = batch.mask[name]
        Q, K, V = params[f"Q_{triple}"], params[f"K_{triple}"], params[f"V_{triple}"]

        ca = c * a
        gv = ca[..., None] * gr[:, None, :]
        g_alpha = c * np.einsum("bsa,ba->bs", v, gr)
        g_logit = a * (g_alpha - np.sum(a * g_alpha, axis=1, keepdims=True))
        g_logit = np.where(mask, g_logit, 0.0) * scale
        gq = g_logit[..., None] * k[:, None, :]
        gk = np.einsum("bs,bsa->ba", g_logit, q)

        grads[f"V_{triple}"] += np.einsum("bsd,bsa->da", neigh, gv)
        grads[f"Q_{triple}"] += np.einsum("bsd,bsa->da", neigh, gq)
        grads[f"K_{triple}"] += anchors[anchor_side].T @ gk
        g_neigh = gv @ V.T + gq @ Q.T
        g_anchor[anchor_side] += gk @ K.T
        ids = batch.ids[name]
        np.add.at(grads[table], ids[mask], g_neigh[mask])

    np.add.at(grads["user_emb"], batch.users, g_anchor["user"])
    np.add.at(grads["item_emb"], batch.items, g_anchor["item"])

    if config.l2:
        touched = touched_rows(batch, config)
        for name, value in params.items():
            if is_table(name):
                r = touched[name]
                grads[name][r] += 2.0 * config.l2 * value[r]
            else:
                grads[name] += 2.0 * config.l2 * value
    return grads


def predict(params: ModelParams, batch: Batch, config: ModelConfig) -> np.ndarray:
    return forward(params, batch, config).y_hat


def _pad(seqs: list, dtype) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0)
    out = np.zeros((len(seqs), width), dtype=dtype)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
        mask[r, :len(s)] = True
    return out, mask


def batch_from_subgraphs(
    user: int,
    item: int,
    user_subgraph,
    item_subgraph,
    recents: tuple = ((), ()),
    label: int | None = None,
) -> Batch:
    """Single-example batch from :class:`~macgnn.macro_graph.MacroSubgraph` objects."""
    if tuple(user_subgraph.target) != ("user", user) or tuple(item_subgraph.target) != ("item", item):
        raise ValueError("subgraphs do not belong to the requested (user, item) pair")
    batch = Batch(np.array([user]), np.array([item]), None if label is None else np.array([label], dtype=np.float64))
    hops = {
        "u_hop1": user_subgraph.hop1,
        "u_hop2": user_subgraph.hop2_sums,
        "i_hop1": item_subgraph.hop1,
        "i_hop2": item_subgraph.hop2_sums,
    }
    for name, h in hops.items():
        keys = sorted(h)
        batch.ids[name], batch.mask[name] = _pad([keys], np.int64)
        batch.sums[name], _ = _pad([[h[q] for q in keys]], np.float64)
    for name, seq in zip(("u_recent", "i_recent"), recents):
        batch.ids[name], batch.mask[name] = _pad([list(seq)], np.int64)
    return batch


def forward_pair(params, config, user, item, user_subgraph, item_subgraph, recents=((), ())):
    """Score one (user, item) pair; returns ``(y_hat, trace)``."""
    trace = forward(params, batch_from_subgraphs(user, item, user_subgraph, item_subgraph, recents), config)
    return float(trace.y_hat[0]), trace
