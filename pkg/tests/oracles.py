"""Independent reference computations used by the unit and acceptance tests.

Nothing here touches the package's graph structures: inputs are plain
Python pairs and assignment lists.
"""
import numpy as np

from macgnn.grouping import Grouping
from macgnn.macro_graph import build_registry


def positive_pairs(log):
    return sorted({(u, i) for u, i, y in zip(log.users.tolist(), log.items.tolist(), log.labels.tolist()) if y == 1})


def random_registry(rng, log, n_user=4, n_item=4):
    """Random macro assignment for non-isolated nodes; isolated nodes go to each side's bucket."""
    pairs = positive_pairs(log)
    seen_u = {u for u, _ in pairs}
    seen_i = {i for _, i in pairs}
    ua = np.array([int(rng.integers(0, n_user)) if u in seen_u else n_user for u in range(log.n)], dtype=np.int64)
    ia = np.array([int(rng.integers(0, n_item)) if i in seen_i else n_item for i in range(log.m)], dtype=np.int64)
    return build_registry(Grouping(ua, n_user, 0.0), Grouping(ia, n_item, 0.0))


def macro_edge_oracle(pairs, user_macro, item_macro, side, target):
    """Macro edge weights by a literal double sum over the binary interaction matrix.

    ``user_macro`` / ``item_macro`` map a node to its global macro id.
    Returns (hop1, hop2_pairs) dicts holding only nonzero weights.
    """
    r = set(pairs)
    users = sorted({u for u, _ in pairs} | ({target} if side == "user" else set()))
    items = sorted({i for _, i in pairs} | ({target} if side == "item" else set()))
    if side == "user":
        def link(v, a):
            return (v, a) in r
        first_nodes, second_nodes = items, users
        first_macro, second_macro = item_macro, user_macro
        def link2(a, b):
            return (b, a) in r
    else:
        def link(v, a):
            return (a, v) in r
        first_nodes, second_nodes = users, items
        first_macro, second_macro = user_macro, item_macro
        def link2(a, b):
            return (a, b) in r
    hop1, hop2 = {}, {}
    for a in first_nodes:
        if not link(target, a):
            continue
        p = first_macro[a]
        hop1[p] = hop1.get(p, 0) + 1
        for b in second_nodes:
            if link2(a, b):
                q = second_macro[b]
                hop2[(p, q)] = hop2.get((p, q), 0) + 1
    return hop1, hop2


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def tiny_instance(seed, batch_size=4, hidden=(6, 5), l2=1e-2, kink_margin=1e-3, **flags):
    """Seeded small model (n=m=4, two macros per side, d=d'=3) with a random padded batch.

    Draws repeat from the same seeded stream until every hidden
    pre-activation is at least ``kink_margin`` away from the ReLU kink, so
    that central differences probe a differentiable point.
    """
    from macgnn.model import ModelConfig, forward

    rng = np.random.default_rng(seed)
    config = ModelConfig(n_users=4, n_items=4, n_macros=6, dim=3, attn_dim=3, hidden=hidden, l2=l2, **flags)
    for attempt in range(100):
        params, batch = _draw_tiny(rng, config, batch_size, int(rng.integers(0, 2**31)))
        trace = forward(params, batch, config)
        pre = [trace.hidden[k - 1] @ params[f"W{k}"] + params[f"b{k}"] for k in range(1, params.n_layers)]
        if all(np.min(np.abs(p)) >= kink_margin for p in pre):
            return params, config, batch
    raise RuntimeError("no kink-free draw found")


def _draw_tiny(rng, config, batch_size, init_seed):
    from macgnn.model import Batch
    from macgnn.trainer import init_params

    params = init_params(config, init_seed)
    for name in params:
        # nonzero biases so every path carries gradient
        if name.startswith("b"):
            params[name] = rng.normal(scale=0.1, size=params[name].shape)
    batch = Batch(rng.integers(0, 4, batch_size), rng.integers(0, 4, batch_size), rng.integers(0, 2, batch_size).astype(float))
    pools = {"u_hop1": [2, 3, 5], "u_hop2": [0, 1, 4], "i_hop1": [0, 1, 4], "i_hop2": [2, 3, 5]}
    for name, pool in pools.items():
        width = int(rng.integers(1, 4))
        ids = np.array([rng.choice(pool, width, replace=False) for _ in range(batch_size)])
        mask = np.ones((batch_size, width), dtype=bool)
        mask[0, width - 1:] = width == 1  # ragged first row
        batch.ids[name], batch.mask[name] = ids, mask
        batch.sums[name] = rng.integers(1, 9, (batch_size, width)).astype(float)
    for name in ("u_recent", "i_recent"):
        width = int(rng.integers(0, 4))
        batch.ids[name] = rng.integers(0, 4, (batch_size, width))
        mask = np.ones((batch_size, width), dtype=bool)
        if width:
            mask[-1, 0] = False
        batch.mask[name] = mask
    return params, batch


def straight_line_yhat(params, config, batch, row, dps=40):
    """One example's prediction written directly from the model definition in mpmath."""
    import mpmath as mp

    mp.mp.dps = dps

    def vec(a):
        return [mp.mpf(float(x)) for x in np.ravel(a)]

    def mat(a):
        return [[mp.mpf(float(x)) for x in r] for r in np.asarray(a)]

    def vecmat(v, M):
        return [mp.fsum(v[r] * M[r][c] for r in range(len(v))) for c in range(len(M[0]))]

    def softmax(xs):
        top = max(xs)
        e = [mp.e ** (x - top) for x in xs]
        s = mp.fsum(e)
        return [x / s for x in e]

    d = config.dim
    E_u = vec(params["user_emb"][batch.users[row]])
    E_i = vec(params["item_emb"][batch.items[row]])
    anchor = {"user": E_u, "item": E_i}
    layout = [
        ("u_hop1", "macro_emb", "item", "user", True),
        ("u_hop2", "macro_emb", "user", "user", True),
        ("i_hop1", "macro_emb", "user", "item", True),
        ("i_hop2", "macro_emb", "item", "item", True),
        ("u_recent", "item_emb", "item", "item", False),
        ("i_recent", "user_emb", "user", "user", False),
    ]
    off = set()
    if config.no_graph:
        off |= {b[0] for b in layout}
    if config.no_recent:
        off |= {"u_recent", "i_recent"}
    if config.no_highorder:
        off |= {"u_hop2", "i_hop2"}
    if config.no_itemgraph:
        off |= {"i_hop1", "i_hop2", "i_recent"}
    concat = []
    for name, table, triple, side, weighted in layout:
        ids = [int(q) for q, ok in zip(batch.ids[name][row], batch.mask[name][row]) if ok]
        if name in off or not ids:
            concat += [mp.mpf(0)] * config.attn_dim
            continue
        Q, K, V = (mat(params[f"{x}_{triple}"]) for x in "QKV")
        k = vecmat(anchor[side], K)
        neigh = [vec(params[table][q]) for q in ids]
        logits = [mp.fsum(a * b for a, b in zip(vecmat(e, Q), k)) / mp.sqrt(d) for e in neigh]
        alpha = softmax(logits)
        if weighted and not config.no_weighting:
            sums = [mp.mpf(float(s)) for s, ok in zip(batch.sums[name][row], batch.mask[name][row]) if ok]
            w = softmax([mp.log(s + 1) / config.tau for s in sums])
        elif weighted:
            w = [mp.mpf(1) / len(ids)] * len(ids)
        else:
            w = [mp.mpf(1)] * len(ids)
        out = [mp.mpf(0)] * config.attn_dim
        for wq, aq, e in zip(w, alpha, neigh):
            v = vecmat(e, V)
            out = [o + wq * aq * x for o, x in zip(out, v)]
        concat += out
    h = concat + E_u + E_i
    layers = len([k for k in params if k.startswith("W")])
    for layer in range(1, layers + 1):
        W, b = mat(params[f"W{layer}"]), vec(params[f"b{layer}"])
        h = [x + y for x, y in zip(vecmat(h, W), b)]
        if layer < layers:
            h = [max(x, mp.mpf(0)) for x in h]
    return softmax(h)[1]
