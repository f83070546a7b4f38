"""Ranking and calibration metrics for CTR evaluation."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .model import PROB_EPS


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with midranks for ties; ``None`` if only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_user_auc(scores, labels, user_ids) -> dict:
    """``user -> (impressions, auc)`` for users whose labels contain both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    order = np.argsort(user_ids, kind="stable")
    uniq, starts = np.unique(user_ids[order], return_index=True)
    bounds = np.append(starts, len(order))
    out = {}
    for u, lo, hi in zip(uniq.tolist(), bounds[:-1], bounds[1:]):
        idx = order[lo:hi]
        a = auc(scores[idx], labels[idx])
        if a is not None:
            out[u] = (int(hi - lo), a)
    return out


def gauc(scores, labels, user_ids) -> float | None:
    """Impression-weighted mean of per-user AUC over users with both classes."""
    table = per_user_auc(scores, labels, user_ids)
    if not table:
        return None
    impressions = np.array([v[0] for v in table.values()], dtype=np.float64)
    values = np.array([v[1] for v in table.values()])
    return float(np.sum(impressions * values) / np.sum(impressions))


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
