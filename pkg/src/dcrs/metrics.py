"""Accuracy and diversity metrics."""
from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def auc(scores, labels) -> Optional[float]:
    """Probability that a random positive outscores a random negative (ties count half).

    Returns ``None`` when only one class is present.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_user_auc(users, scores, labels) -> dict[int, float]:
    users = np.asarray(users)
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(users, kind="stable")
    users, scores, labels = users[order], scores[order], labels[order]
    uniq, starts = np.unique(users, return_index=True)
    bounds = list(starts) + [len(users)]
    out = {}
    for u, a, b in zip(uniq, bounds[:-1], bounds[1:]):
        v = auc(scores[a:b], labels[a:b])
        if v is not None:
            out[int(u)] = v
    return out


def uauc(per_user: dict[int, float], strict: bool = True) -> float:
    """Unweighted mean of per-user AUCs (users lacking either class must already be dropped)."""
    if not per_user:
        if strict:
            raise MetricError("no user has both positive and negative test items")
        return float("nan")
    return float(np.mean([per_user[u] for u in sorted(per_user)]))


def uauc_from_arrays(users, scores, labels, strict: bool = True) -> float:
    rows = per_user_auc(users, scores, labels)
    n_users = len(np.unique(users))
    if n_users > len(rows):
        log.debug("uauc: skipped %d single-class user(s)", n_users - len(rows))
    return uauc(rows, strict=strict)


def relaimpr(uauc_model: float, uauc_base: float) -> float:
    """Relative improvement over the base model above the 0.5 floor, in percent."""
    if uauc_base <= 0.5:
        raise MetricError("degenerate base: UAUC <= 0.5")
    return ((uauc_model - 0.5) / (uauc_base - 0.5) - 1.0) * 100.0


def recall_at_k(ranked: Sequence[int], positives, k: int) -> float:
    positives = set(int(p) for p in positives)
    if not positives:
        raise MetricError("recall needs at least one positive")
    return len(positives.intersection(int(i) for i in ranked[:k])) / len(positives)


def ndcg_at_k(ranked: Sequence[int], positives, k: int) -> float:
    positives = set(int(p) for p in positives)
    if not positives:
        raise MetricError("ndcg needs at least one positive")
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(ranked[:k]) if int(i) in positives)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(positives))))
    return dcg / idcg


def category_coverage(ranked: Sequence[int], item_categories: Sequence[Sequence[int]], n_categories: int,
                      k: int) -> float:
    covered = set()
    for i in ranked[:k]:
        covered.update(item_categories[int(i)])
    return len(covered) / n_categories


def category_distribution(items: Sequence[int], targets: np.ndarray) -> np.ndarray:
    """Soft-target weighted category histogram of ``items``, normalized to sum to 1."""
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        return np.zeros(targets.shape[1])
    q = targets[items].sum(axis=0)
    return q / q.sum()


def entropy(q: np.ndarray, base: float = math.e) -> float:
    q = np.asarray(q, dtype=float)
    q = q[q > 0]
    return float(-(q * np.log(q)).sum() / math.log(base))


def category_entropy(ranked: Sequence[int], targets: np.ndarray, k: int, base: float = math.e) -> float:
    return entropy(category_distribution(list(ranked[:k]), targets), base)


def rank_items(items, scores) -> np.ndarray:
    """Order by score descending, ties by item index ascending."""
    items = np.asarray(items, dtype=np.int64)
    scores = np.asarray(scores, dtype=float)
    return items[np.lexsort((items, -scores))]
