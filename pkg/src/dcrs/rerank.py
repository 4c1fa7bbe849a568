"""Post-hoc diversifying re-rankers (MMR and greedy DPP) over a base model's candidates."""
from __future__ import annotations

import math
from typing import NamedTuple, Optional

import numpy as np

PSD_TOL = 1e-8
GAIN_FLOOR = 1e-10


class KernelError(ValueError):
    pass


class Candidate(NamedTuple):
    item: int
    relevance: float
    target: np.ndarray


def category_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def similarity_matrix(targets: np.ndarray) -> np.ndarray:
    """Cosine similarity of soft category targets; exactly symmetric with unit diagonal."""
    t = np.asarray(targets, dtype=float)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    s = np.clip(t @ t.T, 0.0, 1.0)
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return s


def _unpack(candidates):
    items = np.array([c.item for c in candidates], dtype=np.int64)
    rel = np.array([c.relevance for c in candidates], dtype=float)
    if not np.all(np.isfinite(rel)):
        raise ValueError("relevance must be finite")
    targets = np.array([c.target for c in candidates], dtype=float)
    return items, rel, targets


def _argmax_lowest_item(values: np.ndarray, items: np.ndarray, mask: np.ndarray) -> int:
    cand = np.flatnonzero(mask)
    best = values[cand].max()
    ties = cand[values[cand] == best]
    return int(ties[np.argmin(items[ties])])


def mmr_rerank(candidates, k: int, theta: float, sim: Optional[np.ndarray] = None) -> list[int]:
    """Greedy maximal marginal relevance: ``theta * rel - (1 - theta) * max sim to selected``."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    if len(candidates) == 0:
        return []
    items, rel, targets = _unpack(candidates)
    if k > len(items):
        raise ValueError("k exceeds number of candidates")
    s = similarity_matrix(targets) if sim is None else sim
    free = np.ones(len(items), dtype=bool)
    max_sim = np.zeros(len(items))
    chosen = []
    for step in range(k):
        score = rel if step == 0 else theta * rel - (1.0 - theta) * max_sim
        j = _argmax_lowest_item(score, items, free)
        chosen.append(j)
        free[j] = False
        max_sim = np.maximum(max_sim, s[j])
    return [int(items[j]) for j in chosen]


def dpp_kernel(relevance: np.ndarray, sim: np.ndarray, theta: float) -> np.ndarray:
    """``Diag(q) S Diag(q)`` with ``q = exp(theta / (2 (1 - theta)) * rel)``."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must be in (0, 1)")
    sim = np.asarray(sim, dtype=float)
    if not np.array_equal(sim, sim.T):
        raise KernelError("similarity matrix is not symmetric")
    if len(sim):
        lo = float(np.linalg.eigvalsh(sim).min())
        if lo < -PSD_TOL:
            raise KernelError(f"similarity kernel not PSD (min eigenvalue {lo:.3e})")
    q = np.exp(theta / (2.0 * (1.0 - theta)) * np.asarray(relevance, dtype=float))
    return q[:, None] * sim * q[None, :]


def greedy_dpp(kernel: np.ndarray, k: int, items: Optional[np.ndarray] = None,
               floor: float = GAIN_FLOOR) -> tuple[list[int], list[float]]:
    """Fast greedy MAP with incremental Cholesky rows.

    A candidate whose residual is at most ``floor`` times its own diagonal lies
    numerically in the span of the picks so far and is dropped; selection stops
    when none are left. Returns selected positions and the log-det gain of each pick.
    """
    n = kernel.shape[0]
    items = np.arange(n) if items is None else np.asarray(items)
    k = min(k, n)
    c = np.zeros((k, n))
    diag = np.array(np.diag(kernel), dtype=float)
    d2 = diag.copy()
    free = diag > 0
    chosen, gains = [], []
    for step in range(k):
        free &= d2 > floor * diag
        if not free.any():
            break
        j = _argmax_lowest_item(d2, items, free)
        chosen.append(j)
        gains.append(math.log(d2[j]))
        free[j] = False
        if step == k - 1:
            break
        dj = math.sqrt(d2[j])
        e = (kernel[j] - c[:step].T @ c[:step, j]) / dj
        c[step] = e
        d2 = d2 - e * e
        d2[~free] = -np.inf
    return chosen, gains


def dpp_rerank(candidates, k: int, theta: float, sim: Optional[np.ndarray] = None) -> list[int]:
    """Greedy DPP selection of up to ``k`` items; may stop early once gains vanish."""
    if len(candidates) == 0:
        return []
    items, rel, targets = _unpack(candidates)
    if k > len(items):
        raise ValueError("k exceeds number of candidates")
    s = similarity_matrix(targets) if sim is None else sim
    chosen, _ = greedy_dpp(dpp_kernel(rel, s, theta), k, items)
    return [int(items[j]) for j in chosen]


def complete_ranking(selected: list[int], items, relevance) -> list[int]:
    """Selected items first, then the remaining candidates by relevance (ties by item index)."""
    items = np.asarray(items, dtype=np.int64)
    relevance = np.asarray(relevance, dtype=float)
    taken = set(selected)
    rest = [i for i in items[np.lexsort((items, -relevance))].tolist() if i not in taken]
    return list(selected) + rest


def rerank(method: str, items, relevance, targets, k: int, theta: float) -> list[int]:
    """Re-rank with ``method`` ('mmr' or 'dpp') and return a full ordering of ``items``."""
    cands = [Candidate(int(i), float(r), t) for i, r, t in zip(items, relevance, targets)]
    k = min(k, len(cands))
    if method == "mmr":
        sel = mmr_rerank(cands, k, theta)
    elif method == "dpp":
        sel = dpp_rerank(cands, k, theta)
    else:
        raise ValueError(f"unknown re-ranker {method!r}")
    return complete_ranking(sel, items, relevance)
