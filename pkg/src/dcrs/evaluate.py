"""Evaluation protocols: labelled-test ranking (AUC/UAUC), retrieval from the item pool,
category-specific test groups and per-user case-study histograms."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as M
from .ingest import Catalog, Interactions, SplitDataset
from .rerank import rerank

log = logging.getLogger(__name__)

TABLE_COLUMNS = ["AUC", "UAUC", "RelaImpr"] + [f"{m}@{k}" for k in (10, 20) for m in ("R", "NDCG", "CE", "CC")]


@dataclass
class Scorer:
    """A named ranking function.  ``rerank`` wraps a base scorer's candidates with MMR/DPP."""

    name: str
    matrix: Callable[[np.ndarray, np.ndarray], np.ndarray]
    known_users: np.ndarray
    rule: str = "p"
    rerank: Optional[str] = None
    theta: float = 0.5
    pool_size: int = 200

    @classmethod
    def from_model(cls, name, model, rule="p", **kw) -> "Scorer":
        cache = {}

        def matrix(users, items):
            if "full" not in cache:
                n, m = model.catalog.n_users, model.catalog.n_items
                cache["full"] = model.score_matrix(np.arange(n), np.arange(m), rule)
            return cache["full"][np.ix_(np.asarray(users), np.asarray(items))]

        return cls(name, matrix, model.known_users, rule, **kw)

    def pairs(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.empty(len(users))
        for u in np.unique(users):
            rows = np.flatnonzero(users == u)
            out[rows] = self.matrix(np.array([u]), items[rows])[0]
        return out


def _by_user(part: Interactions) -> dict[int, np.ndarray]:
    order = np.argsort(part.user, kind="stable")
    users = part.user[order]
    uniq, starts = np.unique(users, return_index=True)
    bounds = list(starts) + [len(users)]
    return {int(u): order[a:b] for u, a, b in zip(uniq, bounds[:-1], bounds[1:])}


def _train_items(split: SplitDataset) -> dict[int, set]:
    tr = split.train.take(~split.train.sampled)
    out: dict[int, set] = {}
    for u, i in zip(tr.user.tolist(), tr.item.tolist()):
        out.setdefault(u, set()).add(i)
    return out


def labelled_eval(scorer: Scorer, part: Interactions, catalog: Catalog) -> dict:
    """AUC over all labelled test pairs and UAUC over users; re-rankers get UAUC only."""
    keep = scorer.known_users[part.user]
    part = part.take(keep)
    rows = _by_user(part)
    per_user = {}
    all_scores = np.empty(len(part))
    for u, idx in rows.items():
        items = part.item[idx]
        s = scorer.matrix(np.array([u]), items)[0]
        all_scores[idx] = s
        if scorer.rerank is not None:
            order = rerank(scorer.rerank, items, s, catalog.targets[items], len(items), scorer.theta)
            pos = {it: r for r, it in enumerate(order)}
            s = -np.array([pos[int(it)] for it in items], dtype=float)
        v = M.auc(s, part.label[idx])
        if v is not None:
            per_user[u] = v
    out = {"UAUC": M.uauc(per_user, strict=False), "per_user_auc": per_user}
    if scorer.rerank is None:
        out["AUC"] = M.auc(all_scores, part.label)
    return out


def retrieval_eval(scorer: Scorer, split: SplitDataset, ks: Sequence[int] = (10, 20),
                   test: Optional[Interactions] = None, item_filter: Optional[np.ndarray] = None) -> dict:
    """Recall/NDCG/CC/CE at each K, ranking every item the user did not interact with in training.

    ``item_filter`` (boolean over items) restricts the pool, as in category-specific evaluation.
    """
    catalog = split.catalog
    test = split.test if test is None else test
    test = test.take(~test.sampled)
    seen = _train_items(split)
    positives: dict[int, set] = {}
    for u, i, y in zip(test.user.tolist(), test.item.tolist(), test.label.tolist()):
        if y == 1:
            positives.setdefault(u, set()).add(i)
    users = [u for u in sorted(set(test.user.tolist())) if scorer.known_users[u]]
    all_items = np.arange(catalog.n_items)
    base_pool = all_items if item_filter is None else all_items[item_filter]
    kmax = max(ks)
    per_user = []
    for u in users:
        s_u = seen.get(u, set())
        pool = np.array([i for i in base_pool.tolist() if i not in s_u], dtype=np.int64)
        if len(pool) == 0:
            continue
        scores = scorer.matrix(np.array([u]), pool)[0]
        ranked = M.rank_items(pool, scores)
        if scorer.rerank is not None:
            top = ranked[:scorer.pool_size]
            top_scores = scorer.matrix(np.array([u]), top)[0]
            ranked = np.array(rerank(scorer.rerank, top, top_scores, catalog.targets[top],
                                     min(kmax, len(top)), scorer.theta))
        row = {"user": u}
        pos = positives.get(u, set())
        for k in ks:
            if pos:
                row[f"R@{k}"] = M.recall_at_k(ranked, pos, k)
                row[f"NDCG@{k}"] = M.ndcg_at_k(ranked, pos, k)
            row[f"CC@{k}"] = M.category_coverage(ranked, catalog.item_categories, catalog.n_categories, k)
            row[f"CE@{k}"] = M.category_entropy(ranked, catalog.targets, k)
        per_user.append(row)
    out = {"per_user": per_user}
    for k in ks:
        for m in ("R", "NDCG", "CC", "CE"):
            vals = [r[f"{m}@{k}"] for r in per_user if f"{m}@{k}" in r]
            out[f"{m}@{k}"] = float(np.mean(vals)) if vals else float("nan")
    return out


def category_specific_split(test: Interactions, catalog: Catalog, top_n: int = 3):
    """Group test interactions by the exact category set of the item; keep the ``top_n`` largest.

    Returns a list of ``(category tuple, Interactions)`` ordered by group size (ties by categories).
    """
    if len(test) == 0:
        raise ValueError("empty test partition")
    combos = [catalog.item_categories[i] for i in test.item.tolist()]
    counts = Counter(combos)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    if len(ranked) < top_n:
        warnings.warn(f"only {len(ranked)} category combination(s) in test; emitting all")
    groups = []
    for combo in ranked[:top_n]:
        mask = np.array([c == combo for c in combos])
        groups.append((combo, test.take(mask)))
    return groups


def category_specific_eval(scorer: Scorer, split: SplitDataset, top_n: int = 3, k: int = 20) -> list[dict]:
    catalog = split.catalog
    out = []
    for combo, part in category_specific_split(split.test, catalog, top_n):
        lab = labelled_eval(scorer, part, catalog)
        item_mask = np.array([c == combo for c in catalog.item_categories])
        ret = retrieval_eval(scorer, split, (k,), test=part, item_filter=item_mask)
        out.append({
            "categories": [catalog.category_names[c] for c in combo],
            "n_test": len(part),
            "AUC": lab.get("AUC"),
            "UAUC": lab["UAUC"],
            f"R@{k}": ret[f"R@{k}"],
            f"NDCG@{k}": ret[f"NDCG@{k}"],
        })
    return out


def case_study_report(user: int, split: SplitDataset, recommendations: dict[str, Sequence[int]],
                      k: int = 10) -> dict[str, np.ndarray]:
    """Soft-category histograms of the user's train positives, test positives and each model's top-K."""
    t = split.catalog.targets

    def positives(part):
        m = (part.user == user) & (part.label == 1) & ~part.sampled
        return part.item[m]

    out = {"train": M.category_distribution(positives(split.train), t),
           "test": M.category_distribution(positives(split.test), t)}
    for name, ranked in recommendations.items():
        out[name] = M.category_distribution(list(ranked)[:k], t)
    return out


def top_k(scorer: Scorer, split: SplitDataset, user: int, k: int = 10) -> list[int]:
    seen = _train_items(split).get(user, set())
    pool = np.array([i for i in range(split.catalog.n_items) if i not in seen], dtype=np.int64)
    ranked = M.rank_items(pool, scorer.matrix(np.array([user]), pool)[0])
    if scorer.rerank is not None:
        top = ranked[:scorer.pool_size]
        s = scorer.matrix(np.array([user]), top)[0]
        ranked = rerank(scorer.rerank, top, s, split.catalog.targets[top], min(k, len(top)), scorer.theta)
    return [int(i) for i in ranked[:k]]


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: dict[str, dict] = field(default_factory=dict)
    per_user: dict[str, list] = field(default_factory=dict)
    category_specific: dict[str, list] = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def add(self, name: str, labelled: dict, retrieval: dict) -> None:
        row = {c: None for c in TABLE_COLUMNS}
        row["AUC"] = labelled.get("AUC")
        row["UAUC"] = labelled["UAUC"]
        for c in TABLE_COLUMNS[3:]:
            row[c] = retrieval.get(c)
        self.rows[name] = row
        uauc_rows = labelled["per_user_auc"]
        merged = []
        for r in retrieval["per_user"]:
            r = dict(r)
            if r["user"] in uauc_rows:
                r["AUC"] = uauc_rows[r["user"]]
            merged.append(r)
        self.per_user[name] = merged

    def set_relaimpr(self, base: str) -> None:
        if base not in self.rows:
            raise KeyError(f"base model {base!r} not evaluated")
        b = self.rows[base]["UAUC"]
        for row in self.rows.values():
            row["RelaImpr"] = M.relaimpr(row["UAUC"], b) if row["UAUC"] is not None else None
        self.header["relaimpr_base"] = base

    def table_lines(self, precision: int = 4) -> list[list[str]]:
        lines = [["Method"] + TABLE_COLUMNS]
        for name, row in self.rows.items():
            cells = [name]
            for c in TABLE_COLUMNS:
                v = row.get(c)
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    cells.append("-")
                elif c == "RelaImpr":
                    cells.append(f"{v:.2f}%")
                else:
                    cells.append(f"{v:.{precision}f}")
            lines.append(cells)
        return lines

    def format_table(self) -> str:
        lines = self.table_lines()
        widths = [max(len(r[j]) for r in lines) for j in range(len(lines[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table = out / "report.tsv"
        with open(table, "w", newline="", encoding="utf-8") as fh:
            for k, v in sorted(self.header.items()):
                fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerows(self.table_lines())
        records = out / "records.json"
        with open(records, "w", encoding="utf-8") as fh:
            json.dump({"header": self.header, "rows": self.rows, "per_user": self.per_user,
                       "category_specific": self.category_specific}, fh, indent=1, sort_keys=True)
        return {"table": table, "records": records}

    @classmethod
    def read(cls, out_dir) -> "EvalReport":
        with open(Path(out_dir) / "records.json", encoding="utf-8") as fh:
            d = json.load(fh)
        order = d["header"].get("models", sorted(d["rows"]))
        rows = {n: d["rows"][n] for n in order}
        return cls(rows, d["per_user"], d["category_specific"], d["header"])


def evaluate(scorers: Sequence[Scorer], split: SplitDataset, ks=(10, 20), base: Optional[str] = None,
             category_top_n: int = 0) -> EvalReport:
    report = EvalReport()
    for sc in scorers:
        lab = labelled_eval(sc, split.test, split.catalog)
        ret = retrieval_eval(sc, split, ks)
        report.add(sc.name, lab, ret)
        if category_top_n:
            report.category_specific[sc.name] = category_specific_eval(sc, split, category_top_n, max(ks))
    if base is not None:
        report.set_relaimpr(base)
    report.header.update({
        "models": [sc.name for sc in scorers],
        "eval_negatives": split.eval_negatives,
        "scoring_rules": {sc.name: sc.rule + (f"+{sc.rerank}(theta={sc.theta})" if sc.rerank else "")
                          for sc in scorers},
        "entropy_base": "e",
        "ce_weighting": "fractional soft-target weights for multi-category items",
        "cc_counting": "every category of a multi-category item counts as covered",
    })
    return report
