"""Synthetic worlds whose feedback factorizes into a category preference and an item-quality term.

The label probability of (u, i) is ``sum_c t_i[c] * pref[u, c]`` times ``sigmoid(z_u . z_i)``
where the quality latents are drawn independently of the category assignment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import spearmanr

from .graph import ParamStore, Tape
from .ingest import Catalog, Interactions, SplitDataset, build_category_target


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class SynthWorld:
    pref: np.ndarray           # (N, K) category preference in [0, 1]
    user_latent: np.ndarray    # (N, L + 1), last column is 1
    item_latent: np.ndarray    # (M, L + 1), last column is the item's intrinsic quality
    item_categories: list
    seed: int

    @property
    def n_users(self) -> int:
        return self.pref.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_latent.shape[0]

    @property
    def n_categories(self) -> int:
        return self.pref.shape[1]

    @property
    def targets(self) -> np.ndarray:
        return np.stack([build_category_target(c, self.n_categories) for c in self.item_categories])

    @property
    def quality(self) -> np.ndarray:
        """(N, M) category-independent acceptance probability."""
        return _sigmoid(self.user_latent @ self.item_latent.T)

    def category_preference(self, users=None, items=None) -> np.ndarray:
        """(N, M) mixture ``sum_c t_i[c] pref[u, c]``."""
        pref = self.pref if users is None else self.pref[users]
        t = self.targets if items is None else self.targets[items]
        return pref @ t.T

    def label_prob(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        mix = np.einsum("nk,nk->n", self.pref[users], self.targets[items])
        q = _sigmoid(np.einsum("nl,nl->n", self.user_latent[users], self.item_latent[items]))
        return mix * q

    def catalog(self) -> Catalog:
        return Catalog(
            user_ids=[f"u{u}" for u in range(self.n_users)],
            item_ids=[f"i{i}" for i in range(self.n_items)],
            category_names=[f"c{c}" for c in range(self.n_categories)],
            item_categories=[tuple(c) for c in self.item_categories],
        )

    # file format: manifest.json + arrays.npz
    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / "world.npz", pref=self.pref, user_latent=self.user_latent, item_latent=self.item_latent)
        manifest = {"n_users": self.n_users, "n_items": self.n_items, "n_categories": self.n_categories,
                    "latent_dim": self.user_latent.shape[1] - 1, "seed": self.seed,
                    "item_categories": [list(c) for c in self.item_categories]}
        with open(out / "world.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SynthWorld":
        p = Path(path)
        with open(p / "world.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        with np.load(p / "world.npz") as z:
            return cls(z["pref"].copy(), z["user_latent"].copy(), z["item_latent"].copy(),
                       [tuple(c) for c in manifest["item_categories"]], manifest["seed"])


def generate_world(n_users: int = 500, n_items: int = 2000, n_categories: int = 5, latent_dim: int = 8,
                   seed: int = 0, multi_category_rate: float = 0.0, quality_scale: float = 1.0,
                   quality_mean: float = 0.0) -> SynthWorld:
    """Draw preferences, quality latents and a quality-balanced category assignment.

    Each user gets 1-3 dominant categories: a Dirichlet draw with boosted concentration on them,
    rescaled so the top category has preference 1.  Items are sorted by mean quality and dealt
    categories in shuffled blocks of K, which keeps category and quality uncorrelated.
    """
    if min(n_users, n_items, n_categories, latent_dim) < 1:
        raise ValueError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    k = n_categories
    pref = np.empty((n_users, k))
    for u in range(n_users):
        n_dom = min(int(rng.integers(1, 4)), k)
        alpha = np.full(k, 0.5)
        alpha[rng.choice(k, n_dom, replace=False)] += 4.0
        p = rng.dirichlet(alpha)
        pref[u] = p / p.max()
    scale = quality_scale / np.sqrt(latent_dim)
    zu = np.hstack([rng.normal(0, np.sqrt(scale), (n_users, latent_dim)), np.ones((n_users, 1))])
    zi = np.hstack([rng.normal(0, np.sqrt(scale), (n_items, latent_dim)),
                    rng.normal(quality_mean, 1.0, (n_items, 1))])
    mean_quality = _sigmoid(zu @ zi.T).mean(axis=0)
    order = np.argsort(mean_quality, kind="stable")
    primary = np.empty(n_items, dtype=np.int64)
    for s in range(0, n_items, k):
        block = order[s:s + k]
        primary[block] = rng.permutation(k)[:len(block)]
    cats = []
    for i in range(n_items):
        c = {int(primary[i])}
        if k > 1 and rng.random() < multi_category_rate:
            c.add(int((primary[i] + rng.integers(1, k)) % k))
        cats.append(tuple(sorted(c)))
    return SynthWorld(pref, zu, zi, cats, seed)


def sample_interactions(world: SynthWorld, n_exposures: int = 100, seed: int = 0, skew: float = 1.0,
                        return_prob: bool = False):
    """Expose each user to ``n_exposures`` distinct items and draw Bernoulli labels.

    Exposure weight of an item is ``(category preference mixture) ** skew`` (``skew=0`` is uniform).
    Timestamps interleave users round by round so every user spans the whole timeline.
    """
    if n_exposures < 1:
        raise ValueError("n_exposures must be >= 1")
    n, m = world.n_users, world.n_items
    n_e = min(n_exposures, m)
    t = world.targets
    users = np.repeat(np.arange(n), n_e)
    items = np.empty(n * n_e, dtype=np.int64)
    labels = np.empty(n * n_e, dtype=np.int8)
    probs = np.empty(n * n_e)
    for u in range(n):
        rng = np.random.default_rng([seed, u])
        w = (t @ world.pref[u]) ** skew
        chosen = rng.choice(m, n_e, replace=False, p=w / w.sum())
        p = world.label_prob(np.full(n_e, u), chosen)
        rows = slice(u * n_e, (u + 1) * n_e)
        items[rows] = chosen
        probs[rows] = p
        labels[rows] = rng.random(n_e) < p
    order_rng = np.random.default_rng([seed, n])
    slot = np.empty(n * n_e, dtype=np.int64)
    for r in range(n_e):
        slot[np.arange(n) * n_e + r] = r * n + order_rng.permutation(n)
    data = Interactions(users, items, labels, slot)
    return (data, probs) if return_prob else data


def write_interactions(data: Interactions, world: SynthWorld, out_dir) -> dict:
    """Emit ``ratings.tsv`` and ``items.tsv`` in the formats ingest reads (rating = label)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ratings.tsv", "w", encoding="utf-8") as fh:
        for u, i, y, ts in zip(data.user.tolist(), data.item.tolist(), data.label.tolist(),
                               data.timestamp.tolist()):
            fh.write(f"u{u}\ti{i}\t{y}\t{ts}\n")
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        for i, cats in enumerate(world.item_categories):
            fh.write(f"i{i}\t{'|'.join(f'c{c}' for c in cats)}\n")
    return {"ratings": str(out / "ratings.tsv"), "items": str(out / "items.tsv")}


# ---------------------------------------------------------------------------
# probes


def representations(model, users, items) -> dict[str, np.ndarray]:
    """Frozen (dropout-free) representations: ``h`` always, ``h_c``/``h_ci`` for DCRS."""
    out = model.forward(Tape(model.params), np.asarray(users), np.asarray(items))
    return {k: out.nodes[k].value.copy() for k in ("h", "h_c", "h_ci") if k in out.nodes}


def linear_probe(x_train, t_train, x_test, cats_test, epochs: int = 20, lr: float = 0.1,
                 batch_size: int = 256, seed: int = 0) -> float:
    """Fit an affine soft-label classifier with AdaGrad; accuracy = argmax lands in the item's categories."""
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-12
    xtr, xte = (x_train - mu) / sd, (x_test - mu) / sd
    k = t_train.shape[1]
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("W", np.zeros((xtr.shape[1], k)))
    store.add("b", np.zeros(k))
    for _ in range(epochs):
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            tape = Tape(store)
            logits = tape.affine(tape.const(xtr[idx]), tape.param("W"), tape.param("b"))
            tape.backward(tape.soft_xent(logits, t_train[idx]))
            store.adagrad_step(lr)
    pred = np.argmax(xte @ store["W"] + store["b"], axis=1)
    return float(np.mean([p in c for p, c in zip(pred.tolist(), cats_test)]))


@dataclass
class ProbeResult:
    acc_c: Optional[float]
    acc_ci: Optional[float]
    acc_h: float
    chance: float
    rank_corr: float
    n_groups: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def within_category_rank_corr(score: np.ndarray, world: SynthWorld, split: SplitDataset,
                              users: Optional[np.ndarray] = None, min_items: int = 5) -> tuple[float, int]:
    """Mean Spearman correlation between ``score`` (N, M) and true quality over (user, category) groups.

    Each group holds the single-category items of that category the user never saw in training.
    """
    quality = world.quality
    tr = split.train.take(~split.train.sampled)
    seen = np.zeros((world.n_users, world.n_items), dtype=bool)
    seen[tr.user, tr.item] = True
    single = [i for i, c in enumerate(world.item_categories) if len(c) == 1]
    by_cat: dict[int, list] = {}
    for i in single:
        by_cat.setdefault(world.item_categories[i][0], []).append(i)
    users = np.unique(split.test.user) if users is None else users
    corrs = []
    for u in users.tolist():
        for c, items in sorted(by_cat.items()):
            items = np.array([i for i in items if not seen[u, i]])
            if len(items) < min_items:
                continue
            r = spearmanr(score[u, items], quality[u, items]).statistic
            if np.isfinite(r):
                corrs.append(r)
    return (float(np.mean(corrs)) if corrs else float("nan")), len(corrs)


def probe_disentanglement(model, world: SynthWorld, split: SplitDataset, epochs: int = 20, seed: int = 0,
                          rule: Optional[str] = None) -> ProbeResult:
    """Category probes on frozen representations plus within-category quality ranking.

    Probes train on training-partition pairs and are scored on test-partition pairs.
    ``rule`` picks the ranking score (default: the category-independent head when the model has one).
    """
    tr = split.train.take(~split.train.sampled)
    te = split.test.take(~split.test.sampled)
    te = te.take(model.known_users[te.user])
    rep_tr = representations(model, tr.user, tr.item)
    rep_te = representations(model, te.user, te.item)
    t_tr = world.targets[tr.item]
    cats_te = [world.item_categories[i] for i in te.item.tolist()]
    counts = np.bincount([c[0] for c in cats_te], minlength=world.n_categories)
    chance = float(counts.max() / counts.sum())

    def probe(key):
        if key not in rep_tr:
            return None
        return linear_probe(rep_tr[key], t_tr, rep_te[key], cats_te, epochs=epochs, seed=seed)

    if rule is None:
        rule = "ci" if model.kind == "dcrs" else "p"
    score = model.score_matrix(np.arange(world.n_users), np.arange(world.n_items), rule)
    users = np.unique(te.user)
    corr, n_groups = within_category_rank_corr(score, world, split, users)
    return ProbeResult(probe("h_c"), probe("h_ci"), probe("h"), chance, corr, n_groups)
