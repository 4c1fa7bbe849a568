"""Loading, binarizing, splitting and negative sampling of interaction data."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

UNKNOWN = "<unk>"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class RawRating(NamedTuple):
    user_id: str
    item_id: str
    rating: float
    timestamp: int
    line: int = 0


class Interaction(NamedTuple):
    user: int
    item: int
    label: int
    timestamp: int


@dataclass
class Interactions:
    """Columnar interaction list.  ``sampled`` marks negatives drawn by :func:`sample_negatives`."""

    user: np.ndarray
    item: np.ndarray
    label: np.ndarray
    timestamp: np.ndarray
    sampled: np.ndarray = None

    def __post_init__(self):
        self.user = np.asarray(self.user, dtype=np.int64)
        self.item = np.asarray(self.item, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int8)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        if self.sampled is None:
            self.sampled = np.zeros(len(self.user), dtype=bool)
        self.sampled = np.asarray(self.sampled, dtype=bool)
        n = len(self.user)
        if not all(len(a) == n for a in (self.item, self.label, self.timestamp, self.sampled)):
            raise DataError("interaction columns have different lengths")

    @classmethod
    def from_records(cls, records: Iterable) -> "Interactions":
        records = list(records)
        if not records:
            return cls.empty()
        u, i, y, t = zip(*((r.user, r.item, r.label, r.timestamp) for r in records))
        return cls(u, i, y, t)

    @classmethod
    def empty(cls) -> "Interactions":
        return cls([], [], [], [])

    @classmethod
    def concat(cls, parts: Sequence["Interactions"]) -> "Interactions":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, c) for p in parts]) for c in _COLUMNS))

    def take(self, idx) -> "Interactions":
        return Interactions(*(getattr(self, c)[idx] for c in _COLUMNS))

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, y, t in zip(self.user, self.item, self.label, self.timestamp):
            yield Interaction(int(u), int(i), int(y), int(t))

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in _COLUMNS:
            h.update(np.ascontiguousarray(getattr(self, c)).tobytes())
        return h.hexdigest()


_COLUMNS = ("user", "item", "label", "timestamp", "sampled")


@dataclass
class Catalog:
    user_ids: list[str]
    item_ids: list[str]
    category_names: list[str]
    item_categories: list[tuple[int, ...]]
    user_features: dict[str, np.ndarray] = field(default_factory=dict)
    user_feature_vocab: dict[str, list[str]] = field(default_factory=dict)
    item_features: dict[str, np.ndarray] = field(default_factory=dict)
    item_feature_vocab: dict[str, list[str]] = field(default_factory=dict)
    relevance: Optional[list[tuple[float, ...]]] = None

    def __post_init__(self):
        for i, cats in enumerate(self.item_categories):
            if not cats:
                raise DataError(f"item without category: {self.item_ids[i]}")
            if min(cats) < 0 or max(cats) >= self.n_categories:
                raise DataError(f"category index out of range for item {self.item_ids[i]}")
        self._targets = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    @property
    def targets(self) -> np.ndarray:
        """(M, K) matrix of soft category targets."""
        if self._targets is None:
            rel = self.relevance or [None] * self.n_items
            self._targets = np.stack(
                [build_category_target(c, self.n_categories, r) for c, r in zip(self.item_categories, rel)]
            ) if self.n_items else np.zeros((0, self.n_categories))
        return self._targets

    def category_sets(self) -> list[frozenset]:
        return [frozenset(c) for c in self.item_categories]

    def to_json(self) -> dict:
        return {
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "category_names": self.category_names,
            "item_categories": [list(c) for c in self.item_categories],
            "user_features": {k: v.tolist() for k, v in self.user_features.items()},
            "user_feature_vocab": self.user_feature_vocab,
            "item_features": {k: v.tolist() for k, v in self.item_features.items()},
            "item_feature_vocab": self.item_feature_vocab,
            "relevance": self.relevance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Catalog":
        return cls(
            user_ids=d["user_ids"],
            item_ids=d["item_ids"],
            category_names=d["category_names"],
            item_categories=[tuple(c) for c in d["item_categories"]],
            user_features={k: np.asarray(v, dtype=np.int64) for k, v in d["user_features"].items()},
            user_feature_vocab=d["user_feature_vocab"],
            item_features={k: np.asarray(v, dtype=np.int64) for k, v in d["item_features"].items()},
            item_feature_vocab=d["item_feature_vocab"],
            relevance=[tuple(r) for r in d["relevance"]] if d.get("relevance") else None,
        )


@dataclass
class SplitDataset:
    catalog: Catalog
    train: Interactions
    valid: Interactions
    test: Interactions
    seed: int = 0
    neg_ratio: int = 0
    eval_negatives: str = "raw"
    meta: dict = field(default_factory=dict)
    manifest_sha256: Optional[str] = None

    def observed(self) -> Interactions:
        """All non-sampled interactions across the three partitions."""
        full = Interactions.concat([self.train, self.valid, self.test])
        return full.take(~full.sampled)


# ---------------------------------------------------------------------------
# readers


def _split_line(line: str) -> list[str]:
    if "::" in line:
        return line.split("::")
    if "\t" in line:
        return line.split("\t")
    return line.split(",")


def _read_lines(path, encoding: str) -> Iterator[tuple[int, list[str]]]:
    try:
        with open(path, encoding=encoding, errors="strict") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if line.strip():
                    yield lineno, _split_line(line)
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: encoding error ({exc})") from exc


def read_ratings(path, encoding: str = "utf-8") -> list[RawRating]:
    """Ratings file with ``user, item, rating, timestamp`` per line (``::``, tab or comma)."""
    out = []
    for lineno, parts in _read_lines(path, encoding):
        if len(parts) < 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rating, ts = float(parts[2]), int(float(parts[3]))
        except ValueError:
            if lineno == 1:
                continue  # header
            raise DataError(f"{path}:{lineno}: non-numeric rating/timestamp") from None
        if ts < 0:
            raise DataError(f"{path}:{lineno}: negative timestamp")
        out.append(RawRating(parts[0].strip(), parts[1].strip(), rating, ts, lineno))
    return out


def read_item_categories(path, encoding: str = "utf-8") -> dict[str, list[str]]:
    """``item<sep>cat1|cat2``; MovieLens ``movies.dat`` (id::title::genres) is accepted too."""
    out = {}
    for lineno, parts in _read_lines(path, encoding):
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected item and categories")
        cats = [c.strip() for c in parts[-1].split("|") if c.strip()]
        if not cats:
            raise DataError(f"{path}:{lineno}: item without category")
        out[parts[0].strip()] = cats
    return out


def read_features(path, columns: Optional[Sequence[int]] = None, encoding: str = "utf-8") -> dict[str, list[str]]:
    """``id<sep>f1<sep>f2...``; ``columns`` picks feature columns (0 = first after the id)."""
    out = {}
    for _, parts in _read_lines(path, encoding):
        feats = [p.strip() for p in parts[1:]]
        if columns is not None:
            feats = [feats[c] for c in columns]
        out[parts[0].strip()] = feats
    return out


def build_catalog(
    ratings: Sequence[RawRating],
    item_categories: dict[str, list[str]],
    user_features: Optional[dict[str, list[str]]] = None,
    item_features: Optional[dict[str, list[str]]] = None,
    user_feature_names: Optional[Sequence[str]] = None,
    item_feature_names: Optional[Sequence[str]] = None,
) -> Catalog:
    """Index users (feature file order, else first appearance) and items (category file order)."""
    if user_features:
        user_ids = list(user_features)
    else:
        user_ids = list(dict.fromkeys(r.user_id for r in ratings))
    item_ids = list(item_categories)
    names = sorted({c for cats in item_categories.values() for c in cats})
    cidx = {c: k for k, c in enumerate(names)}
    item_cats = [tuple(sorted({cidx[c] for c in item_categories[i]})) for i in item_ids]

    def encode(ids, table, field_names):
        if not table:
            return {}, {}
        width = len(next(iter(table.values())))
        field_names = list(field_names or [f"f{j}" for j in range(width)])
        feats, vocab = {}, {}
        for j, name in enumerate(field_names):
            values = [UNKNOWN] + sorted({row[j] for row in table.values()})
            lookup = {v: k for k, v in enumerate(values)}
            feats[name] = np.array([lookup[table[x][j]] if x in table else 0 for x in ids], dtype=np.int64)
            vocab[name] = values
        return feats, vocab

    uf, uv = encode(user_ids, user_features, user_feature_names)
    itf, itv = encode(item_ids, item_features, item_feature_names)
    return Catalog(user_ids, item_ids, names, item_cats, uf, uv, itf, itv)


def binarize(raw: Sequence[RawRating], threshold: float, catalog: Optional[Catalog] = None) -> Interactions:
    """Label 1 iff rating > threshold.  Ids must be known to ``catalog`` when one is given."""
    if catalog is None:
        users = {u: k for k, u in enumerate(dict.fromkeys(r.user_id for r in raw))}
        items = {i: k for k, i in enumerate(dict.fromkeys(r.item_id for r in raw))}
    else:
        users = {u: k for k, u in enumerate(catalog.user_ids)}
        items = {i: k for k, i in enumerate(catalog.item_ids)}
    bad = [r.line for r in raw if r.user_id not in users or r.item_id not in items]
    if bad:
        shown = ", ".join(map(str, bad[:10]))
        raise DataError(f"{len(bad)} record(s) with unknown user/item id (lines {shown})")
    if not raw:
        return Interactions.empty()
    return Interactions(
        [users[r.user_id] for r in raw],
        [items[r.item_id] for r in raw],
        [1 if r.rating > threshold else 0 for r in raw],
        [r.timestamp for r in raw],
    )


def build_category_target(categories: Iterable[int], n_categories: int, relevance=None) -> np.ndarray:
    """Soft category vector: uniform over the item's categories, or proportional to ``relevance``."""
    categories = list(categories)
    if not categories:
        raise DataError("item without category")
    t = np.zeros(n_categories)
    if relevance is None:
        w = np.ones(len(categories))
    else:
        w = np.asarray(relevance, dtype=float)
        if w.shape != (len(categories),) or np.any(w <= 0):
            raise DataError("relevance weights must be positive, one per category")
    np.add.at(t, categories, w)
    return t / t.sum()


def kcore_filter(data, k: int):
    """Drop users and items with fewer than ``k`` interactions until nothing changes.

    Accepts :class:`Interactions` or a list of :class:`RawRating`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(data, Interactions):
        users, items = data.user, data.item
    else:
        users = np.array([r.user_id for r in data], dtype=object)
        items = np.array([r.item_id for r in data], dtype=object)
    keep = np.ones(len(users), dtype=bool)
    while True:
        _, uinv, ucnt = np.unique(users[keep], return_inverse=True, return_counts=True)
        _, iinv, icnt = np.unique(items[keep], return_inverse=True, return_counts=True)
        ok = (ucnt[uinv] >= k) & (icnt[iinv] >= k)
        if ok.all():
            break
        idx = np.flatnonzero(keep)
        keep[idx[~ok]] = False
    if not keep.any():
        raise DataError("k-core eliminates dataset")
    if isinstance(data, Interactions):
        return data.take(keep)
    return [r for r, m in zip(data, keep) if m]


def _partition_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_valid = int(round(n * ratios[1]))
    n_train = min(max(n_train, 1), n - 2)
    n_valid = min(max(n_valid, 1), n - n_train - 1)
    return n_train, n_valid, n - n_train - n_valid


def chronological_split(
    data: Interactions,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    per_user: bool = False,
) -> tuple[Interactions, Interactions, Interactions]:
    """Stable sort by timestamp, then contiguous train/valid/test cut by ``ratios``.

    With ``per_user`` each user's own timeline is cut instead of the global one.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError("ratios must be three numbers summing to 1")
    if len(data) < 3:
        raise DataError("need at least 3 interactions to split")
    order = np.argsort(data.timestamp, kind="stable")
    if not per_user:
        a, b, _ = _partition_sizes(len(data), ratios)
        return data.take(order[:a]), data.take(order[a:a + b]), data.take(order[a + b:])
    parts = ([], [], [])
    by_user = {}
    for pos in order:
        by_user.setdefault(int(data.user[pos]), []).append(pos)
    for u in sorted(by_user):
        rows = by_user[u]
        if len(rows) < 3:
            parts[0].extend(rows)
            continue
        a, b, _ = _partition_sizes(len(rows), ratios)
        parts[0].extend(rows[:a])
        parts[1].extend(rows[a:a + b])
        parts[2].extend(rows[a + b:])
    return tuple(data.take(np.array(sorted(p, key=lambda r: (data.timestamp[r], r)), dtype=np.int64))
                 for p in parts)


def _draw_negatives(rng: np.random.Generator, n_items: int, seen: set, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    filled = 0
    while filled < count:
        cand = rng.integers(0, n_items, size=max(2 * (count - filled), 8))
        for c in cand:
            if int(c) not in seen:
                out[filled] = c
                filled += 1
                if filled == count:
                    break
    return out


def sample_negatives(
    part: Interactions,
    observed: Interactions,
    n_items: int,
    ratio: int = 1,
    seed: int = 0,
) -> Interactions:
    """Append ``ratio`` sampled negatives per positive in ``part``.

    Sampled items are uniform over items the user never interacted with in ``observed``;
    each user gets its own generator seeded from ``(seed, user)``.
    """
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    if ratio == 0 or len(part) == 0:
        return part
    seen: dict[int, set] = {}
    for u, i in zip(observed.user.tolist(), observed.item.tolist()):
        seen.setdefault(u, set()).add(i)
    pos = np.flatnonzero(part.label == 1)
    users = part.user[pos]
    new_u, new_i, new_t = [], [], []
    for u in np.unique(users):
        rows = pos[users == u]
        s = seen.get(int(u), set())
        if len(s) >= n_items:
            warnings.warn(f"user {int(u)} interacted with every item; no negatives sampled")
            continue
        rng = np.random.default_rng([seed, int(u)])
        items = _draw_negatives(rng, n_items, s, len(rows) * ratio)
        new_u.append(np.full(len(items), u))
        new_i.append(items)
        new_t.append(np.repeat(part.timestamp[rows], ratio))
    if not new_u:
        return part
    neg = Interactions(np.concatenate(new_u), np.concatenate(new_i), np.zeros(sum(map(len, new_u))),
                       np.concatenate(new_t), np.ones(sum(map(len, new_u)), dtype=bool))
    return Interactions.concat([part, neg])


def make_split(
    catalog: Catalog,
    data: Interactions,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    neg_ratio: int = 1,
    seed: int = 0,
    eval_negatives: str = "raw",
    per_user: bool = False,
) -> SplitDataset:
    """Split chronologically and sample training negatives (and eval ones when ``eval_negatives='sampled'``)."""
    if eval_negatives not in ("raw", "sampled"):
        raise ValueError("eval_negatives must be 'raw' or 'sampled'")
    train, valid, test = chronological_split(data, ratios, seed, per_user=per_user)
    train = sample_negatives(train, data, catalog.n_items, neg_ratio, seed)
    if eval_negatives == "sampled":
        valid = sample_negatives(valid, data, catalog.n_items, neg_ratio, seed + 1)
        test = sample_negatives(test, data, catalog.n_items, neg_ratio, seed + 2)
    return SplitDataset(catalog, train, valid, test, seed, neg_ratio, eval_negatives)


# ---------------------------------------------------------------------------
# split directory


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_part(path: Path, part: Interactions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\tlabel\ttimestamp\tsampled\n")
        for row in zip(part.user.tolist(), part.item.tolist(), part.label.tolist(),
                       part.timestamp.tolist(), part.sampled.astype(int).tolist()):
            fh.write("\t".join(map(str, row)) + "\n")


def _read_part(path: Path) -> Interactions:
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", skiprows=1, ndmin=2)
    if arr.size == 0:
        return Interactions.empty()
    return Interactions(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4].astype(bool))


def save_split(split: SplitDataset, out_dir, extra: Optional[dict] = None) -> dict:
    """Write the three partitions, ``catalog.json`` and ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        _write_part(out / f"{name}.tsv", getattr(split, name))
    with open(out / "catalog.json", "w", encoding="utf-8") as fh:
        json.dump(split.catalog.to_json(), fh, sort_keys=True)
    cat = split.catalog
    manifest = {
        "n_users": cat.n_users,
        "n_items": cat.n_items,
        "n_categories": cat.n_categories,
        "seed": split.seed,
        "neg_ratio": split.neg_ratio,
        "eval_negatives": split.eval_negatives,
        "sizes": {n: len(getattr(split, n)) for n in ("train", "valid", "test")},
        "files": {f: file_sha256(out / f) for f in ("train.tsv", "valid.tsv", "test.tsv", "catalog.json")},
    }
    manifest["meta"] = split.meta
    manifest.update(extra or {})
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_split(split_dir, verify: bool = True) -> SplitDataset:
    d = Path(split_dir)
    with open(d / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if verify:
        for f, digest in manifest["files"].items():
            if file_sha256(d / f) != digest:
                raise DataError(f"{d / f}: hash mismatch against manifest")
    with open(d / "catalog.json", encoding="utf-8") as fh:
        catalog = Catalog.from_json(json.load(fh))
    parts = [_read_part(d / f"{n}.tsv") for n in ("train", "valid", "test")]
    return SplitDataset(catalog, *parts, seed=manifest["seed"], neg_ratio=manifest["neg_ratio"],
                        eval_negatives=manifest["eval_negatives"], meta=manifest.get("meta", {}),
                        manifest_sha256=file_sha256(d / "manifest.json"))
