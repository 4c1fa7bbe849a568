"""NFM backbone, the disentangled DCRS model and the trainable baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .graph import GraphError, NonFiniteGradient, ParamStore, Tape
from .ingest import Catalog, Interactions, SplitDataset

log = logging.getLogger(__name__)

MODEL_KINDS = ("nfm", "unawareness", "ips", "dcrs")
# scoring rules: "p" is the overall prediction, "ci" the category-independent head of DCRS
SCORE_RULES = {"nfm": ("p",), "unawareness": ("p",), "ips": ("p",), "dcrs": ("p", "ci")}


class ConfigError(ValueError):
    pass


class ColdStartError(KeyError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good=None, batch=None):
        super().__init__(msg)
        self.last_good = last_good
        self.batch = batch


@dataclass
class ModelConfig:
    kind: str = "nfm"
    d: int = 64
    dropout: float = 0.3
    l2: float = 0.0
    lam: float = 0.1
    lr: float = 0.05
    ips_clip: float = 0.05
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 5
    init_std: float = 0.1
    adagrad_eps: float = 1e-10
    bias_field: bool = True
    use_category: bool = True
    side_features: bool = True
    separate_discriminator: bool = True
    disc_lr_scale: float = 10.0

    def validate(self) -> "ModelConfig":
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.ips_clip <= 1.0:
            raise ConfigError("ips_clip must be in (0, 1]")
        if self.disc_lr_scale <= 0:
            raise ConfigError("disc_lr_scale must be > 0")
        if self.patience < 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("bad epoch/patience/batch settings")
        return self


@dataclass(frozen=True)
class Field:
    name: str
    vocab: int
    kind: str  # bias | user | item | category | user_side | item_side


class FeatureEncoder:
    """Turns (user, item) index arrays into per-field (index, weight) matrices."""

    def __init__(self, catalog: Catalog, use_category=True, side_features=True, bias_field=True):
        self.fields: list[Field] = []
        if bias_field:
            self.fields.append(Field("bias", 1, "bias"))
        self.fields.append(Field("user", catalog.n_users, "user"))
        self.fields.append(Field("item", catalog.n_items, "item"))
        if use_category:
            self.fields.append(Field("category", catalog.n_categories, "category"))
        self._side = {}
        if side_features:
            for name, col in catalog.user_features.items():
                self.fields.append(Field(f"user:{name}", len(catalog.user_feature_vocab[name]), "user_side"))
                self._side[f"user:{name}"] = col
            for name, col in catalog.item_features.items():
                self.fields.append(Field(f"item:{name}", len(catalog.item_feature_vocab[name]), "item_side"))
                self._side[f"item:{name}"] = col
        width = max((len(c) for c in catalog.item_categories), default=1)
        self.cat_idx = np.zeros((catalog.n_items, width), dtype=np.int64)
        self.cat_w = np.zeros((catalog.n_items, width))
        for i, cats in enumerate(catalog.item_categories):
            self.cat_idx[i, :len(cats)] = cats
            self.cat_w[i, :len(cats)] = 1.0

    def encode(self, users: np.ndarray, items: np.ndarray) -> dict[str, tuple[np.ndarray, Optional[np.ndarray]]]:
        out = {}
        for f in self.fields:
            if f.kind == "bias":
                out[f.name] = (np.zeros((len(users), 1), dtype=np.int64), None)
            elif f.kind == "user":
                out[f.name] = (users[:, None], None)
            elif f.kind == "item":
                out[f.name] = (items[:, None], None)
            elif f.kind == "category":
                out[f.name] = (self.cat_idx[items], self.cat_w[items])
            elif f.kind == "user_side":
                out[f.name] = (self._side[f.name][users][:, None], None)
            else:
                out[f.name] = (self._side[f.name][items][:, None], None)
        return out


@dataclass
class ModelOutput:
    p: np.ndarray
    p_ci: Optional[np.ndarray] = None
    logits_c: Optional[np.ndarray] = None
    logits_ci: Optional[np.ndarray] = None
    category_head: Optional[np.ndarray] = None
    terms: dict = field(default_factory=dict)
    total: float = float("nan")
    objective: float = float("nan")
    nodes: dict = field(default_factory=dict, repr=False)


class Recommender:
    """Common machinery: parameters, feature embedding and scoring."""

    kind = "base"

    def __init__(self, catalog: Catalog, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.catalog = catalog
        self.encoder = FeatureEncoder(catalog, config.use_category, config.side_features, config.bias_field)
        self.params = ParamStore()
        self.known_users = np.zeros(catalog.n_users, dtype=bool)
        self.epoch = 0
        self.init_params(np.random.default_rng(seed))

    @property
    def width(self) -> int:
        return self.config.d

    def init_params(self, rng: np.random.Generator) -> None:
        std = self.config.init_std
        for f in self.encoder.fields:
            self.params.add(f"emb/{f.name}", rng.normal(0.0, std, (f.vocab, self.width)))

    def embed_fields(self, tape: Tape, users, items):
        feats = self.encoder.encode(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64))
        parts = [tape.embed(tape.param(f"emb/{name}"), idx, w) for name, (idx, w) in feats.items()]
        return tape.concat(parts, axis=1)

    def backbone(self, tape: Tape, users, items, rng=None):
        """Bi-interaction pooling of all active feature embeddings, dropout when ``rng`` is given."""
        emb = self.embed_fields(tape, users, items)
        h = tape.bi_interaction(emb)
        p = self.config.dropout
        if rng is not None and p > 0:
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            h = tape.mul(h, tape.const(mask))
        return emb, h

    def l2_term(self, tape: Tape, emb):
        if self.config.l2 <= 0:
            return None
        return tape.scale(tape.sum(tape.mul(emb, emb)), self.config.l2 / emb.shape[0])

    def forward(self, tape, users, items, y=None, weights=None, target=None, rng=None) -> ModelOutput:
        raise NotImplementedError

    def score(self, users, items, rule: str = "p") -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if rule not in SCORE_RULES[self.kind]:
            raise ConfigError(f"{self.kind} has no scoring rule {rule!r}")
        chunk = max(256, (1 << 22) // (len(self.encoder.fields) * self.width))
        out = np.empty(len(users))
        for s in range(0, len(users), chunk):
            o = self.forward(Tape(self.params), users[s:s + chunk], items[s:s + chunk])
            out[s:s + chunk] = o.p if rule == "p" else o.p_ci
        return out

    # all-pairs scoring: h(u, i) = h_u + h_i + s_u * s_i for side sums s and half-squares h
    def _side_stats(self, side: str, ids: np.ndarray):
        kinds = ("bias", "user", "user_side") if side == "user" else ("item", "category", "item_side")
        zeros = np.zeros(len(ids), dtype=np.int64)
        feats = self.encoder.encode(ids if side == "user" else zeros, ids if side == "item" else zeros)
        s = np.zeros((len(ids), self.width))
        q = np.zeros((len(ids), self.width))
        for f in self.encoder.fields:
            if f.kind not in kinds:
                continue
            idx, w = feats[f.name]
            e = self.params[f"emb/{f.name}"][idx]
            if w is not None:
                e = e * w[..., None]
            s += e.sum(axis=1)
            q += (e * e).sum(axis=1)
        return s, 0.5 * (s * s - q)

    def _readout(self, rule: str) -> tuple[np.ndarray, slice]:
        return self.params["W"], slice(None)

    def score_matrix(self, users, items, rule: str = "p") -> np.ndarray:
        """(len(users), len(items)) matrix of scores, equal to :meth:`score` on every pair."""
        if rule not in SCORE_RULES[self.kind]:
            raise ConfigError(f"{self.kind} has no scoring rule {rule!r}")
        w, cols = self._readout(rule)
        su, hu = self._side_stats("user", np.asarray(users, dtype=np.int64))
        si, hi = self._side_stats("item", np.asarray(items, dtype=np.int64))
        su, hu, si, hi = su[:, cols], hu[:, cols], si[:, cols], hi[:, cols]
        logit = (hu @ w)[:, None] + (hi @ w)[None, :] + (su * w) @ si.T
        return 0.5 * (1.0 + np.tanh(0.5 * logit))


class NFM(Recommender):
    kind = "nfm"

    def init_params(self, rng):
        super().init_params(rng)
        self.params.add("W", rng.normal(0.0, 1.0 / math.sqrt(self.width), self.width))

    def forward(self, tape, users, items, y=None, weights=None, target=None, rng=None):
        emb, h = self.backbone(tape, users, items, rng)
        p = tape.sigmoid(tape.affine(h, tape.param("W")))
        out = ModelOutput(p=p.value, nodes={"h": h, "p": p, "emb": emb})
        if y is None:
            return out
        rec = tape.binary_xent(p, y, weights)
        total = rec
        reg = self.l2_term(tape, emb)
        if reg is not None:
            total = tape.add(total, reg)
        out.terms = {"rec": float(rec.value)}
        out.total = out.objective = float(total.value)
        out.nodes["loss"] = total
        return out


class DCRS(Recommender):
    """Backbone emits a 2d representation split into category-independent / dependent halves."""

    kind = "dcrs"

    @property
    def width(self) -> int:
        return 2 * self.config.d

    def init_params(self, rng):
        super().init_params(rng)
        d, k = self.config.d, self.catalog.n_categories
        self.params.add("W1", rng.normal(0.0, 1.0 / math.sqrt(d), d))
        self.params.add("W2", rng.normal(0.0, 1.0 / math.sqrt(2 * d), 2 * d))
        self.params.add("disc/W", rng.normal(0.0, 1.0 / math.sqrt(d), (d, k)))
        self.params.add("disc/b", np.zeros(k))
        if self.config.separate_discriminator:
            self.params.add("disc_ci/W", rng.normal(0.0, 1.0 / math.sqrt(d), (d, k)))
            self.params.add("disc_ci/b", np.zeros(k))
        for name in self.params.names():
            if name.startswith("disc"):
                self.params.lr_scale[name] = self.config.disc_lr_scale

    def _readout(self, rule):
        d = self.config.d
        if rule == "ci":
            return self.params["W1"], slice(0, d)
        return self.params["W2"], slice(None)

    def forward(self, tape, users, items, y=None, weights=None, target=None, rng=None):
        d = self.config.d
        emb, h = self.backbone(tape, users, items, rng)
        h_ci = tape.slice(h, 0, d)
        h_c = tape.slice(h, d, 2 * d)
        p_ci = tape.sigmoid(tape.affine(h_ci, tape.param("W1")))
        joint = tape.concat([tape.stop_grad(h_ci), h_c], axis=-1)
        p = tape.sigmoid(tape.affine(joint, tape.param("W2")))
        logits_c = tape.affine(h_c, tape.param("disc/W"), tape.param("disc/b"))
        ci = "disc_ci" if self.config.separate_discriminator else "disc"
        logits_ci = tape.affine(tape.grl(h_ci), tape.param(f"{ci}/W"), tape.param(f"{ci}/b"))
        w2c = self.params["W2"][d:]
        cat_head = 0.5 * (1.0 + np.tanh(0.5 * (h_c.value @ w2c)))
        out = ModelOutput(p=p.value, p_ci=p_ci.value, logits_c=logits_c.value, logits_ci=logits_ci.value,
                          category_head=cat_head,
                          nodes={"h": h, "h_ci": h_ci, "h_c": h_c, "p": p, "p_ci": p_ci, "emb": emb,
                                 "logits_c": logits_c, "logits_ci": logits_ci})
        if y is None:
            return out
        if target is None:
            target = self.catalog.targets[np.asarray(items, dtype=np.int64)]
        lam = self.config.lam
        rec = tape.binary_xent(p, y, weights)
        rec_ci = tape.binary_xent(p_ci, y, weights)
        d_c = tape.soft_xent(logits_c, target)
        d_ci = tape.soft_xent(logits_ci, target)
        # d_ci enters with +lam here; the grl node turns it into ascent on h_ci
        total = tape.add(tape.add(rec, rec_ci), tape.scale(tape.add(d_c, d_ci), lam))
        reg = self.l2_term(tape, emb)
        if reg is not None:
            total = tape.add(total, reg)
        out.terms = {"rec": float(rec.value), "rec_ci": float(rec_ci.value),
                     "disc_c": float(d_c.value), "disc_ci": float(d_ci.value)}
        out.total = float(total.value)
        out.objective = dcrs_objective(out.terms, lam) + (float(reg.value) if reg is not None else 0.0)
        out.nodes["loss"] = total
        return out


def dcrs_objective(terms: dict, lam: float) -> float:
    """The bookkeeping value of the combined DCRS objective."""
    return terms["rec"] + terms["rec_ci"] - lam * terms["disc_ci"] + lam * terms["disc_c"]


def build_model(catalog: Catalog, config: ModelConfig, seed: int = 0) -> Recommender:
    config = config.validate()
    if config.kind == "dcrs":
        return DCRS(catalog, config, seed)
    if config.kind == "unawareness":
        config = replace(config, use_category=False)
    return NFM(catalog, config, seed) if config.kind != "ips" else IPSModel(catalog, config, seed)


class IPSModel(NFM):
    kind = "ips"


def unawareness_variant(config: ModelConfig) -> ModelConfig:
    """The NFM config with item category features removed from the input schema."""
    return replace(config, kind="unawareness", use_category=False)


def user_category_history(data: Interactions, catalog: Catalog) -> np.ndarray:
    """(N, K) per-user category distribution accumulated from soft targets of observed interactions."""
    obs = data.take(~data.sampled)
    hist = np.zeros((catalog.n_users, catalog.n_categories))
    np.add.at(hist, obs.user, catalog.targets[obs.item])
    return hist


def ips_weights(train: Interactions, catalog: Catalog, clip: float, history: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-example inverse propensity weights ``1 / max(sum_c t_i[c] freq_u[c], clip)``."""
    if not 0.0 < clip <= 1.0:
        raise ConfigError("clip must be in (0, 1]")
    hist = user_category_history(train, catalog) if history is None else np.asarray(history, float)
    totals = hist.sum(axis=1, keepdims=True)
    freq = np.divide(hist, totals, out=np.zeros_like(hist), where=totals > 0)
    prop = np.einsum("nk,nk->n", catalog.targets[train.item], freq[train.user])
    empty = totals[train.user, 0] == 0
    if empty.any():
        log.info("%d example(s) from users without history get weight 1", int(empty.sum()))
    w = 1.0 / np.maximum(prop, clip)
    w[empty] = 1.0
    return w


def predict_for_ranking(model: Recommender, user: int, items, rule: str = "p") -> np.ndarray:
    if not 0 <= user < model.catalog.n_users or not model.known_users[user]:
        raise ColdStartError(f"user {user} has no training interactions")
    items = np.asarray(items, dtype=np.int64)
    return model.score(np.full(len(items), user), items, rule)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    rec: float
    rec_ci: Optional[float]
    disc_c: Optional[float]
    disc_ci: Optional[float]
    val_uauc: float
    val_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Recommender
    log: list[EpochRecord]
    best_epoch: int
    best_val_uauc: float
    best_val_loss: float


def validation_loss(model: Recommender, part: Interactions) -> float:
    p = np.clip(model.score(part.user, part.item), 1e-7, 1 - 1e-7)
    y = part.label.astype(float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def train(model: Recommender, split: SplitDataset, seed: int = 0, on_epoch=None) -> TrainResult:
    """Minibatch AdaGrad with early stopping on validation UAUC; returns the best-epoch model.

    Resumes from ``model.epoch`` so a reloaded checkpoint continues its epoch counter.
    """
    from .metrics import uauc_from_arrays

    cfg = model.config
    data = split.train
    model.known_users[np.unique(data.user)] = True
    weights = None
    if model.kind == "ips":
        weights = ips_weights(data, split.catalog, cfg.ips_clip)
        weights = weights / weights.mean()
    targets = split.catalog.targets
    valid = split.valid.take(model.known_users[split.valid.user])

    history: list[EpochRecord] = []
    best = (-math.inf, math.inf)
    best_state = model.params.copy()
    best_epoch = model.epoch
    stale = 0
    start = model.epoch
    for epoch in range(start + 1, cfg.max_epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(data))
        sums: dict[str, float] = {}
        n_batches = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            tape = Tape(model.params)
            out = model.forward(tape, data.user[idx], data.item[idx], y=data.label[idx],
                                weights=None if weights is None else weights[idx],
                                target=targets[data.item[idx]], rng=rng)
            if not math.isfinite(out.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best_state,
                                       {"user": data.user[idx], "item": data.item[idx]})
            tape.backward(out.nodes["loss"])
            try:
                model.params.adagrad_step(cfg.lr, cfg.adagrad_eps)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), best_state) from exc
            for k, v in out.terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        model.epoch = epoch
        val_uauc = uauc_from_arrays(valid.user, model.score(valid.user, valid.item), valid.label,
                                    strict=False) if len(valid) else float("nan")
        val_loss = validation_loss(model, valid) if len(valid) else float("nan")
        if len(valid) and not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss after epoch {epoch}", best_state)
        mean = {k: v / max(n_batches, 1) for k, v in sums.items()}
        rec = EpochRecord(epoch, mean.get("rec", float("nan")), mean.get("rec_ci"), mean.get("disc_c"),
                          mean.get("disc_ci"), val_uauc, val_loss)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d %s", epoch, rec)
        key = (val_uauc if math.isfinite(val_uauc) else -math.inf, val_loss)
        if key[0] > best[0] or (key[0] == best[0] and key[1] < best[1]):
            best, best_state, best_epoch, stale = key, model.params.copy(), epoch, 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    model.params = best_state
    model.epoch = best_epoch
    return TrainResult(model, history, best_epoch, best[0], best[1])


def _grid_run(args):
    catalog, split, cfg, seed = args
    return train(build_model(catalog, cfg, seed), split, seed)


GRID_CRITERIA = ("val_uauc", "val_loss", "lam")


def grid_search(catalog: Catalog, split: SplitDataset, base: ModelConfig, grid: dict, seed: int = 0,
                on_run=None, jobs: int = 1):
    """Train one model per grid point; pick by val UAUC, then val loss, then smaller lambda.

    Returns ``(best TrainResult, trace)``.  ``trace`` lists every run in grid order with its
    rank and, for the winner, which criterion separated it from the runner-up.
    """
    keys = sorted(grid)
    points = [dict()]
    for k in keys:
        points = [dict(p, **{k: v}) for p in points for v in grid[k]]
    configs = [replace(base, **point).validate() for point in points]
    tasks = [(catalog, split, cfg, seed) for cfg in configs]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_grid_run, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_grid_run(t))
            if on_run is not None:
                on_run({"params": points[len(results) - 1], "val_uauc": results[-1].best_val_uauc})
    sort_keys = [(-r.best_val_uauc, r.best_val_loss, c.lam) for r, c in zip(results, configs)]
    order = sorted(range(len(points)), key=lambda j: (sort_keys[j], j))
    trace = [{"params": points[j], "val_uauc": results[j].best_val_uauc, "val_loss": results[j].best_val_loss,
              "lam": configs[j].lam, "best_epoch": results[j].best_epoch, "rank": order.index(j) + 1}
             for j in range(len(points))]
    win = order[0]
    decided = "only run"
    if len(order) > 1:
        runner = order[1]
        decided = "grid order"
        for name, a, b in zip(GRID_CRITERIA, sort_keys[win], sort_keys[runner]):
            if a != b:
                decided = name
                break
    trace[win]["winner"] = True
    trace[win]["decided_by"] = decided
    return results[win], trace


def param_count(model: Recommender) -> int:
    return model.params.num_parameters()


def feature_names(model: Recommender) -> list[str]:
    return [f.name for f in model.encoder.fields]


__all__: Sequence[str] = [
    "ModelConfig", "NFM", "DCRS", "IPSModel", "build_model", "train", "grid_search", "ips_weights",
    "predict_for_ranking", "unawareness_variant", "dcrs_objective", "GraphError",
]
