"""``dcrs`` command line: prepare | synth | train | rerank | eval | report.

Exit codes: 0 ok, 2 data/config error, 3 training error, 4 evaluation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ingest
from .config import RunConfig, dump_config, load_config
from .evaluate import EvalReport, Scorer, case_study_report, evaluate, top_k
from .io import (ChainError, load_model, manifest_hash, read_json, save_model, verify_chain, write_json)
from .metrics import MetricError, rank_items
from .models import ColdStartError, ConfigError, TrainingDiverged, build_model, grid_search, train
from .rerank import rerank

log = logging.getLogger("dcrs")

EXIT_OK, EXIT_DATA, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4
FROZEN_CONFIG = "config.frozen.yaml"


class EvalError(RuntimeError):
    pass


def _need(value, what):
    if value is None:
        raise ConfigError(f"missing setting: {what}")
    return value


def _out(cfg: RunConfig) -> Path:
    out = Path(_need(cfg.out, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _freeze(cfg: RunConfig, out: Path) -> None:
    dump_config(cfg, out / FROZEN_CONFIG)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig) -> Path:
    d, sp = cfg.data, cfg.split
    out = _out(cfg)
    seed = 0 if cfg.seed is None else cfg.seed
    raw = ingest.read_ratings(_need(d.ratings, "data.ratings"), d.encoding)
    cats = ingest.read_item_categories(_need(d.items, "data.items"), d.encoding)
    users = ingest.read_features(d.users, encoding=d.encoding) if d.users else None
    if d.kcore:
        raw = ingest.kcore_filter(raw, d.kcore)
    catalog = ingest.build_catalog(raw, cats, users, None, d.user_feature_names)
    data = ingest.binarize(raw, d.threshold, catalog)
    split = ingest.make_split(catalog, data, sp.ratios, sp.neg_ratio, seed, sp.eval_negatives, sp.per_user)
    raw_files = {p: ingest.file_sha256(p) for p in (d.ratings, d.items, d.users) if p}
    manifest = ingest.save_split(split, out, extra={"raw_files": raw_files, "threshold": d.threshold,
                                                    "kcore": d.kcore, "ratios": list(sp.ratios)})
    _freeze(cfg, out)
    log.info("prepared N=%d M=%d K=%d -> %s", manifest["n_users"], manifest["n_items"],
             manifest["n_categories"], out)
    return out


def cmd_synth(cfg: RunConfig) -> Path:
    from .synth import generate_world, sample_interactions, write_interactions

    s = cfg.synth
    seed = _need(cfg.seed, "seed")
    out = _out(cfg)
    world = generate_world(s.n_users, s.n_items, s.n_categories, s.latent_dim, seed, s.multi_category_rate,
                           s.quality_scale, s.quality_mean)
    data = sample_interactions(world, s.n_exposures, seed, s.skew)
    world.save(out)
    write_interactions(data, world, out)
    files = ["world.npz", "world.json", "ratings.tsv", "items.tsv"]
    write_json(out / "manifest.json", {
        "n_users": world.n_users, "n_items": world.n_items, "n_categories": world.n_categories,
        "n_interactions": len(data), "positive_rate": float(data.label.mean()), "seed": seed,
        "files": {f: ingest.file_sha256(out / f) for f in files},
    })
    _freeze(cfg, out)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    seed = _need(cfg.seed, "seed")
    split_dir = _need(cfg.data.split_dir, "data.split_dir")
    split = ingest.load_split(split_dir)
    out = _out(cfg)
    extra = {}
    log_rows = []
    model = None
    try:
        if cfg.train.resume:
            model = load_model(cfg.train.resume, split)
            model.config = replace(model.config, max_epochs=cfg.model.max_epochs, patience=cfg.model.patience)
            result = train(model, split, seed, on_epoch=lambda r: log_rows.append(r.to_dict()))
            extra["resumed_from"] = str(cfg.train.resume)
        elif cfg.train.grid:
            result, trace = grid_search(split.catalog, split, cfg.model, cfg.train.grid, seed, jobs=cfg.jobs)
            log_rows = [r.to_dict() for r in result.log]
            write_json(out / "grid_trace.json", trace)
            win = next(t for t in trace if t.get("winner"))
            extra["grid_winner"] = win["params"]
            log.info("grid winner %s (decided by %s)", win["params"], win["decided_by"])
        else:
            model = build_model(split.catalog, cfg.model, seed)
            result = train(model, split, seed, on_epoch=lambda r: log_rows.append(r.to_dict()))
    except TrainingDiverged as exc:
        if exc.last_good is not None and model is not None:
            model.params = exc.last_good
            save_model(model, out / "last_good", seed, split_dir, {"diverged": str(exc)})
        raise
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    extra.update({"best_epoch": result.best_epoch, "best_val_uauc": result.best_val_uauc,
                  "best_val_loss": result.best_val_loss,
                  "train_log_sha256": ingest.file_sha256(out / "train_log.jsonl")})
    save_model(result.model, out, seed, split_dir, extra)
    _freeze(cfg, out)
    return out


def cmd_rerank(cfg: RunConfig) -> Path:
    r = cfg.rerank
    split = ingest.load_split(_need(cfg.data.split_dir, "data.split_dir"))
    model = load_model(_need(r.checkpoint, "rerank.checkpoint"), split)
    out = _out(cfg)
    users = r.users if r.users is not None else np.flatnonzero(model.known_users).tolist()
    seen: dict[int, set] = {}
    for u, i in zip(split.train.user.tolist(), split.train.item.tolist()):
        seen.setdefault(u, set()).add(i)
    scores = model.score_matrix(np.arange(split.catalog.n_users), np.arange(split.catalog.n_items))
    files = {}
    for method in r.methods:
        path = out / f"{method}.tsv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["user", "item", "score", "rank"])
            for u in users:
                if not model.known_users[u]:
                    raise ColdStartError(f"user {u} has no training history")
                pool = np.array([i for i in range(split.catalog.n_items) if i not in seen.get(u, ())])
                top = rank_items(pool, scores[u, pool])[:r.pool_size]
                rel = scores[u, top]
                ranked = rerank(method, top, rel, split.catalog.targets[top], min(r.k, len(top)), r.theta)
                lookup = dict(zip(top.tolist(), rel.tolist()))
                for rank, i in enumerate(ranked[:r.k], start=1):
                    w.writerow([split.catalog.user_ids[u], split.catalog.item_ids[i], repr(lookup[i]), rank])
        files[path.name] = ingest.file_sha256(path)
    write_json(out / "manifest.json", {"checkpoint": str(r.checkpoint),
                                       "checkpoint_manifest_sha256": manifest_hash(r.checkpoint),
                                       "theta": r.theta, "pool_size": r.pool_size, "k": r.k, "files": files})
    _freeze(cfg, out)
    return out


def build_scorers(models: dict, split):
    """Scorers for ``eval.models`` entries plus ``{name: checkpoint dir}``."""
    if not models:
        raise ConfigError("eval.models is empty")
    loaded, scorers, ckpts = {}, [], {}
    for name, spec in models.items():
        ckpt = _need(spec.get("checkpoint"), f"eval.models.{name}.checkpoint")
        if ckpt not in loaded:
            loaded[ckpt] = load_model(ckpt, split)
        model = loaded[ckpt]
        rule = spec.get("rule", "p")
        kw = {k: spec[k] for k in ("rerank", "theta", "pool_size") if k in spec}
        scorers.append(Scorer.from_model(name, model, rule, **kw))
        ckpts[name] = ckpt
    return scorers, ckpts


def cmd_eval(cfg: RunConfig) -> Path:
    e = cfg.eval
    split_dir = _need(cfg.data.split_dir, "data.split_dir")
    split = ingest.load_split(split_dir)
    scorers, ckpts = build_scorers(e.models, split)
    if e.base is not None and e.base not in e.models:
        raise EvalError(f"base model {e.base!r} for RelaImpr is not among eval.models")
    out = _out(cfg)
    report = evaluate(scorers, split, tuple(e.ks), e.base, e.category_top_n)
    echo = cfg.to_dict()
    echo.pop("out")
    report.header.update({
        "data_manifest_sha256": split.manifest_sha256,
        "model_manifest_sha256": {n: manifest_hash(c) for n, c in sorted(ckpts.items())},
        "config": echo,
    })
    paths = report.write(out)
    print(report.format_table())
    write_json(out / "manifest.json", {
        "split_dir": str(split_dir),
        "data_manifest_sha256": split.manifest_sha256,
        "checkpoints": {n: {"dir": str(c), "manifest_sha256": manifest_hash(c)} for n, c in sorted(ckpts.items())},
        "files": {p.name: ingest.file_sha256(p) for p in paths.values()},
    })
    _freeze(cfg, out)
    return out


def cmd_report(cfg: RunConfig) -> Path:
    r = cfg.report
    eval_dir = Path(_need(r.eval_dir, "report.eval_dir"))
    verify_chain(eval_dir)
    rec = EvalReport.read(eval_dir)
    em = read_json(eval_dir / "manifest.json")
    split = ingest.load_split(em["split_dir"])
    models = rec.header["config"]["eval"]["models"]
    scorers, _ = build_scorers(models, split)
    out = _out(cfg)
    cat = split.catalog
    if r.users is not None:
        users = [int(u) for u in r.users]
    else:
        known = scorers[0].known_users
        test_pos = np.unique(split.test.user[(split.test.label == 1) & known[split.test.user]])
        rng = np.random.default_rng(0 if cfg.seed is None else cfg.seed)
        users = sorted(rng.choice(test_pos, min(r.n_sample_users, len(test_pos)), replace=False).tolist())
    rows = []
    for u in users:
        recs = {sc.name: top_k(sc, split, u, r.k) for sc in scorers}
        hist = case_study_report(u, split, recs, r.k)
        for source, q in hist.items():
            rows.append([cat.user_ids[u], source] + [f"{v:.6f}" for v in q])
    with open(out / "case_study.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "source"] + list(cat.category_names))
        w.writerows(rows)
    with open(out / "table.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerows(rec.table_lines())
    if rec.category_specific:
        with open(out / "category_specific.tsv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["model", "categories", "n_test", "UAUC", "R@20", "NDCG@20"])
            for name, groups in rec.category_specific.items():
                for g in groups:
                    w.writerow([name, "|".join(g["categories"]), g["n_test"]] +
                               [_cell(g.get(c)) for c in ("UAUC", "R@20", "NDCG@20")])
    if r.plots:
        _plot_case_study(rows, list(cat.category_names), out)
    print(rec.format_table())
    _freeze(cfg, out)
    return out


def _cell(v):
    return "-" if v is None else f"{v:.4f}"


def _plot_case_study(rows, names, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_user: dict[str, list] = {}
    for row in rows:
        by_user.setdefault(row[0], []).append(row)
    for user, group in by_user.items():
        fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(names)), 3))
        width = 0.8 / len(group)
        x = np.arange(len(names))
        for j, row in enumerate(group):
            ax.bar(x + j * width, [float(v) for v in row[2:]], width, label=row[1])
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("share")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"case_study_{user}.png", dpi=120)
        plt.close(fig)


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "report": cmd_report,
}

# convenience flags -> config keys
FLAGS = {
    "prepare": [("--ratings", "data.ratings"), ("--items", "data.items"), ("--users", "data.users"),
                ("--threshold", "data.threshold"), ("--neg-ratio", "split.neg_ratio")],
    "synth": [],
    "train": [("--split", "data.split_dir"), ("--kind", "model.kind"), ("--lam", "model.lam"),
              ("--resume", "train.resume")],
    "rerank": [("--split", "data.split_dir"), ("--checkpoint", "rerank.checkpoint"), ("--theta", "rerank.theta")],
    "eval": [("--split", "data.split_dir"), ("--base", "eval.base")],
    "report": [("--eval-dir", "report.eval_dir")],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcrs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML run config")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. model.lam=0.5")
        s.add_argument("--out")
        s.add_argument("--seed", type=int, required=name in ("train", "synth"))
        s.add_argument("--jobs", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        for flag, key in FLAGS[name]:
            s.add_argument(flag, dest=key.replace(".", "__"), metavar=key.split(".")[-1].upper())
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    for _, key in FLAGS[args.command]:
        v = getattr(args, key.replace(".", "__"))
        if v is not None:
            overrides.append(f"{key}={v}")
    for key in ("out", "seed", "jobs"):
        v = getattr(args, key)
        if v is not None:
            overrides.append(f"{key}={v}")
    return cfg.with_overrides(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.model.validate()
    except (ConfigError, OSError, ValueError) as exc:
        print(f"dcrs {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(f"dcrs {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EvalError, MetricError, ColdStartError) as exc:
        print(f"dcrs {args.command}: evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (ingest.DataError, ChainError, ConfigError, OSError) as exc:
        print(f"dcrs {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
