"""Experiment protocols: the synthetic NFM vs DCRS comparison and the ML-100K table."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluate import Scorer, category_specific_eval, labelled_eval
from .ingest import make_split
from .models import ModelConfig, grid_search
from .synth import generate_world, probe_disentanglement, sample_interactions

# desk-scale model settings; the grid is shared by both models so budgets match
SYNTH_MODEL = ModelConfig(d=16, max_epochs=40, patience=5)
SYNTH_GRID = {"lr": [0.01, 0.05], "dropout": [0.1, 0.3]}


@dataclass
class SeedResult:
    seed: int
    model: str
    test_uauc: float
    rank_corr: float
    acc_h: float
    acc_c: Optional[float]
    acc_ci: Optional[float]
    chance: float
    category_uauc: list
    grid_winner: dict
    seconds: float


@dataclass
class ProtocolResult:
    runs: list = field(default_factory=list)

    def mean(self, model: str, key: str) -> float:
        vals = [getattr(r, key) for r in self.runs if r.model == model]
        if key == "category_uauc":
            vals = [float(np.mean(v)) for v in vals]
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {"runs": [asdict(r) for r in self.runs]}


def run_synthetic(seeds: Sequence[int] = (0, 1, 2), base: ModelConfig = SYNTH_MODEL, grid: dict = SYNTH_GRID,
                  world_kw: Optional[dict] = None, n_exposures: int = 100, skew: float = 1.0,
                  top_n: int = 3, log=print) -> ProtocolResult:
    """Train NFM and DCRS per seed with identical grids; probe, rank-correlate and evaluate each."""
    out = ProtocolResult()
    for seed in seeds:
        world = generate_world(seed=seed, **(world_kw or {}))
        data = sample_interactions(world, n_exposures, seed=seed, skew=skew)
        split = make_split(world.catalog(), data, neg_ratio=0, seed=seed)
        for kind in ("nfm", "dcrs"):
            t0 = time.time()
            best, trace = grid_search(split.catalog, split, replace(base, kind=kind), grid, seed)
            model = best.model
            probe = probe_disentanglement(model, world, split, seed=seed)
            uauc = labelled_eval(Scorer.from_model(kind, model), split.test, split.catalog)["UAUC"]
            rule = "ci" if kind == "dcrs" else "p"
            groups = category_specific_eval(Scorer.from_model(kind, model, rule), split, top_n)
            winner = next(t["params"] for t in trace if t.get("winner"))
            r = SeedResult(seed, kind, uauc, probe.rank_corr, probe.acc_h, probe.acc_c, probe.acc_ci,
                           probe.chance, [g["UAUC"] for g in groups], winner, time.time() - t0)
            out.runs.append(r)
            if log is not None:
                log(f"seed {seed} {kind:4s} uauc {uauc:.4f} corr {probe.rank_corr:.4f} "
                    f"probe_ci {r.acc_ci} probe_c {r.acc_c} chance {probe.chance:.3f} "
                    f"groups {np.round(r.category_uauc, 4).tolist()} grid {winner} {r.seconds:.0f}s")
    return out


# ---------------------------------------------------------------------------
# ML-100K table

ML100K_GRIDS = {
    "nfm": {"lr": [0.01, 0.05]},
    "unawareness": {"lr": [0.01, 0.05]},
    "ips": {"lr": [0.01, 0.05], "ips_clip": [0.01, 0.05, 0.1]},
    "dcrs": {"lr": [0.01, 0.05], "lam": [0.01, 0.1, 1.0]},
}

ML100K_ROWS = {
    "NFM": {"checkpoint": "nfm"},
    "Unawareness": {"checkpoint": "unawareness"},
    "IPS": {"checkpoint": "ips"},
    "MMR": {"checkpoint": "nfm", "rerank": "mmr", "theta": 0.5},
    "DPP": {"checkpoint": "nfm", "rerank": "dpp", "theta": 0.5},
    "DCRS": {"checkpoint": "dcrs"},
    "DCRS_CI": {"checkpoint": "dcrs", "rule": "ci"},
}


class StepFailed(RuntimeError):
    def __init__(self, step: str, code: int):
        super().__init__(f"{step} exited {code}")
        self.code = code


def run_ml100k(config: str, work, seed: int = 0, jobs: int = 1, plots: bool = False, log=print):
    """prepare -> grid-train four checkpoints -> evaluate seven rows -> report, all through the CLI."""
    from .cli import main as dcrs
    from .evaluate import EvalReport

    work = Path(work)

    def step(argv, name):
        t = time.time()
        code = dcrs(argv)
        if log is not None:
            log(f"[{name}] exit {code} in {time.time() - t:.0f}s")
        if code:
            raise StepFailed(name, code)

    common = ["--config", config, "--seed", str(seed)]
    split = work / "split"
    step(["prepare", *common, "--out", str(split)], "prepare")
    for kind, grid in ML100K_GRIDS.items():
        step(["train", *common, "--jobs", str(jobs), "--split", str(split), "--kind", kind,
              "--set", f"train.grid={json.dumps(grid)}", "--out", str(work / kind)], f"train {kind}")
    rows = {name: dict(spec, checkpoint=str(work / spec["checkpoint"])) for name, spec in ML100K_ROWS.items()}
    step(["eval", *common, "--split", str(split), "--set", f"eval.models={json.dumps(rows)}",
          "--out", str(work / "eval")], "eval")
    step(["report", *common, "--eval-dir", str(work / "eval"), "--out", str(work / "report"),
          "--set", f"report.plots={'true' if plots else 'false'}"], "report")
    return EvalReport.read(work / "eval")


def ml100k_direction(report) -> dict:
    d, n = report.rows["DCRS"], report.rows["NFM"]
    return {c: d[c] >= n[c] for c in ("UAUC", "CE@20", "CC@20")}
