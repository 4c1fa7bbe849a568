"""Run configuration: one YAML file with a section per pipeline stage."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, get_type_hints

import yaml

from .models import ConfigError, ModelConfig


@dataclass
class DataConfig:
    ratings: Optional[str] = None
    items: Optional[str] = None
    users: Optional[str] = None
    user_feature_names: Optional[list] = None
    threshold: float = 3.0
    kcore: int = 0
    encoding: str = "utf-8"
    split_dir: Optional[str] = None


@dataclass
class SplitConfig:
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    neg_ratio: int = 1
    eval_negatives: str = "raw"
    per_user: bool = False


@dataclass
class SynthConfig:
    n_users: int = 500
    n_items: int = 2000
    n_categories: int = 5
    latent_dim: int = 8
    n_exposures: int = 100
    skew: float = 1.0
    quality_scale: float = 1.0
    quality_mean: float = 0.0
    multi_category_rate: float = 0.0


@dataclass
class TrainConfig:
    grid: dict = field(default_factory=dict)
    resume: Optional[str] = None


@dataclass
class RerankConfig:
    checkpoint: Optional[str] = None
    methods: list = field(default_factory=lambda: ["mmr", "dpp"])
    theta: float = 0.5
    pool_size: int = 200
    k: int = 20
    users: Optional[list] = None


@dataclass
class EvalConfig:
    # name -> {checkpoint, rule ('p' | 'ci'), rerank (null | 'mmr' | 'dpp'), theta}
    models: dict = field(default_factory=dict)
    base: Optional[str] = None
    ks: list = field(default_factory=lambda: [10, 20])
    category_top_n: int = 3


@dataclass
class ReportConfig:
    eval_dir: Optional[str] = None
    users: Optional[list] = None
    n_sample_users: int = 1
    k: int = 10
    plots: bool = False


@dataclass
class RunConfig:
    seed: Optional[int] = None
    out: Optional[str] = None
    jobs: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        return _build(cls, d or {}, "")

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``section.key=value`` (or top-level ``key=value``) strings; values parse as YAML."""
        d = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            path = key.strip().split(".")
            node = d
            for part in path[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[part]
            if path[-1] not in node and not _open_mapping(path):
                raise ConfigError(f"unknown config key {key!r}")
            node[path[-1]] = yaml.safe_load(raw)
        return RunConfig.from_dict(d)


def _open_mapping(path) -> bool:
    # free-form mappings whose keys are user-chosen
    return len(path) >= 3 and tuple(path[:2]) in {("train", "grid"), ("eval", "models")}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or '<root>'}: {', '.join(unknown)}")
    kw = {}
    defaults = cls()
    hints = get_type_hints(cls)
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and value is not None:
            kw[name] = _build(type(current), value, f"{where}{name}.")
        else:
            kw[name] = _coerce(value, hints.get(name), f"{where}{name}")
    return replace(defaults, **kw)


def _coerce(value, hint, where: str):
    # YAML reads "1e-3" as a string and "1" as an int; honour the declared scalar type
    if value is None or hint not in (float, int, bool):
        return value
    if hint is float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, hint) and not (hint is int and isinstance(value, bool)):
        return value
    raise ConfigError(f"{where}: expected {hint.__name__}, got {value!r}")


def load_config(path, overrides=()) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return RunConfig.from_dict(raw).with_overrides(overrides)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False, default_flow_style=False)
    return path
