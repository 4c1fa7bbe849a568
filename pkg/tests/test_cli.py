import json
import shutil

import numpy as np
import pytest
import yaml

from dcrs import ingest
from dcrs.cli import main
from dcrs.config import ConfigError, RunConfig, dump_config, load_config
from dcrs.graph import ParamStore
from dcrs.io import ChainError, load_model, load_params, save_model, save_params, verify_chain
from dcrs.models import ModelConfig, build_model, train

SMALL = ["synth.n_users=40", "synth.n_items=90", "synth.n_categories=3", "synth.n_exposures=30"]
MODEL = ["model.d=4", "model.max_epochs=2", "model.patience=1"]


def _sets(pairs):
    return [a for p in pairs for a in ("--set", p)]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "1", "--out", str(root / "world")] + _sets(SMALL)) == 0
    assert main(["prepare", "--ratings", str(root / "world/ratings.tsv"), "--items", str(root / "world/items.tsv"),
                 "--threshold", "0.5", "--neg-ratio", "0", "--out", str(root / "split")]) == 0
    for kind in ("nfm", "dcrs"):
        assert main(["train", "--seed", "0", "--split", str(root / "split"), "--kind", kind,
                     "--out", str(root / kind)] + _sets(MODEL)) == 0
    models = {"NFM": {"checkpoint": str(root / "nfm")},
              "MMR": {"checkpoint": str(root / "nfm"), "rerank": "mmr", "theta": 0.5},
              "DCRS": {"checkpoint": str(root / "dcrs")},
              "DCRS_CI": {"checkpoint": str(root / "dcrs"), "rule": "ci"}}
    assert main(["eval", "--split", str(root / "split"), "--base", "NFM", "--out", str(root / "eval"),
                 "--set", f"eval.models={json.dumps(models)}"]) == 0
    return root


def test_pipeline_outputs(pipeline):
    for f in ("world/manifest.json", "split/manifest.json", "nfm/params.npz", "dcrs/train_log.jsonl",
              "eval/manifest.json", "eval/config.frozen.yaml"):
        assert (pipeline / f).exists(), f
    links = {p.rsplit("/", 1)[-1] for p in verify_chain(pipeline / "eval")}
    assert links == {"eval", "split", "nfm", "dcrs"}


def test_rerank_writes_lists(pipeline, tmp_path):
    assert main(["rerank", "--split", str(pipeline / "split"), "--checkpoint", str(pipeline / "nfm"),
                 "--out", str(tmp_path), "--set", "rerank.k=5", "--set", "rerank.users=[0, 1]"]) == 0
    rows = (tmp_path / "dpp.tsv").read_text().splitlines()
    assert rows[0] == "user\titem\tscore\trank"
    mmr = [r.split("\t") for r in (tmp_path / "mmr.tsv").read_text().splitlines()[1:]]
    assert len(mmr) == 10 and [int(r[3]) for r in mmr[:5]] == [1, 2, 3, 4, 5]


def test_report_and_frozen_config_rerun(pipeline, tmp_path, capsys):
    assert main(["report", "--eval-dir", str(pipeline / "eval"), "--out", str(tmp_path / "r")]) == 0
    table = (tmp_path / "r" / "table.tsv").read_text()
    assert table.splitlines()[0].startswith("Method")
    assert [l.split("\t")[0] for l in table.splitlines()[1:]] == ["NFM", "MMR", "DCRS", "DCRS_CI"]
    # the frozen config replays to identical metric files
    frozen = pipeline / "eval" / "config.frozen.yaml"
    assert main(["eval", "--config", str(frozen), "--out", str(tmp_path / "again")]) == 0
    for f in ("report.tsv", "records.json"):
        assert (tmp_path / "again" / f).read_bytes() == (pipeline / "eval" / f).read_bytes()


def test_tampering_breaks_the_chain(pipeline, tmp_path):
    copy = tmp_path / "nfm"
    shutil.copytree(pipeline / "nfm", copy)
    with open(copy / "params.npz", "ab") as fh:
        fh.write(b"x")
    split = ingest.load_split(pipeline / "split")
    with pytest.raises(ChainError, match="hash mismatch"):
        load_model(copy, split)
    assert main(["eval", "--split", str(pipeline / "split"), "--out", str(tmp_path / "e"),
                 "--set", f"eval.models={json.dumps({'NFM': {'checkpoint': str(copy)}})}"]) == 2


def test_checkpoint_roundtrip_is_bit_exact(pipeline, tmp_path):
    split = ingest.load_split(pipeline / "split")
    m = load_model(pipeline / "dcrs", split)
    save_model(m, tmp_path, 0, pipeline / "split")
    back = load_model(tmp_path, split)
    for name in m.params.names():
        assert np.array_equal(m.params[name], back.params[name])
        assert np.array_equal(m.params.accum[name], back.params.accum[name])
    assert back.params.lr_scale == m.params.lr_scale
    users, items = np.arange(5), np.arange(5)
    assert np.array_equal(m.score(users, items), back.score(users, items))


def test_param_store_roundtrip(tmp_path):
    s = ParamStore()
    s.add("a", np.arange(6.0).reshape(2, 3))
    s.freeze("a", np.array([[True, False, False], [False, False, True]]))
    s.lr_scale["a"] = 3.0
    save_params(s, tmp_path / "p.npz", {"flag": np.array([1, 0])})
    back, extra = load_params(tmp_path / "p.npz")
    assert np.array_equal(back["a"], s["a"]) and np.array_equal(back.frozen["a"], s.frozen["a"])
    assert back.lr_scale == {"a": 3.0} and extra["flag"].tolist() == [1, 0]


def test_split_mismatch_is_a_chain_error(pipeline, tmp_path):
    assert main(["prepare", "--ratings", str(pipeline / "world/ratings.tsv"),
                 "--items", str(pipeline / "world/items.tsv"), "--threshold", "0.5", "--neg-ratio", "1",
                 "--out", str(tmp_path / "other")]) == 0
    with pytest.raises(ChainError, match="different split"):
        load_model(pipeline / "nfm", ingest.load_split(tmp_path / "other"))


def test_missing_seed_is_an_argparse_error(pipeline):
    with pytest.raises(SystemExit) as err:
        main(["train", "--split", str(pipeline / "split")])
    assert err.value.code == 2


def test_bad_input_exits_2(tmp_path):
    (tmp_path / "r.tsv").write_text("1\t2\tnot-a-number\t4\n")
    (tmp_path / "i.tsv").write_text("2\tx\n")
    assert main(["prepare", "--ratings", str(tmp_path / "r.tsv"), "--items", str(tmp_path / "i.tsv"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--seed", "0", "--split", str(tmp_path / "nope"), "--out", str(tmp_path / "t")]) == 2
    assert main(["train", "--seed", "0", "--set", "model.lam=-1", "--out", str(tmp_path / "t")]) == 2
    assert main(["train", "--seed", "0", "--set", "model.nonsense=1"]) == 2


def test_divergence_exits_3(pipeline, tmp_path):
    code = main(["train", "--seed", "0", "--split", str(pipeline / "split"), "--out", str(tmp_path),
                 "--set", "model.lr=1e300"] + _sets(MODEL))
    assert code == 3


def test_eval_errors_exit_4(pipeline, tmp_path):
    models = json.dumps({"NFM": {"checkpoint": str(pipeline / "nfm")}})
    assert main(["eval", "--split", str(pipeline / "split"), "--base", "XYZ", "--out", str(tmp_path),
                 "--set", f"eval.models={models}"]) == 4


def test_config_overrides_and_unknown_keys(tmp_path):
    cfg = RunConfig().with_overrides(["model.lam=0.5", "train.grid.lr=[0.01, 0.1]", "seed=3"])
    assert cfg.model.lam == 0.5 and cfg.train.grid == {"lr": [0.01, 0.1]} and cfg.seed == 3
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["model.lamda=0.5"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["nothing"])
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"d": 4, "bogus": 1}})
    path = dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg
    assert yaml.safe_load(path.read_text())["model"]["lam"] == 0.5


def test_shipped_config_loads():
    cfg = load_config("configs/ml100k.yaml")
    assert cfg.model.d == 64 and cfg.eval.base == "NFM"
