import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcrs.graph import Tape
from dcrs.ingest import Interactions, make_split
from dcrs.models import (ColdStartError, ConfigError, ModelConfig, TrainingDiverged, build_model, dcrs_objective,
                         grid_search, ips_weights, param_count, predict_for_ranking, train, unawareness_variant)
from dcrs.synth import generate_world, sample_interactions

from oracles import soft_ce, tiny_catalog


@pytest.fixture(scope="module")
def small_split():
    world = generate_world(n_users=60, n_items=150, n_categories=3, seed=3)
    data = sample_interactions(world, 40, seed=3)
    return make_split(world.catalog(), data, neg_ratio=0, seed=3)


def _batch(cat, rng, b=8):
    users = rng.integers(0, cat.n_users, b)
    items = rng.integers(0, cat.n_items, b)
    return users, items, rng.integers(0, 2, b).astype(float)


def test_zero_embeddings_give_half():
    cat = tiny_catalog(np.random.default_rng(0))
    m = build_model(cat, ModelConfig(d=4), 0)
    for name in m.params.names():
        m.params.values[name][:] = 0.0
    assert np.all(m.score(np.arange(4), np.arange(4)) == 0.5)


def test_two_feature_hand_example():
    cat = tiny_catalog(np.random.default_rng(0), side=False)
    cfg = ModelConfig(d=2, bias_field=False, use_category=False, side_features=False)
    m = build_model(cat, cfg, 0)
    m.params.values["emb/user"][:] = [1.0, 0.0]
    m.params.values["emb/item"][:] = [0.0, 2.0]
    m.params.values["W"][:] = [1.0, 1.0]
    out = m.forward(Tape(m.params), np.array([0]), np.array([1]))
    assert np.array_equal(out.nodes["h"].value, np.zeros((1, 2)))
    assert out.p[0] == 0.5


def test_dcrs_w2_zero_gives_half():
    cat = tiny_catalog(np.random.default_rng(1))
    m = build_model(cat, ModelConfig(kind="dcrs", d=3), 0)
    m.params.values["W2"][:] = 0.0
    assert np.all(m.score(np.arange(4), np.arange(4)) == 0.5)


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(kind="dcrs", lam=-0.1).validate()


def test_stop_gradient_contract():
    rng = np.random.default_rng(2)
    cat = tiny_catalog(rng)
    m = build_model(cat, ModelConfig(kind="dcrs", d=4), 0)
    users, items, y = _batch(cat, rng)
    tape = Tape(m.params)
    out = m.forward(tape, users, items, y=y)
    rec = tape.binary_xent(out.nodes["p"], y)
    tape.backward(rec)
    assert np.array_equal(out.nodes["h_ci"].grad, np.zeros_like(out.nodes["h_ci"].value))
    assert np.all(m.params.grads["W1"] == 0)
    assert np.any(m.params.grads["W2"] != 0)


def _disc_ci_numeric(h_ci, w, b, target, eps=1e-6):
    """d soft_xent(h_ci @ w + b) / d h_ci by central differences."""
    g = np.zeros_like(h_ci)
    for idx in np.ndindex(h_ci.shape):
        a, c = h_ci.copy(), h_ci.copy()
        a[idx] += eps
        c[idx] -= eps
        g[idx] = (soft_ce(a @ w + b, target) - soft_ce(c @ w + b, target)) / (2 * eps)
    return g


@pytest.mark.parametrize("lam", [0.1, 1.0])
def test_grl_sign_on_representation_and_discriminator(lam):
    rng = np.random.default_rng(4)
    cat = tiny_catalog(rng)
    m = build_model(cat, ModelConfig(kind="dcrs", d=3, lam=lam), 0)
    users, items, y = _batch(cat, rng)
    target = cat.targets[items]
    tape = Tape(m.params)
    out = m.forward(tape, users, items, y=y, target=target)
    logits = out.nodes["logits_ci"]
    d_ci = tape.soft_xent(logits, target)
    tape.backward(tape.scale(d_ci, lam))
    h_ci = out.nodes["h_ci"].value
    w, b = m.params["disc_ci/W"], m.params["disc_ci/b"]
    want = _disc_ci_numeric(h_ci, w, b, target)
    np.testing.assert_allclose(out.nodes["h_ci"].grad, -lam * want, rtol=1e-6, atol=1e-9)
    # discriminator weights descend: gradient has the ordinary sign
    gw = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        a, c = w.copy(), w.copy()
        a[idx] += 1e-6
        c[idx] -= 1e-6
        gw[idx] = (soft_ce(h_ci @ a + b, target) - soft_ce(h_ci @ c + b, target)) / 2e-6
    np.testing.assert_allclose(m.params.grads["disc_ci/W"], lam * gw, rtol=1e-6, atol=1e-9)


def test_loss_recomposes_from_terms():
    rng = np.random.default_rng(6)
    cat = tiny_catalog(rng)
    for lam in (0.0, 0.05, 1.0):
        m = build_model(cat, ModelConfig(kind="dcrs", d=4, lam=lam, l2=0.1), 1)
        users, items, y = _batch(cat, rng, 12)
        out = m.forward(Tape(m.params), users, items, y=y)
        t = out.terms
        assert all(v >= 0 for v in t.values())
        emb = out.nodes["emb"].value
        reg = 0.1 * float((emb * emb).sum()) / len(users)
        assert out.total == pytest.approx(t["rec"] + t["rec_ci"] + lam * (t["disc_c"] + t["disc_ci"]) + reg,
                                          abs=1e-6)
        assert out.objective == pytest.approx(dcrs_objective(t, lam) + reg, abs=1e-6)


def test_lambda_zero_half_probabilities_give_two_ln2():
    cat = tiny_catalog(np.random.default_rng(0))
    m = build_model(cat, ModelConfig(kind="dcrs", d=2, lam=0.0), 0)
    m.params.values["W1"][:] = 0.0
    m.params.values["W2"][:] = 0.0
    out = m.forward(Tape(m.params), np.array([0, 1]), np.array([0, 1]), y=np.array([1.0, 1.0]))
    assert out.total == pytest.approx(2 * math.log(2), abs=1e-12)


def test_factorized_ordering_follows_category_head():
    """Identical independent halves: p orders exactly as the category head does."""
    rng = np.random.default_rng(7)
    cat = tiny_catalog(rng, n_items=6, n_categories=3, multi=False)
    m = build_model(cat, ModelConfig(kind="dcrs", d=3), 0)
    d = 3
    emb = m.params.values["emb/item"]
    emb[1:, :d] = emb[0, :d]
    cat_emb = m.params.values["emb/category"]
    cat_emb[:, :d] = cat_emb[0, :d]
    out = m.forward(Tape(m.params), np.zeros(6, dtype=np.int64), np.arange(6))
    h_ci = out.nodes["h_ci"].value
    assert np.allclose(h_ci, h_ci[0])
    assert np.array_equal(np.argsort(out.p, kind="stable"), np.argsort(out.category_head, kind="stable"))


def test_same_category_items_rank_alike_under_both_rules():
    rng = np.random.default_rng(8)
    cat = tiny_catalog(rng, n_items=6, n_categories=2, multi=False, side=False)
    cat = replace(cat, item_categories=tuple([(0,)] * 6))
    m = build_model(cat, ModelConfig(kind="dcrs", d=3), 0)
    d = 3
    # quality lives only in the independent half; the dependent half is shared
    m.params.values["emb/item"][:, d:] = m.params.values["emb/item"][0, d:]
    m.params.values["W1"][:] = 2.0 * m.params["W2"][:d]
    p = m.score(np.zeros(6, dtype=np.int64), np.arange(6), "p")
    ci = m.score(np.zeros(6, dtype=np.int64), np.arange(6), "ci")
    assert len(set(p.tolist())) == 6
    assert np.array_equal(np.argsort(p), np.argsort(ci))


def test_score_matrix_matches_pairwise_forward():
    rng = np.random.default_rng(9)
    cat = tiny_catalog(rng, n_users=4, n_items=6, n_categories=3)
    for kind, rule in (("nfm", "p"), ("dcrs", "p"), ("dcrs", "ci"), ("unawareness", "p")):
        m = build_model(cat, ModelConfig(kind=kind, d=3), 1)
        full = m.score_matrix(np.arange(4), np.arange(6), rule)
        uu, ii = np.meshgrid(np.arange(4), np.arange(6), indexing="ij")
        pair = m.score(uu.ravel(), ii.ravel(), rule).reshape(4, 6)
        np.testing.assert_allclose(full, pair, rtol=0, atol=1e-12)


def test_identical_items_identical_scores_and_frozen_rescoring():
    cat = tiny_catalog(np.random.default_rng(10))
    m = build_model(cat, ModelConfig(kind="dcrs", d=3), 0)
    m.params.values["emb/item"][1] = m.params.values["emb/item"][0]
    cat2 = replace(cat, item_categories=(cat.item_categories[0],) * 2 + tuple(cat.item_categories[2:]))
    m2 = build_model(cat2, ModelConfig(kind="dcrs", d=3), 0)
    m2.params = m.params
    s = m2.score(np.array([0, 0]), np.array([0, 1]))
    assert s[0] == s[1]
    a = m.score(np.arange(4), np.arange(4))
    b = m.score(np.arange(4), np.arange(4))
    assert np.array_equal(a, b)


def test_unawareness_schema_and_parameter_count():
    cat = tiny_catalog(np.random.default_rng(11), n_categories=4)
    base = ModelConfig(d=5)
    nfm = build_model(cat, base, 0)
    un = build_model(cat, unawareness_variant(base), 0)
    assert [f.name for f in nfm.encoder.fields if f.name not in [g.name for g in un.encoder.fields]] == ["category"]
    assert param_count(nfm) - param_count(un) == cat.n_categories * base.d


def test_unawareness_ignores_category_labels():
    cat = tiny_catalog(np.random.default_rng(12), n_categories=3, multi=False)
    m = build_model(cat, unawareness_variant(ModelConfig(d=3)), 0)
    perm = replace(cat, item_categories=tuple(((c[0] + 1) % 3,) for c in cat.item_categories))
    m2 = build_model(perm, unawareness_variant(ModelConfig(d=3)), 0)
    m2.params = m.params
    assert np.array_equal(m.score(np.arange(4), np.arange(4)), m2.score(np.arange(4), np.arange(4)))


def _ips_catalog():
    rng = np.random.default_rng(0)
    cat = tiny_catalog(rng, n_users=2, n_items=3, n_categories=2, side=False)
    return replace(cat, item_categories=((0,), (1,), (0,)))


def test_ips_single_category_user_weight_one():
    cat = _ips_catalog()
    train = Interactions([0, 0], [0, 2], [1, 1], [0, 1])
    assert np.array_equal(ips_weights(train, cat, 0.05), [1.0, 1.0])


def test_ips_hand_example():
    cat = _ips_catalog()
    hist = np.array([[0.9, 0.1], [0.0, 0.0]])
    train = Interactions([0], [1], [1], [0])
    assert ips_weights(train, cat, 0.05, history=hist)[0] == pytest.approx(10.0)


def test_ips_clipping():
    cat = _ips_catalog()
    hist = np.array([[0.999, 0.001], [1.0, 0.0]])
    train = Interactions([0], [1], [1], [0])
    assert ips_weights(train, cat, 0.01, history=hist)[0] == pytest.approx(100.0)


def test_ips_empty_history_weight_one():
    cat = _ips_catalog()
    train = Interactions([1], [1], [1], [0])
    assert ips_weights(train, cat, 0.05, history=np.zeros((2, 2)))[0] == 1.0


def test_cold_start_user_is_an_error(small_split):
    m = build_model(small_split.catalog, ModelConfig(d=4), 0)
    with pytest.raises(ColdStartError):
        predict_for_ranking(m, 0, [0, 1])


def test_patience_zero_runs_one_epoch(small_split):
    r = train(build_model(small_split.catalog, ModelConfig(d=4, patience=0), 0), small_split, 0)
    assert len(r.log) == 1 and r.best_epoch == 1


def test_training_log_is_deterministic(small_split):
    cfg = ModelConfig(kind="dcrs", d=4, max_epochs=3)
    a = train(build_model(small_split.catalog, cfg, 5), small_split, 5)
    b = train(build_model(small_split.catalog, cfg, 5), small_split, 5)
    assert [r.to_dict() for r in a.log] == [r.to_dict() for r in b.log]
    assert all(r.disc_c is not None and r.disc_ci is not None and r.rec_ci is not None for r in a.log)


def test_resume_continues_epoch_counter(small_split):
    cfg = ModelConfig(d=4, max_epochs=2, patience=10)
    r = train(build_model(small_split.catalog, cfg, 0), small_split, 0)
    m = r.model
    m.config = replace(cfg, max_epochs=4)
    r2 = train(m, small_split, 0)
    assert [x.epoch for x in r2.log] == [r.best_epoch + 1 + j for j in range(len(r2.log))]


def test_divergence_raises_with_last_good(small_split):
    m = build_model(small_split.catalog, ModelConfig(d=4), 0)
    m.params.values["W"][:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(m, small_split, 0)
    assert err.value.last_good is not None and err.value.batch is not None


def test_grid_of_one_is_single_run(small_split):
    base = ModelConfig(d=4, max_epochs=2)
    best, trace = grid_search(small_split.catalog, small_split, base, {"lam": [0.1]}, 0)
    direct = train(build_model(small_split.catalog, replace(base, lam=0.1), 0), small_split, 0)
    assert len(trace) == 1 and trace[0]["decided_by"] == "only run"
    assert best.best_val_uauc == direct.best_val_uauc


def test_grid_tie_break_prefers_smaller_lambda(small_split):
    # nfm ignores lambda, so every run ties on UAUC and loss
    best, trace = grid_search(small_split.catalog, small_split, ModelConfig(d=4, max_epochs=2),
                              {"lam": [1.0, 0.05, 0.5]}, 0)
    win = [t for t in trace if t.get("winner")][0]
    assert win["params"] == {"lam": 0.05} and win["decided_by"] == "lam"
    assert sorted(t["rank"] for t in trace) == [1, 2, 3]


def test_lambda_zero_frozen_category_half_tracks_nfm():
    world = generate_world(n_users=300, n_items=600, n_categories=3, seed=1)
    split = make_split(world.catalog(), sample_interactions(world, 60, seed=1), neg_ratio=0, seed=1)
    cat = split.catalog
    nfm = train(build_model(cat, ModelConfig(d=8, max_epochs=10), 0), split, 0)
    m = build_model(cat, ModelConfig(kind="dcrs", d=8, lam=0.0, max_epochs=10), 0)
    m.params.values["W2"][8:] = 0.0
    m.params.freeze("W2", np.r_[np.zeros(8, bool), np.ones(8, bool)])
    r = train(m, split, 0)
    assert np.all(r.model.params["W2"][8:] == 0)
    assert abs(r.best_val_uauc - nfm.best_val_uauc) < 0.03


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_probabilities_in_open_interval(seed):
    rng = np.random.default_rng(seed)
    cat = tiny_catalog(rng)
    m = build_model(cat, ModelConfig(kind="dcrs", d=int(rng.integers(1, 6))), seed)
    users, items, y = _batch(cat, rng)
    out = m.forward(Tape(m.params), users, items, y=y)
    assert np.all((out.p > 0) & (out.p < 1)) and np.all((out.p_ci > 0) & (out.p_ci < 1))
    assert all(v >= 0 for v in out.terms.values())
