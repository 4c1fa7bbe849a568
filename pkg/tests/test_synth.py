import numpy as np
import pytest
from scipy.stats import chisquare

from dcrs.ingest import make_split, binarize, build_catalog, read_item_categories, read_ratings
from dcrs.models import ModelConfig, build_model
from dcrs.synth import (SynthWorld, generate_world, linear_probe, probe_disentanglement, sample_interactions,
                        within_category_rank_corr, write_interactions)


@pytest.fixture(scope="module")
def world():
    return generate_world(n_users=200, n_items=600, n_categories=4, seed=11)


def test_same_seed_same_world(world):
    again = generate_world(n_users=200, n_items=600, n_categories=4, seed=11)
    assert np.array_equal(world.pref, again.pref)
    assert np.array_equal(world.item_latent, again.item_latent)
    assert world.item_categories == again.item_categories
    a = sample_interactions(world, 30, seed=2)
    b = sample_interactions(world, 30, seed=2)
    assert a.digest() == b.digest()


def test_pref_top_is_one(world):
    assert np.allclose(world.pref.max(axis=1), 1.0)
    assert world.pref.min() >= 0


def test_category_uncorrelated_with_quality(world):
    mean_q = world.quality.mean(axis=0)
    for c in range(world.n_categories):
        onehot = np.array([c in cats for cats in world.item_categories], dtype=float)
        assert abs(np.corrcoef(onehot, mean_q)[0, 1]) < 0.05


def test_label_rate_matches_probability(world):
    data, probs = sample_interactions(world, 200, seed=5, return_prob=True)
    n = len(probs)
    se = np.sqrt(np.sum(probs * (1 - probs))) / n
    assert abs(data.label.mean() - probs.mean()) < 4 * se
    np.testing.assert_allclose(probs, world.label_prob(data.user, data.item))


def test_skew_zero_exposure_is_uniform(world):
    data = sample_interactions(world, 100, seed=1, skew=0.0)
    cats = np.array([world.item_categories[i][0] for i in data.item])
    observed = np.bincount(cats, minlength=world.n_categories)
    share = np.bincount([c[0] for c in world.item_categories], minlength=world.n_categories)
    expected = share / share.sum() * len(cats)
    assert chisquare(observed, expected).pvalue > 1e-3


def test_skew_one_follows_preference(world):
    data = sample_interactions(world, 100, seed=1, skew=1.0)
    u = 0
    items = data.item[data.user == u]
    top = int(np.argmax(world.pref[u]))
    share = np.mean([top in world.item_categories[i] for i in items])
    assert share > 1 / world.n_categories


def test_every_user_spans_the_timeline(world):
    data = sample_interactions(world, 10, seed=0)
    tr = make_split(world.catalog(), data, neg_ratio=0, seed=0).train
    assert len(np.unique(tr.user)) == world.n_users


def test_world_roundtrip(world, tmp_path):
    world.save(tmp_path)
    back = SynthWorld.load(tmp_path)
    assert np.array_equal(back.pref, world.pref) and back.item_categories == world.item_categories


def test_written_files_reingest(world, tmp_path):
    data = sample_interactions(world, 5, seed=0)
    paths = write_interactions(data, world, tmp_path)
    raw = read_ratings(paths["ratings"])
    cat = build_catalog(raw, read_item_categories(paths["items"]))
    back = binarize(raw, 0.5, cat)
    assert len(back) == len(data) and int(back.label.sum()) == int(data.label.sum())


def test_probe_separable_and_noise():
    rng = np.random.default_rng(0)
    k = 3
    cats = rng.integers(0, k, 900)
    t = np.eye(k)[cats]
    x_sep = t * 3 + rng.normal(0, 0.1, t.shape)
    acc = linear_probe(x_sep[:600], t[:600], x_sep[600:], [(c,) for c in cats[600:]])
    assert acc > 0.95
    x_noise = rng.normal(size=(900, 4))
    acc = linear_probe(x_noise[:600], t[:600], x_noise[600:], [(c,) for c in cats[600:]])
    chance = np.bincount(cats[600:]).max() / 300
    assert acc <= chance + 0.1


def test_true_quality_ranks_perfectly(world):
    data = sample_interactions(world, 30, seed=0)
    split = make_split(world.catalog(), data, neg_ratio=0, seed=0)
    corr, n = within_category_rank_corr(world.quality, world, split)
    assert n > 0 and corr == pytest.approx(1.0)
    corr, _ = within_category_rank_corr(-world.quality, world, split)
    assert corr == pytest.approx(-1.0)


def test_untrained_model_probe_reports_chance_field(world):
    data = sample_interactions(world, 30, seed=0)
    split = make_split(world.catalog(), data, neg_ratio=0, seed=0)
    model = build_model(world.catalog(), ModelConfig(kind="dcrs", d=8), 0)
    model.known_users[:] = True
    res = probe_disentanglement(model, world, split, epochs=5)
    assert 0 < res.chance <= 1 and res.acc_c is not None and res.acc_ci is not None
    # random initial embeddings carry no quality signal
    assert abs(res.rank_corr) < 0.1
