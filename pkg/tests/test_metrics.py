import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcrs.metrics import (MetricError, auc, category_coverage, category_entropy, entropy, ndcg_at_k,
                          per_user_auc, rank_items, recall_at_k, relaimpr, uauc, uauc_from_arrays)

from oracles import brute_auc


@pytest.mark.parametrize("scores,labels,want", [
    ([0.9, 0.1], [1, 0], 1.0),
    ([0.1, 0.9], [1, 0], 0.0),
    ([0.5, 0.5], [1, 0], 0.5),
    ([0.8, 0.6, 0.7, 0.2], [1, 1, 0, 0], 0.75),
])
def test_auc_examples(scores, labels, want):
    assert auc(scores, labels) == want


def test_auc_single_class_is_none():
    assert auc([0.1, 0.2], [1, 1]) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_count(rows):
    scores = [s / 4 for s, _ in rows]
    labels = [l for _, l in rows]
    want = brute_auc(scores, labels)
    got = auc(scores, labels)
    if want is None:
        assert got is None
    else:
        assert abs(got - float(want)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=2, max_size=30))
def test_auc_invariant_to_monotone_transform(rows):
    scores = np.array([s / 4 for s, _ in rows])
    labels = [l for _, l in rows]
    a = auc(scores, labels)
    b = auc(np.exp(scores) * 3 + 1, labels)
    assert (a is None and b is None) or abs(a - b) < 1e-12


def test_uauc_drops_single_class_users():
    users = [0, 0, 1, 1, 2, 2]
    scores = [0.9, 0.1, 0.2, 0.8, 0.3, 0.4]
    labels = [1, 0, 1, 0, 1, 1]
    assert per_user_auc(users, scores, labels) == {0: 1.0, 1: 0.0}
    assert uauc_from_arrays(users, scores, labels) == 0.5


def test_uauc_empty():
    with pytest.raises(MetricError):
        uauc({})
    assert math.isnan(uauc({}, strict=False))


@pytest.mark.parametrize("model,base,want", [(0.8237, 0.8224, 0.40), (0.8301, 0.8193, 3.38)])
def test_relaimpr_reported_values(model, base, want):
    assert round(relaimpr(model, base), 2) == want


def test_relaimpr_identity_and_degenerate():
    assert relaimpr(0.7, 0.7) == 0.0
    with pytest.raises(MetricError):
        relaimpr(0.7, 0.5)


def test_recall_and_ndcg_hand_values():
    ranked = [5, 3, 9, 1]
    assert recall_at_k(ranked, {3, 1}, 2) == 0.5
    assert recall_at_k(ranked, {3, 1}, 4) == 1.0
    # hit at rank 2 only; ideal has both in the first two slots
    assert ndcg_at_k(ranked, {3, 1}, 2) == pytest.approx((1 / math.log2(3)) / (1 + 1 / math.log2(3)))
    assert ndcg_at_k([3, 1], {3, 1}, 2) == 1.0
    with pytest.raises(MetricError):
        recall_at_k(ranked, set(), 2)


def test_category_metrics_hand_values():
    cats = [[0], [0, 1], [2], [0]]
    targets = np.array([[1, 0, 0], [0.5, 0.5, 0], [0, 0, 1], [1, 0, 0]])
    assert category_coverage([0, 3], cats, 3, 2) == pytest.approx(1 / 3)
    assert category_coverage([1, 2], cats, 3, 2) == 1.0
    assert category_entropy([0, 3], targets, 2) == 0.0
    assert category_entropy([0, 2], targets, 2) == pytest.approx(math.log(2))
    # 1.5 / 0.5 / 0 weights
    assert category_entropy([0, 1], targets, 2) == pytest.approx(entropy([0.75, 0.25]))
    assert entropy([0.5, 0.5], base=2) == pytest.approx(1.0)


@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=8))
def test_entropy_bounded_by_log_k(w):
    q = np.array(w) / sum(w)
    assert -1e-12 <= entropy(q) <= math.log(len(q)) + 1e-12


def test_rank_items_ties_by_item():
    assert rank_items([7, 2, 5], [0.5, 0.5, 0.9]).tolist() == [5, 2, 7]
