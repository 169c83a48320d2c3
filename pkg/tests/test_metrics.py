"""AUC vs pairwise oracle, logloss, long-tail splits, CTR-stability KL."""
from collections import Counter

import numpy as np
import pytest

from priorctr.embedding import FieldSpec, Schema
from priorctr.metrics import (DegenerateLabels, EmptySet, KlCell, NoItemField,
                              auc, kl_distance, kl_report, logloss,
                              longtail_split, mean_kl)
from priorctr.stream import Period, PeriodStream


def auc_pairwise_oracle(scores, labels):
    """O(n^2) Mann-Whitney count: wins + half-ties over all pos/neg pairs."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_matches_pairwise_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(10, 120))
            scores = np.round(rng.uniform(0, 1, size=n), 2)  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            ref = auc_pairwise_oracle(scores, labels)
            assert auc(scores, labels) == pytest.approx(ref, abs=1e-12)

    def test_all_tied_is_half(self):
        labels = np.array([0, 1, 0, 1, 1])
        assert auc(np.full(5, 0.3), labels) == pytest.approx(0.5, abs=1e-15)

    def test_perfect_separation_is_one(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([0, 0, 1, 1])
        assert auc(scores, labels) == 1.0
        assert auc(-scores, labels) == 0.0

    def test_degenerate_labels_rejected(self):
        with pytest.raises(DegenerateLabels):
            auc(np.array([0.1, 0.2]), np.array([1, 1]))


class TestLogloss:
    def test_matches_mean_bce(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, size=40)
        y = rng.integers(0, 2, size=40)
        ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert logloss(p, y) == pytest.approx(ref, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptySet):
            logloss(np.array([]), np.array([]))


class TestLongtailSplit:
    def test_top_fraction_by_frequency(self):
        counts = Counter({10: 100, 11: 50, 12: 10, 13: 5, 14: 1})
        test_items = np.array([10, 11, 12, 13, 14, 10])
        short, tail = longtail_split(counts, test_items, head_fraction=0.2)
        # 1 of 5 distinct items is short-hot: item 10
        assert short.tolist() == [True, False, False, False, False, True]
        np.testing.assert_array_equal(tail, ~short)

    def test_ties_broken_by_item_index(self):
        counts = Counter({5: 10, 3: 10, 7: 1, 9: 1, 11: 1})
        short, _ = longtail_split(counts, np.array([3, 5]), head_fraction=0.2)
        assert short.tolist() == [True, False]

    def test_unseen_items_are_long_tail(self):
        counts = Counter({1: 5, 2: 4, 3: 3, 4: 2, 5: 1})
        short, tail = longtail_split(counts, np.array([99]), head_fraction=0.4)
        assert tail.tolist() == [True]

    def test_empty_counts_rejected(self):
        with pytest.raises(NoItemField):
            longtail_split(Counter(), np.array([1]))


class TestKlDistance:
    def test_matches_direct_formula(self):
        for q, p in [(0.3, 0.1), (0.5, 0.5), (0.01, 0.4), (0.9, 0.2)]:
            ref = q * np.log(q / p) + (1 - q) * np.log((1 - q) / (1 - p))
            assert kl_distance(q, p) == pytest.approx(ref, abs=1e-12)

    def test_identical_rates_zero(self):
        assert kl_distance(0.37, 0.37) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            q, p = rng.uniform(0.001, 0.999, size=2)
            assert kl_distance(q, p) >= 0.0

    def test_asymmetric(self):
        assert kl_distance(0.3, 0.1) != kl_distance(0.1, 0.3)

    def test_degenerate_rates_finite(self):
        assert np.isfinite(kl_distance(0.0, 0.5))
        assert np.isfinite(kl_distance(0.5, 1.0))


def two_period_stream(ctrs_a, ctrs_b, n=400, seed=0):
    """One one-hot field, two values; exact click counts per period."""
    schema = Schema([FieldSpec("f0", 2, indexed=True)], item_field="f0")
    periods = []
    for t, ctrs in enumerate((ctrs_a, ctrs_b), start=1):
        idx, labels = [], []
        for v, ctr in enumerate(ctrs):
            clicks = int(round(n * ctr))
            idx += [v] * n
            labels += [1] * clicks + [0] * (n - clicks)
        periods.append(Period(t, [np.array(idx)], [None],
                              np.array(labels, dtype=float), np.array(idx)))
    return PeriodStream(schema, periods)


class TestKlReport:
    def test_feature_cells_match_hand_computation(self):
        stream = two_period_stream([0.2, 0.4], [0.3, 0.4])
        cells = kl_report(stream, feature_values=[0])
        feat = [c for c in cells if c.granularity == "FEATURE"]
        assert len(feat) == 2
        # value 0: period CTRs 0.2 and 0.3, average 0.25
        assert feat[0].kl == pytest.approx(kl_distance(0.2, 0.25), abs=1e-12)
        assert feat[1].kl == pytest.approx(kl_distance(0.3, 0.25), abs=1e-12)
        assert all(c.impressions == 400 and not c.sparse for c in feat)

    def test_instance_groups_cover_conjunctions(self):
        stream = two_period_stream([0.2, 0.4], [0.2, 0.4])
        cells = kl_report(stream)
        groups = {c.key for c in cells if c.granularity == "INSTANCE_GROUP"}
        assert groups == {"group:0", "group:1"}

    def test_stationary_stream_has_zero_kl(self):
        stream = two_period_stream([0.25, 0.5], [0.25, 0.5])
        cells = kl_report(stream)
        assert all(c.kl == pytest.approx(0.0, abs=1e-12) for c in cells)

    def test_sparse_flag_below_threshold(self):
        stream = two_period_stream([0.2], [0.4], n=5)
        cells = kl_report(stream, feature_values=[0], min_impressions=10)
        assert all(c.sparse for c in cells)

    def test_default_feature_selection_is_most_frequent(self):
        schema = Schema([FieldSpec("f0", 3, indexed=True)], item_field="f0")
        idx = np.array([0, 1, 1, 1, 2])
        p = Period(1, [idx], [None], np.zeros(5), idx)
        cells = kl_report(PeriodStream(schema, [p, p]))
        feat_keys = {c.key for c in cells if c.granularity == "FEATURE"}
        assert feat_keys == {"value:1"}


class TestMeanKl:
    def test_ignores_sparse_cells(self):
        cells = [KlCell(1, "a", "FEATURE", 0.5, 100, sparse=False),
                 KlCell(2, "a", "FEATURE", 0.9, 3, sparse=True),
                 KlCell(1, "g", "INSTANCE_GROUP", 0.2, 50, sparse=False)]
        assert mean_kl(cells, "FEATURE") == 0.5
        assert mean_kl(cells, "INSTANCE_GROUP") == 0.2

    def test_empty_is_nan(self):
        assert np.isnan(mean_kl([], "FEATURE"))
