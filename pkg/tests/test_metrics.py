import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioloop.metrics import (
    average_precision,
    metrics_from_confusion,
    roc_auc,
    roc_auc_fixed,
)
from cardioloop.signals import ParameterError


def roc_auc_pair_oracle(scores, labels):
    """Probability a random positive outranks a random negative (ties = 1/2)."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_equal_scores(self):
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_hand_enumerated_example(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        assert roc_auc(scores, labels) == pytest.approx(0.75)
        assert roc_auc_pair_oracle(scores, labels) == pytest.approx(0.75)

    def test_single_class_rejected(self):
        with pytest.raises(ParameterError):
            roc_auc([0.1, 0.9], [1, 1])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1, allow_nan=False),
                              st.integers(0, 1)), min_size=4, max_size=40))
    def test_matches_pairwise_oracle(self, pairs):
        scores = [p[0] for p in pairs]
        labels = [p[1] for p in pairs]
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        assert roc_auc(scores, labels) == pytest.approx(
            roc_auc_pair_oracle(scores, labels), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1, allow_nan=False),
                              st.integers(0, 1)), min_size=4, max_size=40))
    def test_antisymmetry(self, pairs):
        scores = np.array([p[0] for p in pairs])
        labels = [p[1] for p in pairs]
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        lhs = roc_auc(-scores, labels)
        rhs = 1.0 - roc_auc(scores, labels)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_fixed_grid_differs_on_coarse_data(self):
        # the two AUC conventions disagree measurably on small sets
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=30)
        labels = (scores + rng.normal(0, 0.3, 30) > 0.5).astype(int)
        exact = roc_auc(scores, labels)
        approx = roc_auc_fixed(scores, labels, 200)
        assert approx == pytest.approx(exact, abs=0.1)
        assert 0.0 <= approx <= 1.0


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([0.1, 0.9, 0.8, 0.2], [0, 1, 1, 0]) == 1.0

    def test_worst_ranking(self):
        # positives ranked last: AP = sum over positives of k/(n_neg+k) steps
        ap = average_precision([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1])
        # hand enumeration: recall steps at ranks 3,4 with precision 1/3, 2/4
        assert ap == pytest.approx(0.5 * (1 / 3) + 0.5 * (2 / 4))


class TestConfusionMetrics:
    def test_perfect_classifier(self):
        cm = metrics_from_confusion([[50, 0], [0, 50]])
        assert cm.accuracy == 1.0
        assert np.all(cm.precision == 1.0)
        assert np.all(cm.recall == 1.0)

    def test_hand_summed_binary_matrix(self):
        cm = metrics_from_confusion([[45, 5], [10, 40]])
        assert cm.accuracy == pytest.approx(0.85)
        assert cm.precision[1] == pytest.approx(40 / 45)
        assert cm.recall[1] == pytest.approx(0.80)
        assert cm.specificity[1] == pytest.approx(0.90)
        assert cm.f1[1] == pytest.approx(2 * (40 / 45) * 0.8 / ((40 / 45) + 0.8))

    def test_degenerate_predictions_flagged(self):
        # every sample predicted class 0: precision for class 1 is undefined
        cm = metrics_from_confusion([[30, 0], [20, 0]])
        assert cm.recall[0] == 1.0
        assert cm.recall[1] == 0.0
        assert cm.precision[1] == 0.0
        assert "precision[1]" in cm.undefined

    def test_f1_is_harmonic_mean(self):
        cm = metrics_from_confusion([[8, 2, 0], [1, 9, 1], [0, 3, 6]])
        for i in range(3):
            p, r = cm.precision[i], cm.recall[i]
            assert cm.f1[i] == pytest.approx(2 * p * r / (p + r), abs=1e-9)

    def test_row_sums_are_class_counts(self):
        c = np.array([[45, 5], [10, 40]])
        cm = metrics_from_confusion(c)
        assert cm.confusion.sum() == 100
        np.testing.assert_array_equal(cm.confusion.sum(axis=1), [50, 50])
