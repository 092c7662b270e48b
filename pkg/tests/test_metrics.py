import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmil.errors import MetricError
from mmil.metrics import accuracy, roc_auc
from reference import pairwise_auc


class TestAuc:
    def test_perfect(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_reversed(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied(self):
        assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_partial_ties(self):
        # pairs: (0.5 vs 0.5) tie, (0.5 vs 0.1) win, (0.9 vs both) win -> 3.5 / 4
        assert roc_auc([0.1, 0.5, 0.5, 0.9], [0, 0, 1, 1]) == 0.875

    def test_random_fifty(self):
        rng = np.random.default_rng(0)
        s = np.round(rng.uniform(size=50), 1)
        y = rng.integers(0, 2, size=50)
        assert roc_auc(s, y) == pairwise_auc(s.tolist(), y.tolist())

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 1)), min_size=2, max_size=100))
    def test_matches_pairwise_oracle(self, pairs):
        scores = [s / 10 for s, _ in pairs]
        labels = [y for _, y in pairs]
        if len(set(labels)) < 2:
            with pytest.raises(MetricError):
                roc_auc(scores, labels)
            return
        assert roc_auc(scores, labels) == pairwise_auc(scores, labels)

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
    def test_single_class(self, labels):
        with pytest.raises(MetricError, match="undefined"):
            roc_auc([0.5] * len(labels), labels)

    def test_bad_labels(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [0, 2])


class TestAccuracy:
    def test_exact(self):
        assert accuracy([0.0, 1.0, 1.0], [0, 1, 1]) == 1.0

    def test_threshold_tie_is_positive(self):
        assert accuracy([0.5], [1]) == 1.0
        assert accuracy([0.5], [0]) == 0.0

    def test_direct_count(self):
        rng = np.random.default_rng(1)
        s, y = rng.uniform(size=37), rng.integers(0, 2, size=37)
        correct = sum(int((si >= 0.5) == yi) for si, yi in zip(s, y))
        assert accuracy(s, y) == correct / 37

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            accuracy([0.1, 0.2], [0])
