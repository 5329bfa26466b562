"""Softmax and contrastive costs, the combined objective, and within-batch
pair sampling."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facepipe.objective import (ObjectiveConfig, PairBatch, combined_loss,
                                contrastive_loss, sample_pairs, softmax_loss)


class TestSoftmaxLoss:
    def test_uniform_logits_full_class_count(self):
        loss, _ = softmax_loss(np.zeros(10575), 0)
        assert abs(loss - math.log(10575)) < 1e-12
        assert abs(loss - 9.266) < 1e-3

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros(50)
        logits[7] = 1000.0
        loss, _ = softmax_loss(logits, 7)
        assert loss < 1e-12

    def test_matches_direct_exp_sum_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.standard_normal(5) * 3
            label = int(rng.integers(5))
            loss, grad = softmax_loss(logits, label)
            p = np.exp(logits) / np.exp(logits).sum()
            assert abs(loss - (-np.log(p[label]))) < 1e-12
            want = p.copy()
            want[label] -= 1.0
            np.testing.assert_allclose(grad, want, atol=1e-12)

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            logits = rng.standard_normal(9) * 5
            _, grad = softmax_loss(logits, int(rng.integers(9)))
            assert abs(grad.sum()) < 1e-14

    def test_extreme_logits_stay_finite(self):
        logits = np.array([1e4, -1e4, 0.0])
        loss, grad = softmax_loss(logits, 1)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_loss(np.zeros(4), 4)


class TestContrastiveLoss:
    def test_identical_genuine_zero(self):
        e = np.random.default_rng(2).standard_normal(8)
        loss, g1, g2 = contrastive_loss(e, e.copy(), True, 1.0)
        assert loss == 0.0 and not g1.any() and not g2.any()

    def test_far_impostor_zero(self):
        e1 = np.zeros(4)
        e2 = np.full(4, 10.0)
        loss, g1, g2 = contrastive_loss(e1, e2, False, 1.0)
        assert loss == 0.0 and not g1.any() and not g2.any()

    @pytest.mark.parametrize("genuine", [True, False])
    def test_finite_difference_match(self, genuine):
        rng = np.random.default_rng(3)
        margin = 2.0
        for _ in range(10):
            e1 = rng.standard_normal(5) * 0.4
            e2 = rng.standard_normal(5) * 0.4
            d = np.linalg.norm(e1 - e2)
            if abs(d - margin) < 0.05 or d < 0.05:
                continue  # keep clear of the hinge kink and the origin
            _, g1, g2 = contrastive_loss(e1, e2, genuine, margin)
            eps = 1e-6
            for vec, grad in ((e1, g1), (e2, g2)):
                for i in range(5):
                    orig = vec[i]
                    vec[i] = orig + eps
                    hi = contrastive_loss(e1, e2, genuine, margin)[0]
                    vec[i] = orig - eps
                    lo = contrastive_loss(e1, e2, genuine, margin)[0]
                    vec[i] = orig
                    num = (hi - lo) / (2 * eps)
                    assert abs(num - grad[i]) / max(abs(num), abs(grad[i]),
                                                    1.0) < 1e-6

    def test_symmetry_exact(self):
        rng = np.random.default_rng(4)
        for genuine in (True, False):
            e1 = rng.standard_normal(6)
            e2 = rng.standard_normal(6)
            la, g1a, g2a = contrastive_loss(e1, e2, genuine, 1.5)
            lb, g1b, g2b = contrastive_loss(e2, e1, genuine, 1.5)
            assert la == lb
            np.testing.assert_array_equal(g1a, g2b)
            np.testing.assert_array_equal(g2a, g1b)

    def test_length_mismatch(self):
        from facepipe.errors import ShapeError
        with pytest.raises(ShapeError):
            contrastive_loss(np.zeros(3), np.zeros(4), True, 1.0)


class TestCombinedLoss:
    def _toy(self, alpha):
        rng = np.random.default_rng(5)
        logits = [rng.standard_normal(4) for _ in range(3)]
        labels = [0, 1, 1]
        embs = [rng.standard_normal(6) for _ in range(3)]
        pairs = [(1, 2, True), (0, 1, False)]
        return combined_loss(logits, labels, embs, pairs,
                             ObjectiveConfig(alpha, margin=1.0))

    def test_alpha_zero_is_softmax_only(self):
        res = self._toy(0.0)
        assert res.total == res.softmax_mean

    def test_documented_initial_weighting(self):
        res = self._toy(3.2e-4)
        assert abs(res.total - (res.softmax_mean
                                + 3.2e-4 * res.contrastive_mean)) < 1e-15

    def test_two_sample_hand_arithmetic(self):
        logits = [np.array([1.0, 0.0]), np.array([0.0, 2.0])]
        labels = [0, 1]
        embs = [np.array([0.0, 0.0]), np.array([0.3, 0.4])]
        pairs = [(0, 1, False)]
        res = combined_loss(logits, labels, embs, pairs,
                            ObjectiveConfig(alpha=2.0, margin=1.0))
        s0 = -math.log(math.exp(1) / (math.exp(1) + 1))
        s1 = -math.log(math.exp(2) / (math.exp(2) + 1))
        c = 0.5 * (1.0 - 0.5) ** 2  # distance 0.5, margin 1
        assert abs(res.softmax_mean - (s0 + s1) / 2) < 1e-12
        assert abs(res.contrastive_mean - c) < 1e-12
        assert abs(res.total - ((s0 + s1) / 2 + 2.0 * c)) < 1e-12

    def test_monotone_in_alpha(self):
        totals = [self._toy(a).total for a in (0.0, 1e-3, 1e-2, 1e-1)]
        assert all(b >= a for a, b in zip(totals, totals[1:]))

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            combined_loss([], [], [], [], ObjectiveConfig(0.0))


class TestPairBatch:
    def test_flag_must_match_labels(self):
        with pytest.raises(ValueError):
            PairBatch([np.zeros(1)] * 2, [0, 1], [(0, 1, True)])

    def test_indices_in_range(self):
        with pytest.raises(ValueError):
            PairBatch([np.zeros(1)] * 2, [0, 0], [(0, 2, True)])


class TestSamplePairs:
    def test_all_distinct_labels_only_impostors(self):
        pairs = sample_pairs([0, 1, 2, 3], seed=0, positives_per_batch=5,
                             negatives_per_batch=5)
        assert pairs and all(not genuine for _, _, genuine in pairs)

    def test_single_subject_only_genuine(self):
        pairs = sample_pairs([7, 7, 7], seed=0, positives_per_batch=5,
                             negatives_per_batch=5)
        assert pairs and all(genuine for _, _, genuine in pairs)

    def test_full_enumeration_matches_brute_force(self):
        labels = [0, 0, 1, 1, 2, 2, 3, 3]
        pairs = sample_pairs(labels, seed=3, positives_per_batch=100,
                             negatives_per_batch=100)
        assert len(pairs) == 28  # C(8, 2)
        want = {(i, j, labels[i] == labels[j])
                for i, j in itertools.combinations(range(8), 2)}
        assert set(pairs) == want

    def test_deterministic_per_seed(self):
        labels = [0, 0, 1, 1, 2]
        a = sample_pairs(labels, seed=9, positives_per_batch=2,
                         negatives_per_batch=2)
        b = sample_pairs(labels, seed=9, positives_per_batch=2,
                         negatives_per_batch=2)
        assert a == b

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=12),
           st.integers(0, 2 ** 31))
    @settings(max_examples=60, deadline=None)
    def test_flags_always_consistent(self, labels, seed):
        pairs = sample_pairs(labels, seed=seed, positives_per_batch=4,
                             negatives_per_batch=4)
        for i, j, genuine in pairs:
            assert genuine == (labels[i] == labels[j])
            assert i < j
