"""Accuracy, predictive entropy, calibration error, synthetic OOD inputs."""

import math

import numpy as np
import pytest

from mcdaccel.engine import PredictiveResult
from mcdaccel.metrics import (EvalSet, accuracy, average_predictive_entropy,
                              bins_from_csv, bins_to_csv, calibration_bins,
                              evaluate_predictions, expected_calibration_error,
                              gaussian_noise_set)


def onehot(rows, k):
    m = np.zeros((len(rows), k))
    for i, r in enumerate(rows):
        m[i, r] = 1.0
    return m


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy(onehot([0, 1, 2], 3), [0, 1, 2]) == 100.0

    def test_half_correct(self):
        assert accuracy(onehot([0, 1], 2), [0, 0]) == 50.0

    def test_uniform_probs_break_ties_to_first_class(self):
        preds = np.full((4, 5), 0.2)
        assert accuracy(preds, [0, 0, 0, 0]) == 100.0
        assert accuracy(preds, [1, 1, 1, 1]) == 0.0

    def test_accepts_predictive_results(self):
        preds = [PredictiveResult(per_sample=[], mean_probs=np.array([0.9, 0.1])),
                 PredictiveResult(per_sample=[], mean_probs=np.array([0.2, 0.8]))]
        assert accuracy(preds, [0, 1]) == 100.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            accuracy(onehot([0], 2), [0, 1])


class TestEntropy:
    def test_uniform_ten_way_is_ln_ten(self):
        preds = np.full((3, 10), 0.1)
        assert average_predictive_entropy(preds) == pytest.approx(math.log(10), abs=1e-9)

    def test_one_hot_is_zero(self):
        assert average_predictive_entropy(onehot([2, 0], 4)) == pytest.approx(0.0, abs=1e-12)

    def test_two_way_split_is_ln_two(self):
        preds = np.array([[0.5, 0.5, 0.0, 0.0]])
        assert average_predictive_entropy(preds) == pytest.approx(math.log(2), abs=1e-9)

    def test_mixture_averages_per_example_entropies(self):
        preds = np.array([[1.0, 0.0], [0.5, 0.5]])
        assert average_predictive_entropy(preds) == pytest.approx(math.log(2) / 2, abs=1e-9)

    def test_negative_probability_names_the_offender(self):
        preds = np.array([[0.5, 0.5], [1.2, -0.2]])
        with pytest.raises(ValueError, match="prediction 1"):
            average_predictive_entropy(preds)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = rng.dirichlet(np.ones(7), size=20)
            h = average_predictive_entropy(m)
            assert 0.0 <= h <= math.log(7) + 1e-12

    def test_permutation_invariant_over_classes(self):
        rng = np.random.default_rng(1)
        m = rng.dirichlet(np.ones(5), size=30)
        perm = rng.permutation(5)
        assert average_predictive_entropy(m) == pytest.approx(
            average_predictive_entropy(m[:, perm]), abs=1e-12)

    def test_mean_distribution_at_least_as_entropic(self):
        # Jensen: H(mean of sample distributions) >= mean of sample entropies.
        rng = np.random.default_rng(2)
        samples = rng.dirichlet(np.ones(4), size=16)
        h_mean = average_predictive_entropy(samples.mean(axis=0, keepdims=True))
        h_each = average_predictive_entropy(samples)
        assert h_mean >= h_each - 1e-12


class TestCalibration:
    def test_perfectly_calibrated_one_hot_is_zero(self):
        assert expected_calibration_error(onehot([0, 1, 1], 3), [0, 1, 1]) == pytest.approx(0.0, abs=1e-9)

    def test_fully_confident_and_always_wrong_is_hundred(self):
        assert expected_calibration_error(onehot([0, 0], 2), [1, 1]) == pytest.approx(100.0, abs=1e-9)

    def test_hand_worked_two_example_case(self):
        # Both land in the (0.7, 0.8] bin: conf 0.8, acc 0.5 -> |0.5-0.8|*100.
        preds = np.array([[0.8, 0.2], [0.8, 0.2]])
        assert expected_calibration_error(preds, [0, 1]) == pytest.approx(30.0, abs=1e-9)

    def test_bin_edges_are_right_closed(self):
        preds = np.array([[0.1, 0.9], [0.2, 0.8]])
        bins = calibration_bins(preds, [1, 1], n_bins=10)
        assert bins[7].count == 1            # 0.8 lands in (0.7, 0.8]
        assert bins[8].count == 1            # 0.9 lands in (0.8, 0.9]
        assert bins[9].count == 0

    def test_confidence_one_lands_in_last_bin(self):
        bins = calibration_bins(onehot([0], 2), [0], n_bins=10)
        assert bins[9].count == 1

    def test_empty_bins_report_zero_means(self):
        bins = calibration_bins(onehot([0], 2), [0], n_bins=4)
        for b in bins[:3]:
            assert (b.count, b.mean_confidence, b.mean_accuracy) == (0, 0.0, 0.0)

    def test_counts_partition_the_examples(self):
        rng = np.random.default_rng(3)
        m = rng.dirichlet(np.ones(6), size=40)
        t = rng.integers(0, 6, 40)
        bins = calibration_bins(m, t, n_bins=7)
        assert sum(b.count for b in bins) == 40

    def test_ece_bounds(self):
        rng = np.random.default_rng(4)
        m = rng.dirichlet(np.ones(3), size=25)
        t = rng.integers(0, 3, 25)
        assert 0.0 <= expected_calibration_error(m, t) <= 100.0

    def test_bins_csv_round_trip(self):
        rng = np.random.default_rng(5)
        m = rng.dirichlet(np.ones(4), size=30)
        bins = calibration_bins(m, rng.integers(0, 4, 30), n_bins=10)
        assert bins_from_csv(bins_to_csv(bins)) == bins


class TestEvaluatePredictions:
    def test_report_carries_all_three_metrics(self):
        preds = onehot([0, 1], 2)
        rep = evaluate_predictions(preds, [0, 1])
        assert rep.accuracy_pct == 100.0
        assert rep.ape_nats == pytest.approx(0.0, abs=1e-12)
        assert rep.ece_pct == pytest.approx(0.0, abs=1e-9)

    def test_targetless_evaluation_keeps_entropy_only(self):
        rep = evaluate_predictions(np.full((5, 4), 0.25))
        assert rep.ape_nats == pytest.approx(math.log(4), abs=1e-9)
        assert math.isnan(rep.accuracy_pct)
        assert math.isnan(rep.ece_pct)


class TestGaussianNoiseSet:
    def test_shape_and_size(self):
        s = gaussian_noise_set(12, (3, 8, 8), 0.0, 1.0, seed=1)
        assert s.inputs.shape == (12, 3, 8, 8)
        assert len(s) == 12
        assert s.targets is None

    def test_zero_std_reproduces_the_mean(self):
        s = gaussian_noise_set(3, (2, 2), 0.5, 0.0, seed=1)
        assert np.array_equal(s.inputs, np.full((3, 2, 2), 0.5))

    def test_broadcast_mean_per_channel(self):
        mean = np.array([1.0, -1.0]).reshape(2, 1, 1)
        s = gaussian_noise_set(4, (2, 3, 3), mean, 0.0, seed=1)
        assert np.array_equal(s.inputs[0, 0], np.ones((3, 3)))
        assert np.array_equal(s.inputs[0, 1], -np.ones((3, 3)))

    def test_same_seed_same_noise(self):
        a = gaussian_noise_set(5, (4,), 0.0, 1.0, seed=9)
        b = gaussian_noise_set(5, (4,), 0.0, 1.0, seed=9)
        assert np.array_equal(a.inputs, b.inputs)
        c = gaussian_noise_set(5, (4,), 0.0, 1.0, seed=10)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            gaussian_noise_set(1, (2,), 0.0, -1.0, seed=1)

    def test_moments_match_at_scale(self):
        s = gaussian_noise_set(100_000, (1,), 0.0, 1.0, seed=7)
        flat = s.inputs.reshape(-1)
        assert abs(flat.mean()) < 0.01
        assert abs(flat.std() - 1.0) < 0.01


class TestEvalSet:
    def test_target_length_must_match(self):
        with pytest.raises(ValueError):
            EvalSet(inputs=np.zeros((3, 2)), targets=np.array([0, 1]))

    def test_len_counts_examples(self):
        assert len(EvalSet(inputs=np.zeros((7, 2)))) == 7
