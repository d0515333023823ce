import math

import numpy as np
import numpy.testing as npt
import pytest

from dpvfl.adaptive import (
    FuzzyAssignment,
    _distance_moment_penalty,
    contrastive_loss,
    estimate_local_sensitivity,
    exact_diameter_estimate,
    fcm,
    fcm_objective,
    histogram_kl_to_gaussian,
    kl_surrogate_loss,
    purity,
    rescale,
    rescale_factor,
)
from dpvfl.errors import ArgumentError, InsufficientRetainedError
from dpvfl.mechanism import clip_norm
from dpvfl.neural import DenseNet, TrainingConfig, sgd_step
from dpvfl.numerics import Rng, pairwise_distances

from conftest import central_difference, erf_inv_bisect, relative_error


class TestEstimateLocalSensitivity:
    def test_three_point_line(self):
        # 1-D points {0, 1, 3} have pairwise distances {1, 2, 3}:
        # mu = 2, sample std = 1, and the 0.9987 normal quantile sits at
        # mu + ~3.01 sigma (erf_inv oracle below).
        batch = np.array([[0.0], [1.0], [3.0]])
        est = estimate_local_sensitivity(batch, p2=0.9987, t=3.0)
        assert abs(est.mu_h - 2.0) < 1e-12
        assert abs(est.sigma_h - 1.0) < 1e-12
        z = math.sqrt(2.0) * erf_inv_bisect(2 * 0.9987 - 1)
        assert abs(est.delta_local - (2.0 + z)) < 1e-9
        assert abs(est.delta_local - 5.0) < 0.05

    def test_degenerate_batch_clamps_to_floor(self):
        batch = np.ones((5, 3))
        est = estimate_local_sensitivity(batch, p2=0.9987, t=2.0)
        assert est.delta_local == 1e-6 * 2.0

    def test_quantile_covers_empirical_sample(self):
        rng = Rng(71)
        batch = clip_norm(rng.normal(0, 1, (64, 8)), 1.0)
        est = estimate_local_sensitivity(batch, p2=0.9987, t=1.0)
        d = pairwise_distances(batch)
        assert np.mean(d <= est.delta_local) >= 0.99

    def test_clamped_to_twice_threshold(self):
        batch = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]) * 5
        est = estimate_local_sensitivity(clip_norm(batch, 1.0), p2=0.999999, t=1.0)
        assert est.delta_local <= 2.0

    def test_needs_two_rows(self):
        with pytest.raises(ArgumentError):
            estimate_local_sensitivity(np.ones((1, 2)), 0.9987, 1.0)


class TestRescale:
    def test_factor_two(self):
        est = exact_diameter_estimate(np.array([[0.0, 0.0], [0.6, 0.8]]), 1.0)
        assert abs(est.delta_local - 1.0) < 1e-12
        out = rescale(np.array([[0.3, 0.4]]), est, 1.0)
        npt.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_factor_one_when_estimate_is_bound(self):
        batch = np.array([[1.0, 0.0], [-1.0, 0.0]])
        est = exact_diameter_estimate(batch, 1.0)  # diameter 2 = 2t
        npt.assert_array_equal(rescale(batch, est, 1.0), batch)

    def test_exact_diameter_lands_on_2t(self):
        rng = Rng(5)
        batch = clip_norm(rng.normal(0, 0.2, (32, 6)), 1.0)
        est = exact_diameter_estimate(batch, 1.0)
        out = rescale(batch, est, 1.0)
        assert abs(pairwise_distances(out).max() - 2.0) < 1e-9

    def test_distances_scale_uniformly_and_extremes_invariant(self):
        rng = Rng(6)
        batch = rng.normal(0, 1, (12, 4))
        est = estimate_local_sensitivity(batch, 0.9, 4.0)
        factor = rescale_factor(est, 4.0)
        before = pairwise_distances(batch)
        after = pairwise_distances(rescale(batch, est, 4.0))
        npt.assert_allclose(after, before * factor, rtol=1e-12)
        assert np.argmax(after) == np.argmax(before)
        assert np.argmin(after) == np.argmin(before)


class TestKlSurrogate:
    def test_symmetric_mesokurtic_sample_is_zero(self):
        # One point at b-a, four at b, one at b+a: third and fourth central
        # moments match a normal law exactly, so the penalty vanishes.
        a, b = 0.5, 2.0
        d = np.array([b - a, b, b, b, b, b + a])
        value, grad = _distance_moment_penalty(d)
        assert abs(value) < 1e-12
        assert np.all(np.isfinite(grad))

    def test_gradient_matches_finite_differences(self):
        rng = Rng(9)
        batch = rng.normal(0, 1, (6, 3))
        alpha = 0.7

        def scalar(x):
            loss, _ = kl_surrogate_loss(x, alpha)
            return loss

        loss, grad = kl_surrogate_loss(batch, alpha)
        numeric = central_difference(scalar, batch)
        assert relative_error(grad, numeric) < 1e-4

    def test_alpha_zero_short_circuits(self):
        batch = Rng(1).normal(0, 1, (5, 2))
        loss, grad = kl_surrogate_loss(batch, 0.0)
        assert loss == 0.0
        npt.assert_array_equal(grad, np.zeros_like(batch))

    def test_needs_four_rows(self):
        with pytest.raises(ArgumentError):
            kl_surrogate_loss(np.ones((3, 2)), 1.0)

    def test_gaussian_batch_has_small_penalty(self):
        # Distances of high-dimensional Gaussian rows are approximately
        # normal; the penalty should be small but not exactly zero.
        batch = Rng(33).normal(0, 1, (64, 16))
        loss, _ = kl_surrogate_loss(batch, 1.0)
        assert loss < 0.2

    def test_histogram_diagnostic(self):
        d = Rng(3).normal(5, 1, (4000,)).ravel()
        assert histogram_kl_to_gaussian(d) < 0.05
        assert histogram_kl_to_gaussian(np.full(10, 2.0)) == 0.0


def exhaustive_best_two_partition(points):
    """Oracle: the 2-partition minimizing within-cluster sum of squared
    distances to cluster means, by enumeration."""
    n = len(points)
    best, best_cost = None, np.inf
    for mask_bits in range(1, 2 ** (n - 1)):
        mask = np.array([(mask_bits >> i) & 1 for i in range(n)], dtype=bool)
        cost = 0.0
        for side in (mask, ~mask):
            if side.any():
                group = points[side]
                cost += float(((group - group.mean(axis=0)) ** 2).sum())
        if cost < best_cost:
            best, best_cost = mask, cost
    return best


class TestFcm:
    def test_two_blobs_match_exhaustive_partition(self):
        points = np.array([[0.0], [0.1], [10.0], [10.1]])
        assignment, centers = fcm(points, 2, rng=Rng(0))
        ids = assignment.cluster_ids
        assert ids[0] == ids[1] and ids[2] == ids[3] and ids[0] != ids[2]
        assert np.all(assignment.confidences > 0.99)
        oracle_mask = exhaustive_best_two_partition(points)
        npt.assert_array_equal(ids == ids[0], oracle_mask == oracle_mask[0])

    def test_all_points_identical_degenerate(self):
        assignment, _ = fcm(np.ones((6, 2)), 3, rng=Rng(1))
        assert assignment.degenerate
        npt.assert_allclose(assignment.confidences, 1.0 / 3.0, atol=1e-12)

    def test_point_on_center_gets_full_membership(self):
        points = np.array([[0.0, 0.0], [4.0, 4.0], [8.0, 0.0]])
        assignment, centers = fcm(points, 3, rng=Rng(2))
        # With 3 clusters for 3 points the centers converge onto the points.
        assert np.all(assignment.confidences > 0.999)

    def test_memberships_row_sum_one(self):
        points = Rng(3).normal(0, 1, (40, 5))
        assignment, _ = fcm(points, 4, rng=Rng(4))
        npt.assert_allclose(assignment.memberships.sum(axis=1), 1.0, atol=1e-9)

    def test_objective_non_increasing(self):
        points = Rng(5).normal(0, 1, (60, 4))
        trace = []
        fcm(points, 3, rng=Rng(6), objective_trace=trace)
        assert len(trace) >= 2
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_validation(self):
        points = Rng(7).normal(0, 1, (5, 2))
        with pytest.raises(ArgumentError):
            fcm(points, 1, rng=Rng(0))
        with pytest.raises(ArgumentError):
            fcm(points, 2, fuzzifier=1.0, rng=Rng(0))
        with pytest.raises(ArgumentError):
            fcm(points, 6, rng=Rng(0))


def gradient_blobs(seed, n_per=50, dim=6, separation=3.0, spread=1.0):
    """Two seeded Gaussian blobs standing in for returned gradients."""
    rng = Rng(seed)
    offset = np.zeros(dim)
    offset[0] = separation * spread
    a = rng.normal(0, spread, (n_per, dim))
    b = rng.normal(0, spread, (n_per, dim)) + offset
    labels = np.array([0] * n_per + [1] * n_per)
    return np.vstack([a, b]), labels


class TestPurityAndFiltering:
    def test_perfect_clustering(self):
        assignment = FuzzyAssignment(
            cluster_ids=np.array([0, 0, 1, 1]),
            confidences=np.ones(4),
            retained_mask=np.ones(4, dtype=bool),
        )
        assert purity(assignment, [5, 5, 9, 9]) == 1.0

    def test_maximal_confusion(self):
        assignment = FuzzyAssignment(
            cluster_ids=np.array([0, 0, 1, 1]),
            confidences=np.ones(4),
            retained_mask=np.ones(4, dtype=bool),
        )
        assert purity(assignment, [0, 1, 0, 1]) == 0.5

    def test_matches_counting_oracle(self):
        rng = Rng(11)
        ids = np.asarray(rng.integers(0, 10, size=100))
        labels = np.asarray(rng.integers(0, 10, size=100))
        assignment = FuzzyAssignment(
            cluster_ids=ids, confidences=np.ones(100),
            retained_mask=np.ones(100, dtype=bool),
        )
        expected = 0
        for cluster in set(ids.tolist()):
            counts = {}
            for c, l in zip(ids, labels):
                if c == cluster:
                    counts[l] = counts.get(l, 0) + 1
            expected += max(counts.values())
        assert purity(assignment, labels) == expected / 100

    def test_empty_mask_raises(self):
        assignment = FuzzyAssignment(
            cluster_ids=np.array([0, 1]),
            confidences=np.array([0.4, 0.5]),
            retained_mask=np.zeros(2, dtype=bool),
        )
        with pytest.raises(InsufficientRetainedError):
            purity(assignment, [0, 1], use_mask=True)

    def test_filtering_rarely_hurts_purity(self):
        wins = 0
        for seed in range(100):
            grads, labels = gradient_blobs(seed, separation=6.0)
            assignment, _ = fcm(grads, 2, rng=Rng(seed).split("fcm"))
            unfiltered = purity(assignment, labels)
            filtered_assignment = assignment.filtered(0.8)
            try:
                filtered = purity(filtered_assignment, labels, use_mask=True)
            except InsufficientRetainedError:
                continue
            if filtered >= unfiltered:
                wins += 1
        assert wins >= 95


class TestContrastiveLoss:
    def two_row_assignment(self):
        return FuzzyAssignment(
            cluster_ids=np.array([0, 1]),
            confidences=np.ones(2),
            retained_mask=np.ones(2, dtype=bool),
        )

    def test_same_cluster_zero(self):
        assignment = FuzzyAssignment(
            cluster_ids=np.array([2, 2]),
            confidences=np.ones(2),
            retained_mask=np.ones(2, dtype=bool),
        )
        loss, grad = contrastive_loss(np.array([[0.0, 0.0], [3.0, 4.0]]), assignment, 1.0)
        assert loss == 0.0
        npt.assert_array_equal(grad, np.zeros((2, 2)))

    def test_hand_computed_cross_pair(self):
        batch = np.array([[0.0, 0.0], [3.0, 4.0]])
        loss, _ = contrastive_loss(batch, self.two_row_assignment(), 1.0)
        assert abs(loss - (-2.5)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = Rng(41)
        batch = rng.normal(0, 1, (7, 3))
        assignment = FuzzyAssignment(
            cluster_ids=np.asarray(rng.integers(0, 3, size=7)),
            confidences=np.ones(7),
            retained_mask=np.asarray(rng.integers(0, 2, size=7)) > 0,
        )
        if assignment.n_retained < 2:
            assignment = assignment.filtered(0.0)
        beta = 0.9

        def scalar(x):
            loss, _ = contrastive_loss(x, assignment, beta)
            return loss

        loss, grad = contrastive_loss(batch, assignment, beta)
        numeric = central_difference(scalar, batch)
        assert relative_error(grad, numeric) < 1e-4

    def test_insufficient_retained_rows_warns(self, caplog):
        batch = np.zeros((3, 2))
        assignment = FuzzyAssignment(
            cluster_ids=np.array([0, 1, 0]),
            confidences=np.array([0.9, 0.1, 0.1]),
            retained_mask=np.array([True, False, False]),
        )
        with caplog.at_level("WARNING"):
            loss, grad = contrastive_loss(batch, assignment, 1.0)
        assert loss == 0.0
        npt.assert_array_equal(grad, np.zeros_like(batch))
        assert any("retained" in r.message for r in caplog.records)

    def test_training_increases_inter_class_distance(self):
        # A toy extractor trained with only the contrastive term must push
        # the two classes apart relative to the untouched control.
        rng = Rng(55)
        x = rng.normal(0, 1, (20, 4))
        labels = np.array([0] * 10 + [1] * 10)
        assignment = FuzzyAssignment(
            cluster_ids=labels.copy(),
            confidences=np.ones(20),
            retained_mask=np.ones(20, dtype=bool),
        )
        config = TrainingConfig(learning_rate=0.05, batch_size=20, epochs=1)

        def mean_inter_class(net):
            h = net.copy().forward(x)
            return float(np.mean([
                np.linalg.norm(h[j] - h[k])
                for j in range(10) for k in range(10, 20)
            ]))

        net = DenseNet.create([4, 8, 3], ["tanh", "identity"], Rng(77))
        control = net.copy()
        for _ in range(100):
            h = net.forward(x)
            _, grad = contrastive_loss(h, assignment, beta=1.0)
            grads, _ = net.backward(grad)
            sgd_step(net, grads, config)
        assert mean_inter_class(net) > mean_inter_class(control)
