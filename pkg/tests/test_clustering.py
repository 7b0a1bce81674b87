"""k-means, WSS, K sweeps, and elbow selection."""

import itertools

import numpy as np
import pytest

from selflabel.clustering import (
    Assignment,
    WssCurve,
    kmeans,
    read_assignment,
    read_wss_curve,
    select_k_elbow,
    sweep_k,
    write_assignment,
    write_wss_curve,
    wss,
)
from selflabel.errors import ConfigError

FOUR_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])


def blobs(n_clusters, per_cluster, dim, spread, seed):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim)) * 6.0
    x = np.repeat(centers, per_cluster, axis=0) + spread * rng.standard_normal(
        (n_clusters * per_cluster, dim)
    )
    labels = np.repeat(np.arange(n_clusters), per_cluster)
    return x, labels


class TestKmeansWorkedExamples:
    def test_single_centroid_is_mean(self):
        c, a, w = kmeans(FOUR_POINTS, 1, restarts=3, seed=0)
        np.testing.assert_allclose(c, [[5.0, 0.5]])
        assert w == pytest.approx(101.0)

    def test_two_clusters_exhaustive_oracle(self):
        # oracle: brute force over all 2^4 assignments, best W with optimal centroids
        best = np.inf
        for labels in itertools.product([0, 1], repeat=4):
            labels = np.asarray(labels)
            total = 0.0
            for k in (0, 1):
                pts = FOUR_POINTS[labels == k]
                if len(pts):
                    total += ((pts - pts.mean(axis=0)) ** 2).sum()
            best = min(best, total)
        assert best == pytest.approx(1.0)

        c, a, w = kmeans(FOUR_POINTS, 2, restarts=10, seed=0)
        assert w == pytest.approx(best)
        sorted_c = c[np.argsort(c[:, 0])]
        np.testing.assert_allclose(sorted_c, [[0.0, 0.5], [10.0, 0.5]])

    def test_k_equals_n_zero_wss(self):
        _, _, w = kmeans(FOUR_POINTS, 4, restarts=5, seed=0)
        assert w == 0.0

    def test_k_above_n_rejected(self):
        with pytest.raises(ConfigError):
            kmeans(FOUR_POINTS, 5, seed=0)


class TestKmeansContracts:
    def test_lloyd_monotone_wss(self):
        x, _ = blobs(6, 40, 5, 2.5, seed=3)
        _, _, _, histories = kmeans(x, 6, restarts=5, seed=4, return_history=True)
        for history in histories:
            for earlier, later in zip(history, history[1:]):
                assert later <= earlier * (1.0 + 1e-9)

    def test_returned_w_equals_wss_recomputation(self):
        x, _ = blobs(5, 30, 4, 1.5, seed=9)
        c, a, w = kmeans(x, 5, restarts=4, seed=2)
        assert w == wss(x, c, a)

    def test_worker_count_invariance_bitwise(self):
        x, _ = blobs(7, 500, 8, 2.0, seed=5)  # several chunks worth of rows
        results = [kmeans(x, 7, restarts=3, seed=6, workers=workers) for workers in (1, 2, 4)]
        for c, a, w in results[1:]:
            np.testing.assert_array_equal(c, results[0][0])
            np.testing.assert_array_equal(a.labels, results[0][1].labels)
            assert w == results[0][2]

    def test_determinism(self):
        x, _ = blobs(4, 25, 3, 1.0, seed=1)
        r1 = kmeans(x, 4, restarts=6, seed=11)
        r2 = kmeans(x, 4, restarts=6, seed=11)
        np.testing.assert_array_equal(r1[0], r2[0])
        np.testing.assert_array_equal(r1[1].labels, r2[1].labels)
        assert r1[2] == r2[2]

    def test_row_permutation_induces_same_partition(self):
        x, _ = blobs(4, 25, 3, 1.0, seed=8)
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(x))
        _, a, _ = kmeans(x, 4, restarts=8, seed=3)
        _, a_perm, _ = kmeans(x[perm], 4, restarts=8, seed=3)
        # compare partitions as sets of frozensets of row indices
        def partition(labels, order):
            groups = {}
            for row, lab in zip(order, labels):
                groups.setdefault(lab, set()).add(row)
            return frozenset(frozenset(g) for g in groups.values())

        assert partition(a.labels, range(len(x))) == partition(a_perm.labels, perm)

    def test_empty_cluster_repair_keeps_k(self):
        # two far blobs but K=4: two centroids must be repaired onto points
        x = np.vstack([np.zeros((20, 2)), np.ones((20, 2)) * 50.0])
        c, a, w = kmeans(x, 4, restarts=3, seed=0)
        assert a.k == 4
        assert c.shape == (4, 2)
        assert np.all(np.isfinite(c))


class TestWss:
    def test_exact_points_zero(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        a = Assignment(labels=np.array([0, 1]), k=2)
        assert wss(x, x.copy(), a) == 0.0

    def test_single_offset_point(self):
        x = np.array([[0.0, 0.0], [2.0, 0.0]])
        c = np.array([[0.0, 0.0], [0.0, 0.0]])
        a = Assignment(labels=np.array([0, 1]), k=2)
        assert wss(x, c, a) == pytest.approx(4.0)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((40, 3))
        c = rng.standard_normal((5, 3))
        labels = rng.integers(0, 5, size=40)
        naive = 0.0
        for i in range(40):
            for j in range(3):
                naive += (x[i, j] - c[labels[i], j]) ** 2
        assert wss(x, c, Assignment(labels=labels, k=5)) == pytest.approx(naive, rel=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            Assignment(labels=np.array([0, 5]), k=2)


class TestSweepAndElbow:
    def test_grid_of_n_gives_zero(self):
        x, _ = blobs(3, 4, 2, 0.5, seed=2)
        curve = sweep_k(x, [len(x)], restarts=2, seed=0)
        assert curve.wss[0] == 0.0

    def test_wss_non_increasing_on_separated_blobs(self):
        x, _ = blobs(5, 30, 4, 0.3, seed=6)
        curve = sweep_k(x, list(range(2, 11)), restarts=10, seed=1)
        for earlier, later in zip(curve.wss, curve.wss[1:]):
            assert later <= earlier * (1.0 + 1e-9)

    def test_sweep_determinism(self):
        x, _ = blobs(4, 20, 3, 0.5, seed=7)
        c1 = sweep_k(x, [2, 4, 6], restarts=3, seed=5)
        c2 = sweep_k(x, [2, 4, 6], restarts=3, seed=5)
        np.testing.assert_array_equal(c1.wss, c2.wss)

    def test_elbow_worked_example(self):
        # oracle: hand evaluation of the normalized chord-distance formula
        curve = WssCurve(ks=np.arange(1, 8), wss=np.array([100.0, 60, 30, 10, 9, 8, 7]))
        k, scores = select_k_elbow(curve)
        assert k == 4
        u = (curve.ks - 1) / 6.0
        v = (curve.wss - 7.0) / 93.0
        expected = np.abs(u + v - 1.0) / np.sqrt(2.0)
        np.testing.assert_allclose(scores, expected, atol=1e-12)

    def test_linear_curve_returns_smallest_k(self):
        curve = WssCurve(ks=np.array([2, 4, 6, 8]), wss=np.array([80.0, 60.0, 40.0, 20.0]))
        k, scores = select_k_elbow(curve)
        assert k == 2
        np.testing.assert_allclose(scores, 0.0, atol=1e-12)

    def test_planted_knee_recovered(self):
        # criterion: 20 synthetic knee curves, selection within one grid step
        rng = np.random.default_rng(42)
        hits = 0
        ks = np.arange(2, 22)
        for trial in range(20):
            knee_idx = int(rng.integers(3, 16))
            steep = rng.uniform(20.0, 40.0)
            shallow = rng.uniform(0.2, 1.0)
            drops = np.where(np.arange(len(ks) - 1) < knee_idx, steep, shallow)
            noise = rng.uniform(0.0, 0.05, size=len(ks) - 1)
            w = 1000.0 - np.concatenate([[0.0], np.cumsum(drops + noise)])
            k_sel, _ = select_k_elbow(WssCurve(ks=ks, wss=w))
            if abs(int(np.nonzero(ks == k_sel)[0][0]) - knee_idx) <= 1:
                hits += 1
        assert hits >= 18

    def test_short_curve_rejected(self):
        with pytest.raises(ConfigError):
            select_k_elbow(WssCurve(ks=np.array([1, 2]), wss=np.array([2.0, 1.0])))


class TestAssignmentFiles:
    def test_round_trip(self, tmp_path):
        ids = [f"s{i}" for i in range(6)]
        a = Assignment(labels=np.array([0, 1, 2, 1, 0, 2]), k=3)
        write_assignment(tmp_path / "a.tsv", ids, a)
        ids2, a2 = read_assignment(tmp_path / "a.tsv", k=3)
        assert ids2 == ids
        np.testing.assert_array_equal(a2.labels, a.labels)
        assert a2.k == 3

    def test_curve_round_trip(self, tmp_path):
        curve = WssCurve(ks=np.array([2, 3, 5]), wss=np.array([10.5, 7.25, 1.125]))
        write_wss_curve(tmp_path / "w.tsv", curve)
        again = read_wss_curve(tmp_path / "w.tsv")
        np.testing.assert_array_equal(again.ks, curve.ks)
        np.testing.assert_array_equal(again.wss, curve.wss)
