import numpy as np
import pytest

from tmur.evaluation import (
    PredictionSet,
    accuracy,
    evaluate,
    histogram_csv,
    metrics_text,
    prob_ece,
    reliability_table,
    table_csv,
    u_ece,
    uncertainty_histogram,
)
from tmur.evidential import DomainError


def make(correct, conf=None, unc=None):
    correct = np.asarray(correct, dtype=bool)
    n = correct.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    predicted = np.where(correct, 0, 1)
    conf = np.full(n, 0.9) if conf is None else np.asarray(conf, dtype=float)
    unc = np.full(n, 0.1) if unc is None else np.asarray(unc, dtype=float)
    return PredictionSet(predicted, labels, conf, unc)


def random_set(seed, n=500):
    rng = np.random.default_rng(seed)
    return make(rng.random(n) < 0.7, rng.uniform(0.25, 1.0, n), rng.uniform(0.01, 1.0, n))


class TestAccuracy:
    def test_counts(self):
        assert accuracy(make([1, 1, 1, 1])) == 1.0
        assert accuracy(make([0, 0])) == 0.0
        assert accuracy(make([1, 1, 1, 0])) == 0.75

    def test_empty(self):
        with pytest.raises(DomainError):
            accuracy(make([]))


class TestProbECE:
    def test_hand_example(self):
        p = make([1, 1, 1, 0], [0.9, 0.9, 0.6, 0.6])
        assert abs(prob_ece(p) - 0.1) <= 1e-12
        assert abs(prob_ece(p, bins=10) - 0.1) <= 1e-12

    def test_hand_example_two_bins_share_upper_bin(self):
        # 0.6 and 0.9 both fall in [0.5, 1]: bin accuracy 0.75 equals mean confidence 0.75
        assert prob_ece(make([1, 1, 1, 0], [0.9, 0.9, 0.6, 0.6]), bins=2) == pytest.approx(0.0, abs=1e-15)

    def test_all_certain_and_correct(self):
        assert prob_ece(make([1] * 5, [1.0] * 5)) == 0.0

    def test_calibrated_by_construction(self):
        p = make([1, 1, 1, 0, 1, 0], [0.75, 0.75, 0.75, 0.75, 0.5, 0.5])
        assert prob_ece(p) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_single_bin(self, seed):
        p = random_set(seed)
        assert abs(prob_ece(p, bins=1) - abs(accuracy(p) - p.confidence.mean())) <= 1e-12

    def test_permutation_invariance(self):
        p = random_set(9)
        perm = np.random.default_rng(1).permutation(len(p))
        q = PredictionSet(p.predicted[perm], p.labels[perm], p.confidence[perm], p.uncertainty[perm])
        assert prob_ece(q) == pytest.approx(prob_ece(p), abs=1e-14)
        assert u_ece(q) == pytest.approx(u_ece(p), abs=1e-14)


class TestUECE:
    def test_constant_uncertainty(self):
        assert abs(u_ece(make([1] * 8, unc=[0.1] * 8)) - 0.1) <= 1e-12

    def test_calibrated_by_construction(self):
        p = make([1, 1, 1, 0, 1, 0], unc=[0.25] * 4 + [0.5] * 2)
        assert u_ece(p) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("k", [2, 4, 10])
    def test_vacuous_at_chance(self, k):
        correct = np.arange(10 * k) % k == 0
        assert abs(u_ece(make(correct, unc=np.ones(10 * k))) - 1 / k) <= 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_single_bin(self, seed):
        p = random_set(seed)
        assert abs(u_ece(p, bins=1) - abs(accuracy(p) - (1 - p.uncertainty.mean()))) <= 1e-12


class TestTables:
    def test_counts_sum(self):
        p = random_set(3)
        for axis in ("confidence", "uncertainty"):
            assert sum(r.count for r in reliability_table(p, axis)) == len(p)
        assert sum(c for _, _, c in uncertainty_histogram(p)) == len(p)

    def test_unknown_axis(self):
        with pytest.raises(DomainError):
            reliability_table(random_set(0), "entropy")

    def test_histogram_translation(self):
        bins = 10
        u = np.random.default_rng(4).uniform(0.0, 0.79, 300)
        # keep values away from bin edges so the shift is exact
        u = (np.floor(u * bins) + 0.5) / bins
        a = uncertainty_histogram(make(np.ones(300), unc=u), bins)
        b = uncertainty_histogram(make(np.ones(300), unc=u + 0.2), bins)
        counts_a, counts_b = [c for *_, c in a], [c for *_, c in b]
        assert counts_b[2:] == counts_a[:-2]
        assert counts_b[:2] == [0, 0]

    def test_from_evidence(self):
        p = PredictionSet.from_evidence(np.array([[2.0, 1.0, 1.0], [0.0, 0.0, 0.0]]), [0, 2])
        np.testing.assert_array_equal(p.predicted, [0, 0])
        np.testing.assert_allclose(p.uncertainty, [3 / 7, 1.0])
        np.testing.assert_allclose(p.confidence, [3 / 7, 1 / 3])

    def test_report_and_exports(self):
        rep = evaluate(random_set(5), bins=4)
        assert set(rep.scalars()) == {"accuracy", "prob_ece", "u_ece", "mean_uncertainty"}
        assert all(0 <= v <= 1 for v in rep.scalars().values())
        csv_text = table_csv(rep.confidence_table)
        assert len(csv_text.strip().splitlines()) == 5
        assert len(histogram_csv(rep.histogram).strip().splitlines()) == 5
        text = metrics_text(rep.scalars())
        assert text.splitlines()[0].startswith("accuracy=")

    def test_mismatched_arrays(self):
        with pytest.raises(DomainError):
            PredictionSet(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3))
