import math

import numpy as np
import pytest
from scipy.stats import norm

from baryfed.evaluation import (
    EXACT_MAX_N,
    MetricsReport,
    accuracy_of,
    compare_aggregations,
    ece_of,
    evaluate,
    nll_of,
    summarize_metrics,
    wilcoxon_signed_rank,
)
from baryfed.geometry import DiagGaussian
from baryfed.models import MlpSpec, param_count


class TestMetrics:
    def test_accuracy_percentage(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        labels = np.array([0, 1, 1, 0])
        assert accuracy_of(probs, labels) == 50.0

    def test_accuracy_tie_goes_low(self):
        probs = np.array([[0.5, 0.5]])
        assert accuracy_of(probs, np.array([0])) == 100.0
        assert accuracy_of(probs, np.array([1])) == 0.0

    def test_nll_hand_value(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        labels = np.array([0, 1])
        expected = -(math.log(0.5) + math.log(0.75)) / 2
        assert nll_of(probs, labels) == pytest.approx(expected, rel=1e-12)

    def test_nll_floor(self):
        probs = np.array([[1.0, 0.0]])
        labels = np.array([1])
        assert nll_of(probs, labels) == pytest.approx(-math.log(1e-12))

    def test_ece_hand_case(self):
        # two bins: conf .6 (correct), conf .9 and .8 (one right, one wrong)
        probs = np.array([[0.6, 0.4], [0.9, 0.1], [0.2, 0.8]])
        labels = np.array([0, 1, 1])
        # bins=2: conf .6 -> bin 1, .9 -> bin 1, .8 -> bin 1; all in top bin
        # mean conf = (0.6+0.9+0.8)/3, mean acc = 2/3
        expected = abs((0.6 + 0.9 + 0.8) / 3 - 2 / 3)
        assert ece_of(probs, labels, bins=2) == pytest.approx(expected, rel=1e-12)

    def test_ece_full_confidence_top_bin(self):
        probs = np.array([[1.0, 0.0], [1.0, 0.0]])
        labels = np.array([0, 1])
        # conf 1.0 stays in the last bin; gap = |1.0 - 0.5| = 0.5
        assert ece_of(probs, labels, bins=15) == pytest.approx(0.5)

    def test_ece_perfect_calibration_zero(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1])
        assert ece_of(probs, labels) == pytest.approx(0.0)

    def test_ece_bins_validation(self):
        with pytest.raises(ValueError):
            ece_of(np.array([[1.0, 0.0]]), np.array([0]), bins=0)


class TestEvaluate:
    def test_report_fields(self):
        spec = MlpSpec(layer_sizes=(2, 4, 3))
        post = DiagGaussian(
            mean=np.zeros(param_count(spec)), var=np.full(param_count(spec), 1e-4)
        )
        from baryfed.data import synth_blobs

        ds = synth_blobs(classes=3, dim=2, n_per_class=5, spread=0.1, seed=0)
        rep = evaluate(spec, post, ds, mc_samples=4, bins=10, seed=3, setting="GM-GD")
        assert rep.n_examples == 15
        assert rep.mc_samples == 4
        assert rep.bins == 10
        assert rep.setting == "GM-GD"
        assert 0.0 <= rep.accuracy <= 100.0
        assert rep.nll > 0.0
        assert 0.0 <= rep.ece <= 1.0


class TestWilcoxon:
    def test_exact_all_positive_n6(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        y = np.zeros(6)
        res = wilcoxon_signed_rank(x, y)
        assert res.method == "exact"
        assert res.n_effective == 6
        assert res.p_two_sided == pytest.approx(2.0 / 64.0, abs=1e-15)

    def test_zeros_dropped(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
        y = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        res = wilcoxon_signed_rank(x, y)
        assert res.n_effective == 6
        assert res.p_two_sided == pytest.approx(2.0 / 64.0, abs=1e-15)

    def test_all_zero_degenerate(self):
        with pytest.raises(ValueError, match="degenerate-sample"):
            wilcoxon_signed_rank(np.ones(5), np.ones(5))

    def test_symmetric_sample_p_one(self):
        x = np.array([1.0, -1.0])
        res = wilcoxon_signed_rank(x, np.zeros(2))
        assert res.p_two_sided == 1.0

    def test_method_forcing(self):
        x = np.arange(1.0, 9.0)
        y = np.zeros(8)
        exact = wilcoxon_signed_rank(x, y, method="exact")
        normal = wilcoxon_signed_rank(x, y, method="normal")
        assert exact.method == "exact"
        assert normal.method == "normal"
        assert abs(exact.p_two_sided - normal.p_two_sided) < 0.02

    def test_exact_cap(self):
        n = EXACT_MAX_N + 1
        with pytest.raises(ValueError, match="exact"):
            wilcoxon_signed_rank(np.arange(1.0, n + 1), np.zeros(n), method="exact")

    def test_bad_method(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0], [0.0], method="approximate")

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, 2.0], [0.0])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([[1.0]], [[0.0]])

    def test_exact_matches_normal_at_boundary(self):
        # tie-free draws at the exact-path cap
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(50):
            x = rng.normal(size=EXACT_MAX_N)
            y = rng.normal(size=EXACT_MAX_N)
            exact = wilcoxon_signed_rank(x, y, method="exact")
            approx = wilcoxon_signed_rank(x, y, method="normal")
            worst = max(worst, abs(exact.p_two_sided - approx.p_two_sided))
        assert worst <= 0.01

    def test_tie_correction_applied(self):
        x = np.array([1.0, 1.0, 1.0, -1.0, 2.0, 2.0])
        res = wilcoxon_signed_rank(x, np.zeros(6), method="normal")
        ranks_abs = np.array([2.5, 2.5, 2.5, 2.5, 5.5, 5.5])
        stat = float(ranks_abs[3])
        mean = 6 * 7 / 4.0
        tie = ((4**3 - 4) + (2**3 - 2)) / 48.0
        var = 6 * 7 * 13 / 24.0 - tie
        expected = min(1.0, 2.0 * float(norm.cdf((stat - mean + 0.5) / math.sqrt(var))))
        assert res.statistic == stat
        assert res.p_two_sided == pytest.approx(expected, rel=1e-12)


class TestSummaries:
    def reports(self):
        mk = lambda acc, lam, cid: MetricsReport(
            accuracy=acc,
            nll=1.0,
            ece=0.1,
            n_examples=10,
            mc_samples=4,
            setting="PM-LD",
            method="eaa",
            lam=lam,
            client_id=cid,
        )
        return [mk(60.0, 1.0, 0), mk(80.0, 1.0, 1), mk(50.0, 2.0, 0)]

    def test_grouping_and_stats(self):
        rows = summarize_metrics(self.reports())
        assert len(rows) == 2
        first = rows[0]
        assert (first.setting, first.lam, first.n_clients) == ("PM-LD", 1.0, 2)
        assert first.acc_mean == 70.0
        assert first.acc_std == 10.0  # population std
        assert rows[1].n_clients == 1

    def test_insertion_order(self):
        rows = summarize_metrics(self.reports())
        assert [r.lam for r in rows] == [1.0, 2.0]


class TestCompareAggregations:
    def test_pair_count_and_order(self):
        scores = {
            "eaa": [1.0, 2.0, 3.0, 4.0, 5.0],
            "w2b": [2.0, 3.0, 4.0, 5.0, 6.0],
            "rklb": [0.5, 1.5, 2.5, 3.5, 4.5],
        }
        rows = compare_aggregations(scores)
        assert [(r.method_a, r.method_b) for r in rows] == [
            ("eaa", "w2b"),
            ("eaa", "rklb"),
            ("w2b", "rklb"),
        ]
        assert all(not r.degenerate for r in rows)
        assert all(0.0 < r.p_two_sided <= 1.0 for r in rows)

    def test_degenerate_pair(self):
        scores = {"eaa": [1.0, 2.0], "w2b": [1.0, 2.0]}
        rows = compare_aggregations(scores)
        assert rows[0].degenerate
        assert rows[0].p_two_sided is None
        assert rows[0].statistic is None

    def test_validation(self):
        with pytest.raises(ValueError, match="two methods"):
            compare_aggregations({"eaa": [1.0]})
        with pytest.raises(ValueError, match="misaligned"):
            compare_aggregations({"eaa": [1.0, 2.0], "w2b": [1.0]})
