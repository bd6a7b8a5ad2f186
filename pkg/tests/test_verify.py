import csv
import math

import numpy as np
import pytest
from scipy import stats

from replica_decouple.channel import DecoupledChannel
from replica_decouple.errors import ConfigurationError
from replica_decouple.priors import BernoulliGaussian, GaussianPrior
from replica_decouple.rs import rs_solve
from replica_decouple.scalar import L1, Quadratic
from replica_decouple.spectral import MarchenkoPastur, RTransform
from replica_decouple.verify import (ComparisonReport, JointSampleSet, build_report, check_consistency,
                                     conditional_cdf_distance, conditioning_groups, confidence_interval,
                                     empirical_moment, empirical_mse, index_homogeneity, sup_distance)


def _from_channel(channel, n, trials, rng):
    x, xhat = channel.sample(n * trials, rng)
    return JointSampleSet(np.repeat(np.arange(trials), n), np.tile(np.arange(n), trials), x, xhat)


@pytest.fixture(scope="module")
def lasso():
    return rs_solve(BernoulliGaussian(0.1), L1(1.0), 0.05, 0.05, RTransform(MarchenkoPastur(2)))


class TestSampleSet:
    def test_validation(self):
        with pytest.raises(ValueError):
            JointSampleSet([], [], [], [])
        with pytest.raises(ValueError):
            JointSampleSet([0, 0], [0, 1], [1.0, 2.0], [1.0])
        with pytest.raises(ValueError):
            JointSampleSet([0], [0], [np.nan], [1.0])

    def test_shape_helpers(self):
        s = JointSampleSet([0, 0, 1, 1], [0, 1, 0, 1], [1.0, 2.0, 3.0, 4.0], [0.0] * 4)
        assert len(s) == 4 and s.n == 2 and list(s.trials) == [0, 1]


class TestMoments:
    def test_batch_standard_error(self, rng):
        s = JointSampleSet(np.repeat(np.arange(10), 30), np.tile(np.arange(30), 10),
                           rng.standard_normal(300), rng.standard_normal(300))
        est, se = empirical_moment(s, 1, 1)
        means = (s.xhat * s.x).reshape(10, 30).mean(axis=1)
        assert est == pytest.approx(means.mean(), abs=1e-14)
        assert se == pytest.approx(means.std(ddof=1) / math.sqrt(10), abs=1e-14)
        assert empirical_moment(s, 0, 0) == (1.0, 0.0)

    def test_single_trial_falls_back_to_iid(self, rng):
        x = rng.standard_normal(200)
        s = JointSampleSet(np.zeros(200), np.arange(200), x, x)
        _, se = empirical_moment(s, 0, 1)
        assert se == pytest.approx(x.std(ddof=1) / math.sqrt(200))

    def test_interval_matches_t(self):
        lo, hi = confidence_interval(1.0, 0.2, 9)
        ref = stats.t.interval(0.95, 9, loc=1.0, scale=0.2)
        assert (lo, hi) == pytest.approx(ref, abs=1e-14)

    def test_mse_coverage_for_channel_data(self, lasso, rng):
        s = _from_channel(lasso.channel(), 512, 50, rng)
        m = empirical_mse(s)
        assert m["ci"][0] <= lasso.q <= m["ci"][1]


class TestDistances:
    def test_sup_distance_matches_kstest(self, rng):
        v = rng.standard_normal(300)
        d = sup_distance(v, stats.norm.cdf, stats.norm.cdf)
        assert d == pytest.approx(stats.kstest(v, "norm").statistic, abs=1e-14)

    def test_sup_distance_with_atom(self):
        # half the mass at 0, exact empirical split gives distance 0
        v = np.array([0.0, 0.0, 1.0, 2.0])
        cdf = lambda t: np.where(t < 0, 0.0, np.where(t < 1, 0.5, np.where(t < 2, 0.75, 1.0)))
        left = lambda t: np.where(t <= 0, 0.0, np.where(t <= 1, 0.5, np.where(t <= 2, 0.75, 1.0)))
        assert sup_distance(v, cdf, left) == 0.0
        # ignoring the atom in the left limit shows up as a jump mismatch
        assert sup_distance(v, cdf, cdf) == pytest.approx(0.5)

    def test_groups(self, rng):
        x = np.where(rng.random(1000) < 0.5, 0.0, rng.standard_normal(1000))
        s = JointSampleSet(np.zeros(1000), np.arange(1000), x, x)
        groups = conditioning_groups(s, atoms=(0.0,), bins=4)
        assert groups[0].atom == 0.0 and groups[0].mask.sum() == np.sum(x == 0)
        sizes = [g.mask.sum() for g in groups[1:]]
        assert sum(sizes) == np.sum(x != 0) and max(sizes) - min(sizes) <= 1
        masks = np.array([g.mask for g in groups])
        assert np.all(masks.sum(axis=0) == 1)

    def test_null_self_test_and_power(self, lasso, rng):
        ch = lasso.channel()
        s = _from_channel(ch, 512, 10, rng)
        rows = conditional_cdf_distance(s, ch, atoms=(0.0,), bins=4, null_reps=100, seed=3)
        assert all(r["passed"] for r in rows if not r["flagged"])
        wrong = DecoupledChannel(ch.prior, ch.utility, 1.5 * ch.lam0_s, ch.lam_s)
        rows = conditional_cdf_distance(s, wrong, atoms=(0.0,), bins=4, null_reps=100, seed=3)
        assert not all(r["passed"] for r in rows if not r["flagged"])

    def test_small_groups_flagged(self, rng):
        ch = DecoupledChannel(GaussianPrior(), Quadratic(1.0), 0.1, 1.0)
        s = _from_channel(ch, 50, 2, rng)
        rows = conditional_cdf_distance(s, ch, bins=2, null_reps=10)
        assert all(r["flagged"] and r["passed"] is None for r in rows)


class TestHomogeneity:
    def test_exchangeable_indices_not_rejected(self, lasso, rng):
        s = _from_channel(lasso.channel(), 400, 10, rng)
        h = index_homogeneity(s, G=4, atoms=(0.0,))
        assert h["p_value"] > 0.01 and h["groups"] == 4

    def test_block_shift_rejected(self, rng):
        x = rng.standard_normal(4000)
        j = np.tile(np.arange(400), 10)
        xhat = x + 0.3 * rng.standard_normal(4000) + 0.5 * (j >= 300)
        h = index_homogeneity(JointSampleSet(np.repeat(np.arange(10), 400), j, x, xhat), G=4)
        assert h["p_value"] < 1e-6

    def test_guards(self):
        s = JointSampleSet([0, 0, 0], [0, 1, 2], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            index_homogeneity(s, G=1)
        with pytest.raises(ValueError):
            index_homogeneity(s, G=4)
        with pytest.raises(ValueError, match="insufficient"):
            index_homogeneity(s, G=2)


class TestReport:
    def test_channel_data_passes_every_criterion(self, lasso, rng):
        s = _from_channel(lasso.channel(), 512, 20, rng)
        rep = build_report(s, lasso, bins=4, null_reps=100, seed=1)
        assert rep.passed, rep.criteria
        assert rep.ansatz == lasso.to_dict()["ansatz"] and rep.extra == {"pairs": 10240, "trials": 20}
        assert {(m["k"], m["l"]) for m in rep.moments} == {(k, t - k) for t in range(1, 5) for k in range(t + 1)}

    def test_round_trip_and_files(self, lasso, rng, tmp_path):
        s = _from_channel(lasso.channel(), 256, 8, rng)
        rep = build_report(s, lasso, bins=2, null_reps=20)
        # nine checked moments: simultaneous intervals use t at 1 - 0.05/9
        m = rep.moments[0]
        ratio = (m["ci_joint"][1] - m["estimate"]) / (m["ci"][1] - m["estimate"])
        assert ratio == pytest.approx(stats.t.ppf(1 - 0.025 / 9, 7) / stats.t.ppf(0.975, 7), rel=1e-10)
        back = ComparisonReport.from_json(rep.to_json())
        assert back.to_dict() == rep.to_dict()
        rep.write(tmp_path)
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["criterion", "predicted", "empirical", "ci_lo", "ci_hi", "pass"]
        assert len(rows) - 1 == len(rep.rows())

    def test_consistency_guard(self, lasso):
        sol = lasso.to_dict()["config"]
        cfg = {"prior": sol["prior"], "utility": sol["utility"], "lambda": sol["lambda"],
               "lambda0": sol["lambda0"], "n": 512, "k": 256, "ensemble": {"kind": "iid-gaussian"}}
        check_consistency(cfg, sol)
        with pytest.raises(ConfigurationError, match="n/k"):
            check_consistency({**cfg, "k": 512}, sol)
        with pytest.raises(ConfigurationError, match="lambda0"):
            check_consistency({**cfg, "lambda0": 0.06}, sol)
        with pytest.raises(ConfigurationError, match="utility"):
            check_consistency({**cfg, "utility": {"kind": "l1", "alpha": 2.0}}, sol)
