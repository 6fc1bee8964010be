import numpy as np
import pytest

from etdlab.analysis import analyze
from etdlab.etd import AlgoConfig, StepSchedule
from etdlab.exceptions import ModelError, WindowOutOfRange
from etdlab.experiment import (EnsembleStats, ExperimentPlan, averaged_deviation,
                               coupling_check, elstd_estimate, hbar_estimate, kappa_estimate,
                               occupation_fraction, run_ensemble, run_trajectory,
                               segment_violation_prob, truncation_error_curve, ui_diagnostic,
                               wilson_interval)
from etdlab.mdp import make_rng

from conftest import uniform_two_state


def plan_for(mdp, pp, **kw):
    algo = kw.pop("algo", AlgoConfig(variant="ProjectedETD", radius=15.0,
                                     schedule=StepSchedule.constant(0.01)))
    return ExperimentPlan(mdp=mdp, pp=pp, algo=algo, **kw)


class TestPlan:
    def test_defaults(self, twostate):
        plan = plan_for(*twostate, horizon=1000)
        assert plan.burn_in == 200

    def test_invalid(self, twostate):
        with pytest.raises(ModelError):
            plan_for(*twostate, horizon=100, burn_in=100)
        with pytest.raises(ModelError):
            plan_for(*twostate, horizon=100, delta=0.0)


class TestRunTrajectory:
    def test_deterministic(self, twostate):
        plan = plan_for(*twostate, horizon=3000, base_seed=5)
        a, b = run_trajectory(plan, 2), run_trajectory(plan, 2)
        np.testing.assert_array_equal(a.theta, b.theta)
        c = run_trajectory(plan, 3)
        assert not np.array_equal(a.theta, c.theta)

    def test_projection_bound(self, twostate):
        algo = AlgoConfig(variant="ProjectedETD", radius=1.0, schedule=StepSchedule.constant(0.1))
        tr = run_trajectory(plan_for(*twostate, horizon=5000, algo=algo), 0)
        assert np.linalg.norm(tr.theta, axis=1).max() <= 1.0 + 1e-12


class TestOccupation:
    def test_constant_at_target(self):
        assert occupation_fraction(np.ones((10, 2)), np.ones(2), 0.1, 0, 10) == 1.0

    def test_alternating(self):
        log = np.array([[0.0], [5.0]] * 5)
        assert occupation_fraction(log, [0.0], 1.0, 0, 10) == 0.5

    def test_hand_count(self):
        log = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.5], [2.0, 0.0]])
        assert occupation_fraction(log, [0.0, 0.0], 0.5, 0, 4) == 0.75

    def test_window_checked(self):
        with pytest.raises(WindowOutOfRange):
            occupation_fraction(np.zeros((5, 1)), [0.0], 1.0, 3, 3)


class TestSegmentViolation:
    def test_none(self):
        logs = [np.zeros((20, 2))] * 3
        p, (lo, hi) = segment_violation_prob(logs, np.zeros(2), 0.1, 0, 20)
        assert p == 0.0 and lo == 0.0 and 0 < hi < 1

    def test_half(self):
        bad = np.zeros((20, 1))
        bad[7] = 3.0
        p, (lo, hi) = segment_violation_prob([np.zeros((20, 1)), bad], [0.0], 1.0, 0, 20)
        assert p == 0.5 and lo < 0.5 < hi

    def test_wilson_known_value(self):
        lo, hi = wilson_interval(5, 10)
        assert lo == pytest.approx(0.2366, abs=1e-4)
        assert hi == pytest.approx(0.7634, abs=1e-4)


class TestAveragedDeviation:
    def test_constant(self):
        assert averaged_deviation(np.full((10, 2), 3.0), [3.0, 3.0], 1, 9) == 0.0

    def test_alternating(self):
        v = np.array([0.5, -1.0])
        log = np.array([v * (-1) ** t for t in range(50)])
        k = 10
        assert averaged_deviation(log, np.zeros(2), k, 40) <= np.linalg.norm(v) / k + 1e-15

    def test_hand(self):
        log = np.array([[1.0], [2.0], [6.0]])
        # theta_bar_1 = 1, theta_bar_2 = 1.5, theta_bar_3 = 3
        assert averaged_deviation(log, [0.0], 1, 3) == 3.0
        assert averaged_deviation(log, [0.0], 1, 2) == 1.5
        assert averaged_deviation(log, [2.0], 2, 1) == 0.5


class TestKappa:
    def test_all_inside(self):
        k = kappa_estimate([np.zeros((100, 2))], np.zeros(2), 0.1, 5, 10)
        assert k.value == 1.0 and k.single_run

    def test_m_one_is_occupation(self):
        rng = np.random.default_rng(0)
        log = rng.standard_normal((500, 2))
        k = kappa_estimate([log], np.zeros(2), 1.0, 1, 100)
        occ = np.mean(np.linalg.norm(log[100:], axis=1) < 1.0)
        assert k.value == occ

    def test_windows(self):
        log = np.array([[0.0], [0.0], [5.0], [0.0], [0.0], [0.0]])
        k = kappa_estimate([log], [0.0], 1.0, 2, 0)
        assert k.value == pytest.approx(3 / 5)


class TestElstd:
    def test_zero_rewards(self):
        mdp, pp = uniform_two_state()
        mdp = mdp.replace(reward_mean=np.zeros((2, 2, 2)))
        _, b = elstd_estimate((mdp, pp), 5000)
        np.testing.assert_array_equal(b, 0.0)

    def test_converges(self, twostate):
        rep = analyze(*twostate)
        C, b = elstd_estimate(twostate, 200_000, run_index=1)
        assert np.abs(C - rep.C).max() / np.abs(rep.C).max() <= 0.05
        assert np.abs(b - rep.b).max() / (np.abs(rep.b).max() + 1) <= 0.05

    def test_deterministic(self, twostate):
        a = elstd_estimate(twostate, 5000, run_index=3)
        b = elstd_estimate(twostate, 5000, run_index=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestHbar:
    def test_at_theta_star(self, twostate):
        rep = analyze(*twostate)
        est = hbar_estimate(twostate, rep.theta_star, 10 ** 6)
        scale = np.abs(rep.C).max() * np.linalg.norm(rep.theta_star) + np.abs(rep.b).max()
        assert np.abs(est).max() <= 0.05 * scale

    def test_zero_interest_zero_trace(self):
        mdp, pp = uniform_two_state(interest=0.0)
        np.testing.assert_array_equal(hbar_estimate((mdp, pp), np.ones(2), 1000), 0.0)

    def test_clipping_gap_shrinks(self, twostate):
        grid = [np.array([x, y]) for x in (0.0, 3.0) for y in (-1.0, 1.0)]
        gaps = []
        for K in (1.0, 4.0, 16.0, 1e6):
            gaps.append(max(np.abs(hbar_estimate(twostate, th, 50_000, clip=K)
                                   - hbar_estimate(twostate, th, 50_000)).max() for th in grid))
        assert all(a >= b for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] == 0.0


class TestTraceDiagnostics:
    def test_truncation_monotone(self, twostate):
        curve = truncation_error_curve(*twostate, make_rng(0), 20_000, [2, 5, 10, 20])
        vals = [curve[k] for k in (2, 5, 10, 20)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_coupling_identical(self, twostate):
        res = coupling_check(*twostate, (np.ones(2), 1.0), (np.ones(2), 1.0), 0, 1000)
        assert res.F_gap.max() == 0.0 and res.e_gap.max() == 0.0

    def test_coupling_gamma_zero_forgets(self):
        mdp, pp = uniform_two_state(gamma=0.0)
        res = coupling_check(mdp, pp, (np.zeros(2), 0.0), (np.array([4.0, 1.0]), 7.0), 3, 100)
        assert res.F_gap[0] > 0
        assert res.F_gap[1:].max() == 0.0 and res.e_gap[1:].max() == 0.0

    def test_ui_curve(self):
        rng = np.random.default_rng(0)
        norms = np.abs(rng.standard_cauchy((60, 200)))
        out = ui_diagnostic(norms, [1, 10, 100, 1000])
        assert np.all(np.diff(out["curve"]) <= 0)
        assert np.all(out["lo"] <= out["hi"])

    def test_ui_bounded_traces(self):
        norms = np.full((50, 10), 2.0)
        out = ui_diagnostic(norms, [3.0, 5.0])
        np.testing.assert_array_equal(out["curve"], 0.0)


class TestEnsemble:
    def test_single_run_aggregate(self, twostate):
        plan = plan_for(*twostate, horizon=5000, delta=0.5)
        stats, logs = run_ensemble(plan, jobs=1, keep_logs=True)
        rec = stats.records[0]
        assert stats.aggregate["neighborhood_fraction_mean"] == rec.neighborhood_fraction
        assert stats.aggregate["kappa"] == rec.kappa
        assert len(logs) == 1

    def test_order_independent(self, twostate):
        plan = plan_for(*twostate, horizon=3000, n_runs=4, delta=0.5)
        stats, _ = run_ensemble(plan, jobs=1)
        shuffled = EnsembleStats.from_records(list(reversed(stats.records)))
        assert shuffled.to_dict() == stats.to_dict()

    def test_parallel_matches_serial(self, twostate):
        plan = plan_for(*twostate, horizon=3000, n_runs=3, delta=0.5)
        a, _ = run_ensemble(plan, jobs=1)
        b, _ = run_ensemble(plan, jobs=2)
        assert a.to_dict() == b.to_dict()

    def test_divergent_runs_recorded(self, baird):
        algo = AlgoConfig(variant="OffPolicyTD", schedule=StepSchedule.constant(0.05))
        plan = plan_for(*baird, horizon=50_000, n_runs=2, algo=algo, thin=10)
        stats, _ = run_ensemble(plan, jobs=1, theta_star=analyze(*baird).theta_star)
        assert stats.aggregate["divergence_rate"] == 1.0
        assert all(r.segment_violation for r in stats.records)
