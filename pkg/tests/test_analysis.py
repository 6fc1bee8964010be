import numpy as np
import pytest

from etdlab.analysis import (analyze, behavior_distribution, emphasis_weights,
                             integrate_mean_ode, linear_system, multistep_bellman,
                             solve_theta_star, subspace_analysis, value_function)
from etdlab.exceptions import EmptyEmphasis, Inconsistent
from etdlab.mdp import MdpModel, PolicyPair, builtin, policy_matrices

from conftest import random_models, uniform_two_state


def neumann(A, v, terms):
    out = np.zeros_like(v)
    term = v.copy()
    for _ in range(terms):
        out += term
        term = A @ term
    return out


class TestValueFunction:
    def test_zero_reward(self):
        mdp, pp = uniform_two_state()
        mdp = mdp.replace(reward_mean=np.zeros((2, 2, 2)))
        np.testing.assert_array_equal(value_function(mdp, pp), 0.0)

    def test_gamma_zero(self):
        mdp, pp = uniform_two_state(gamma=0.0)
        _, r = policy_matrices(mdp, pp.target)
        np.testing.assert_allclose(value_function(mdp, pp), r, atol=1e-15)

    def test_neumann(self):
        for mdp, pp in random_models(5, seed=1):
            P, r = policy_matrices(mdp, pp.target)
            v = value_function(mdp, pp)
            np.testing.assert_allclose(v, neumann(P * mdp.gamma, r, 600), atol=1e-8)
            assert np.abs(v - r - (P * mdp.gamma) @ v).max() <= 1e-10


class TestMultistep:
    def test_lambda_one(self):
        mdp, pp = uniform_two_state(lam=1.0)
        ops = multistep_bellman(mdp, pp)
        assert np.abs(ops.P_lambda).max() <= 1e-12
        np.testing.assert_allclose(ops.r_lambda, ops.v_pi, atol=1e-10)

    def test_lambda_zero(self):
        mdp, pp = uniform_two_state(lam=0.0)
        ops = multistep_bellman(mdp, pp)
        np.testing.assert_allclose(ops.P_lambda, ops.P_pi_gamma, atol=1e-12)
        np.testing.assert_allclose(ops.r_lambda, ops.r_pi, atol=1e-12)

    def test_neumann_generic_lambda(self):
        rng = np.random.default_rng(4)
        for mdp, pp in random_models(5, seed=4):
            mdp = mdp.replace(lam=rng.choice([0.3, 0.7], mdp.n_states))
            ops = multistep_bellman(mdp, pp)
            A = ops.P_pi_gamma * mdp.lam
            I = np.eye(mdp.n_states)
            inv = np.column_stack([neumann(A, I[:, j], 300) for j in range(mdp.n_states)])
            np.testing.assert_allclose(ops.P_lambda, I - inv @ (I - ops.P_pi_gamma), atol=1e-8)
            np.testing.assert_allclose(ops.r_lambda, inv @ ops.r_pi, atol=1e-8)

    def test_generalized_bellman(self):
        for mdp, pp in random_models(10, seed=6):
            ops = multistep_bellman(mdp, pp)
            N = mdp.n_states
            v = np.linalg.solve(np.eye(N) - ops.P_lambda, ops.r_lambda)
            np.testing.assert_allclose(v, ops.v_pi, atol=1e-9)
            assert ops.P_lambda.min() >= -1e-12


class TestEmphasis:
    def test_lambda_one_equals_weighted_interest(self):
        mdp, pp = uniform_two_state(lam=1.0, interest=2.0)
        ops = multistep_bellman(mdp, pp)
        d = behavior_distribution(mdp, pp)
        np.testing.assert_allclose(emphasis_weights(mdp, pp, ops), d * 2.0, atol=1e-14)

    def test_zero_interest(self):
        mdp, pp = uniform_two_state(interest=0.0)
        ops = multistep_bellman(mdp, pp)
        np.testing.assert_array_equal(emphasis_weights(mdp, pp, ops), 0.0)

    def test_dominates_interest(self):
        for mdp, pp in random_models(20, seed=7):
            ops = multistep_bellman(mdp, pp)
            d = behavior_distribution(mdp, pp)
            assert np.all(emphasis_weights(mdp, pp, ops) >= d * mdp.interest - 1e-12)


class TestLinearSystem:
    def test_tabular_lambda_one(self):
        mdp, pp = uniform_two_state(lam=1.0)
        rep = analyze(mdp, pp)
        d = rep.d_behavior
        np.testing.assert_allclose(rep.C, -np.diag(d), atol=1e-12)
        np.testing.assert_allclose(rep.b, d * rep.operators.v_pi, atol=1e-12)
        np.testing.assert_allclose(rep.theta_star, rep.operators.v_pi, atol=1e-10)

    def test_zero_interest(self):
        mdp, pp = uniform_two_state(interest=0.0)
        ops = multistep_bellman(mdp, pp)
        rep = linear_system(mdp, ops, emphasis_weights(mdp, pp, ops))
        np.testing.assert_array_equal(rep.C, 0.0)
        np.testing.assert_array_equal(rep.b, 0.0)
        assert rep.margin_c == 0.0

    def test_twostate_values(self, twostate):
        rep = analyze(*twostate)
        np.testing.assert_allclose(rep.theta_star, [3.18627451, 0.28186275], atol=1e-8)
        assert rep.margin_c > 0
        assert rep.C @ rep.theta_star + rep.b == pytest.approx(np.zeros(2), abs=1e-9)
        eig = np.linalg.eigvalsh(rep.C + rep.C.T)
        assert eig.max() <= -2 * rep.margin_c + 1e-12
        assert np.linalg.norm(rep.theta_star) < rep.radius_threshold

    def test_iff_on_random_models(self):
        models = random_models(60, seed=10) + random_models(40, seed=11, rank_deficient=True)
        mismatches = 0
        for mdp, pp in models:
            rep = analyze(mdp, pp)
            mismatches += (rep.margin_c > 1e-9) != (rep.feature_rank_on_J1 == mdp.n_features)
        assert mismatches == 0

    def test_reward_scaling(self):
        for mdp, pp in random_models(5, seed=12):
            a = analyze(mdp, pp)
            b = analyze(mdp.replace(reward_mean=3.0 * mdp.reward_mean), pp)
            np.testing.assert_allclose(b.C, a.C, atol=1e-12)
            np.testing.assert_allclose(b.b, 3.0 * a.b, atol=1e-12)
            np.testing.assert_allclose(b.theta_star, 3.0 * a.theta_star, atol=1e-9)

    def test_emphasized_states_cover_interest(self):
        for mdp, pp in random_models(20, seed=13, zero_interest_frac=0.4):
            if not np.any(mdp.interest > 0):
                continue
            rep = analyze(mdp, pp)
            positive = set(np.flatnonzero(mdp.interest > 0))
            assert positive <= set(rep.emphasized_states.tolist())


class TestThetaStar:
    def test_identity(self):
        np.testing.assert_allclose(solve_theta_star(-np.eye(2), np.array([1.0, 2.0])), [1, 2])

    def test_inconsistent(self):
        C = np.diag([-1.0, 0.0])
        with pytest.raises(Inconsistent):
            solve_theta_star(C, np.array([1.0, 1.0]))

    def test_duplicate_features_rank_deficient(self):
        """Both states share the feature row (1, 1): the emphasized span is a line."""
        mdp, pp = uniform_two_state(features=np.array([[1.0, 1.0], [1.0, 1.0]]))
        rep = analyze(mdp, pp)
        assert rep.feature_rank_on_J1 == 1
        assert rep.margin_c <= 1e-9
        th = rep.theta_star
        assert th[0] == pytest.approx(th[1], abs=1e-12)
        u = np.array([1.0, 1.0]) / np.sqrt(2)
        assert abs(u @ (rep.C @ th + rep.b)) <= 1e-9
        oracle = np.linalg.pinv(rep.C) @ (-rep.b)
        np.testing.assert_allclose(th, oracle, atol=1e-9)

    def test_baird_rank_deficient(self):
        mdp, pp = builtin("baird7")
        rep = analyze(mdp, pp)
        sub = rep.subspace
        assert rep.feature_rank_on_J1 == 7 < 8
        assert sub.pd_margin > 0 and sub.subspace_margin > 0
        U = sub.subspace_basis
        resid = rep.C @ rep.theta_star + rep.b
        assert np.abs(U.T @ resid).max() <= 1e-9
        # range(C) lies in the emphasized span
        proj = U @ U.T
        assert np.abs(rep.C - proj @ rep.C).max() <= 1e-10
        assert np.abs(rep.theta_star - proj @ rep.theta_star).max() <= 1e-10


class TestSubspace:
    def test_full_rank_is_whole_space(self, twostate):
        rep = analyze(*twostate)
        assert rep.subspace.subspace_basis.shape == (2, 2)
        assert rep.subspace.subspace_margin == pytest.approx(rep.margin_c, abs=1e-12)

    def test_all_emphasized_pd(self):
        for mdp, pp in random_models(10, seed=14):
            rep = analyze(mdp, pp)
            assert rep.subspace.pd_margin > 0
            assert len(rep.subspace.J0) == 0

    def test_engineered_rank_one(self):
        feats = np.array([[1.0, 0.0], [2.0, 0.0]])
        mdp, pp = uniform_two_state(features=feats)
        rep = analyze(mdp, pp)
        e1 = np.array([1.0, 0.0])
        assert e1 @ rep.C @ e1 < 0
        np.testing.assert_allclose(rep.C[:, 1], 0.0, atol=1e-14)
        np.testing.assert_allclose(rep.C[1, :], 0.0, atol=1e-14)

    def test_empty(self):
        mdp, pp = uniform_two_state(interest=0.0)
        ops = multistep_bellman(mdp, pp)
        with pytest.raises(EmptyEmphasis):
            subspace_analysis(mdp, pp, ops, emphasis_weights(mdp, pp, ops))


class TestOde:
    def test_stationary(self, twostate):
        rep = analyze(*twostate)
        _, path = integrate_mean_ode(rep, rep.theta_star, 1.0, 0.01)
        np.testing.assert_allclose(path, np.tile(rep.theta_star, (len(path), 1)), atol=1e-12)

    def test_exponential(self):
        _, path = integrate_mean_ode((-np.eye(2), np.zeros(2)), [1.0, 0.0], 1.0, 1e-3)
        np.testing.assert_allclose(path[-1], [np.exp(-1.0), 0.0], atol=1e-6)

    def test_monotone_and_rate(self, twostate):
        rep = analyze(*twostate)
        _, path = integrate_mean_ode(rep, np.zeros(2), 10.0, 0.01)
        dist = np.linalg.norm(path - rep.theta_star, axis=1)
        assert np.all(np.diff(dist) <= 1e-12)
        assert dist[-1] <= np.exp(-rep.margin_c * 10.0) * dist[0] + 1e-8


def test_behavior_weighting_baird_not_definite():
    rep = analyze(*builtin("baird7"), weighting="behavior")
    assert rep.margin_c <= 0
    assert np.linalg.eigvals(rep.C).real.max() > 0
