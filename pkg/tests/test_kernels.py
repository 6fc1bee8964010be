"""Compiled simulation against a scalar-by-scalar replay of the same random inputs."""

import numpy as np
import pytest

from etdlab.etd import (AlgoConfig, AlgState, ModelTables, StepSchedule, draw_chunk,
                        draw_start_state, initial_state, simulate, theta_step, trace_step)
from etdlab.experiment import trace_arrays, truncation_error_curve
from etdlab.mdp import builtin, cdf_table, make_rng

from conftest import random_models


def replay_inputs(mdp, pp, n, seed, perturb):
    """The random inputs ``simulate`` consumes, drawn in the same order."""
    rng = make_rng(seed)
    tables = ModelTables.build(mdp, pp)
    s0 = draw_start_state(tables, rng)
    u, z, pert = draw_chunk(rng, n, mdp.n_features, perturb)
    return s0, u, z, pert


def straight_line(mdp, pp, variant, alpha, n, s0, u, z, pert, radius=None, K=None, sigma=0.0):
    """Plain-Python loop over the recursion, one scalar at a time."""
    N, nf = mdp.n_states, mdp.n_features
    phi = mdp.features
    rho = pp.ratios()
    beh_cdf = cdf_table(pp.behavior)
    tr_cdf = cdf_table(mdp.trans)
    td_trace = variant in ("OffPolicyTD", "ProjectedOffPolicyTD")
    s = s0
    F = float(mdp.interest[s])
    M = 1.0 if td_trace else mdp.lam[s] * mdp.interest[s] + (1 - mdp.lam[s]) * F
    e = [M * phi[s, j] for j in range(nf)]
    theta = [0.0] * nf
    thetas = []
    for k in range(n):
        thetas.append(list(theta))
        a = 0
        while beh_cdf[s, a] <= u[k, 0]:
            a += 1
        s2 = 0
        while tr_cdf[s, a, s2] <= u[k, 1]:
            s2 += 1
        r = mdp.reward_mean[s, a, s2] + mdp.reward_noise_std[s, a, s2] * z[k]
        v2 = sum(phi[s2, j] * theta[j] for j in range(nf))
        v1 = sum(phi[s, j] * theta[j] for j in range(nf))
        delta = r + mdp.gamma[s2] * v2 - v1
        ec = list(e)
        if variant == "ClipTraceETD":
            ec = [min(max(x, -K), K) for x in e]
        y = [ec[j] * rho[s, a] * delta for j in range(nf)]
        if variant == "ClipIncrementETD":
            y = [min(max(x, -K), K) for x in y]
        theta = [theta[j] + alpha * y[j] for j in range(nf)]
        if sigma > 0:
            theta = [theta[j] + alpha * sigma * pert[k, j] for j in range(nf)]
        if radius is not None:
            nrm = sum(x * x for x in theta) ** 0.5
            if nrm > radius:
                theta = [radius * x / nrm for x in theta]
        g, lam, i = mdp.gamma[s2], mdp.lam[s2], mdp.interest[s2]
        F = g * rho[s, a] * F + i
        M = 1.0 if td_trace else lam * i + (1 - lam) * F
        e = [lam * g * rho[s, a] * e[j] + M * phi[s2, j] for j in range(nf)]
        s = s2
    return np.array(thetas), np.array(theta)


CASES = [
    ("UnconstrainedETD", {}),
    ("ProjectedETD", {"radius": 0.8}),
    ("ClipTraceETD", {"radius": 5.0, "K": 1.0}),
    ("ClipIncrementETD", {"radius": 5.0, "K": 0.3}),
    ("OffPolicyTD", {}),
    ("ProjectedOffPolicyTD", {"radius": 0.8}),
]


@pytest.mark.parametrize("variant,kw", CASES)
def test_twostate_against_straight_line(variant, kw):
    mdp, pp = builtin("twostate")
    n, alpha, sigma = 400, 0.05, 0.2
    s0, u, z, pert = replay_inputs(mdp, pp, n, 13, perturb=True)
    ref, ref_final = straight_line(mdp, pp, variant, alpha, n, s0, u, z, pert, sigma=sigma, **kw)
    cfg = AlgoConfig(variant=variant, schedule=StepSchedule.constant(alpha), perturb_std=sigma,
                     radius=kw.get("radius"), clip_K=kw.get("K"))
    tr = simulate(mdp, pp, cfg, n, make_rng(13))
    np.testing.assert_allclose(tr.theta, ref, rtol=0, atol=1e-14)
    np.testing.assert_allclose(tr.theta_final, ref_final, rtol=0, atol=1e-14)


def test_three_step_run_matches_straight_line():
    mdp, pp = builtin("twostate")
    s0, u, z, pert = replay_inputs(mdp, pp, 3, 0, perturb=False)
    ref, final = straight_line(mdp, pp, "UnconstrainedETD", 0.1, 3, s0, u, z, pert)
    tr = simulate(mdp, pp, AlgoConfig(variant="UnconstrainedETD",
                                      schedule=StepSchedule.constant(0.1)), 3, make_rng(0))
    np.testing.assert_allclose(tr.theta, ref, rtol=0, atol=1e-14)
    np.testing.assert_allclose(tr.theta_final, final, rtol=0, atol=1e-14)


def test_random_models_against_reference_steps():
    """Kernel traces and iterates equal repeated trace_step / theta_step calls."""
    for mdp, pp in random_models(5, seed=21):
        cfg = AlgoConfig(variant="ProjectedETD", radius=3.0, schedule=StepSchedule.constant(0.02))
        n = 300
        tr = simulate(mdp, pp, cfg, n, make_rng(2))
        arrays = trace_arrays(mdp, pp, make_rng(2), n)
        S, A, R = arrays["S"], arrays["A"], arrays["R"]
        rho = pp.ratios()
        state = initial_state(mdp, cfg, int(S[0]))
        for k in range(n):
            np.testing.assert_allclose(state.theta, tr.theta[k], rtol=0, atol=1e-13)
            np.testing.assert_allclose(state.e, arrays["E"][k], rtol=0, atol=1e-12)
            theta = theta_step(cfg, mdp, pp, state, (A[k], S[k + 1], R[k]), 0.02)
            e, F, M = trace_step(mdp, state, S[k + 1], rho[S[k], A[k]])
            state = AlgState(k + 1, int(S[k + 1]), rho[S[k], A[k]], e, F, M, theta)


def test_truncation_kernel_zero_without_truncation():
    mdp, pp = builtin("twostate")
    curve = truncation_error_curve(mdp, pp, make_rng(0), 50, [60])
    assert curve[60] == 0.0


def test_truncation_lambda_zero_only_followon():
    mdp, pp = builtin("twostate", lam=0.0)
    arrays = trace_arrays(mdp, pp, make_rng(1), 2000)
    np.testing.assert_allclose(arrays["E"], arrays["F"][:, None] * mdp.features[arrays["S"][:-1]],
                               rtol=0, atol=1e-12)
