"""Compiled inner loops for trajectory simulation.

The public, readable versions of every update live in :mod:`etdlab.etd`;
these kernels must agree with them step for step (see tests/test_kernels.py).
"""

import numpy as np
from numba import njit

# variant codes
UNCONSTRAINED = 0
PROJECTED = 1
CLIP_TRACE = 2
CLIP_INCREMENT = 3
OFFPOLICY_TD = 4
PROJECTED_OFFPOLICY_TD = 5

RADIAL = 0
COMPONENTWISE = 1

OK = 0
DIVERGED = 1


@njit(cache=True)
def _draw(cdf_row, u):
    k = 0
    while cdf_row[k] <= u:
        k += 1
    return k


@njit(cache=True)
def transitions_chunk(s0, u, z, beh_cdf, trans_cdf, reward_mean, noise_std, S, A, R):
    """Fill ``S[0..L]``, ``A[0..L-1]``, ``R[0..L-1]`` starting from state ``s0``."""
    L = u.shape[0]
    s = s0
    S[0] = s
    for k in range(L):
        a = _draw(beh_cdf[s], u[k, 0])
        s2 = _draw(trans_cdf[s, a], u[k, 1])
        A[k] = a
        R[k] = reward_mean[s, a, s2] + noise_std[s, a, s2] * z[k]
        S[k + 1] = s2
        s = s2


@njit(cache=True)
def traces_chunk(S, A, rho_tab, gamma, lam, interest, phi, e_in, F_in, offpolicy_td, E, F, M):
    """Trace recursion over a chunk.

    ``E[k], F[k], M[k]`` hold the traces at the chunk's k-th time; index 0 is
    the carried-in value. Returns the carry for the next chunk's first time.
    """
    L = A.shape[0]
    n = phi.shape[1]
    e = e_in.copy()
    f = F_in
    for k in range(L + 1):
        s = S[k]
        if k > 0:
            rho_prev = rho_tab[S[k - 1], A[k - 1]]
            if offpolicy_td:
                decay = lam[s] * gamma[s] * rho_prev
                for j in range(n):
                    e[j] = decay * e[j] + phi[s, j]
                f = gamma[s] * rho_prev * f + interest[s]
            else:
                f = gamma[s] * rho_prev * f + interest[s]
                m = lam[s] * interest[s] + (1.0 - lam[s]) * f
                decay = lam[s] * gamma[s] * rho_prev
                for j in range(n):
                    e[j] = decay * e[j] + m * phi[s, j]
        if k == L:
            break
        if offpolicy_td:
            M[k] = 1.0
        else:
            M[k] = lam[s] * interest[s] + (1.0 - lam[s]) * f
        F[k] = f
        for j in range(n):
            E[k, j] = e[j]
    return e, f


@njit(cache=True)
def psi_clip(x, K, kind):
    n = x.shape[0]
    out = x.copy()
    if kind == RADIAL:
        rbar = np.sqrt(n) * K
        nrm = np.sqrt(np.sum(x * x))
        if nrm >= rbar:
            for j in range(n):
                out[j] = rbar * x[j] / nrm
    else:
        for j in range(n):
            if out[j] > K:
                out[j] = K
            elif out[j] < -K:
                out[j] = -K
    return out


@njit(cache=True)
def theta_chunk(variant, clip_kind, K, radius, sigma, S, A, R, E, rho_tab, gamma, phi,
                alphas, pert, theta, theta_sum, t0, thin, div_bound, log_theta, log_pos):
    """Advance ``theta`` over a chunk in place.

    Logs ``theta_t`` for every ``t`` divisible by ``thin``. Returns
    ``(status, steps_done, log_pos, clip_events)``; on divergence the step
    that produced the bad iterate is not counted and ``theta`` is left at the
    offending value.
    """
    L = A.shape[0]
    n = theta.shape[0]
    clip_events = 0
    projected = (variant == PROJECTED or variant == CLIP_TRACE or variant == CLIP_INCREMENT
                 or variant == PROJECTED_OFFPOLICY_TD)
    y = np.empty(n)
    for k in range(L):
        t = t0 + k
        if t % thin == 0:
            for j in range(n):
                log_theta[log_pos, j] = theta[j]
            log_pos += 1
        for j in range(n):
            theta_sum[j] += theta[j]
        s = S[k]
        s2 = S[k + 1]
        rho = rho_tab[s, A[k]]
        v_next = 0.0
        v_cur = 0.0
        for j in range(n):
            v_next += phi[s2, j] * theta[j]
            v_cur += phi[s, j] * theta[j]
        td = R[k] + gamma[s2] * v_next - v_cur
        if variant == CLIP_TRACE:
            ec = psi_clip(E[k], K, clip_kind)
            for j in range(n):
                if ec[j] != E[k, j]:
                    clip_events += 1
                    break
            for j in range(n):
                y[j] = ec[j] * rho * td
        else:
            for j in range(n):
                y[j] = E[k, j] * rho * td
            if variant == CLIP_INCREMENT:
                yc = psi_clip(y, K, clip_kind)
                for j in range(n):
                    if yc[j] != y[j]:
                        clip_events += 1
                        break
                for j in range(n):
                    y[j] = yc[j]
        a = alphas[k]
        for j in range(n):
            theta[j] = theta[j] + a * y[j]
        if sigma > 0.0:
            for j in range(n):
                theta[j] = theta[j] + a * sigma * pert[k, j]
        nrm = np.sqrt(np.sum(theta * theta))
        if projected and nrm > radius:
            for j in range(n):
                theta[j] = radius * theta[j] / nrm
            nrm = radius
        if not np.isfinite(nrm) or nrm > div_bound:
            return DIVERGED, k, log_pos, clip_events
    return OK, L, log_pos, clip_events


@njit(cache=True)
def truncated_errors(S, A, rho_tab, gamma, lam, interest, phi, E, F, K, offpolicy_td):
    """``max(|e_t - e~_{t,K}|_inf, |F_t - F~_{t,K}|)`` for every t in the run.

    ``E, F`` are the exact traces at times ``0..T-1`` and ``S, A`` the states
    and actions at those times.
    """
    T = F.shape[0]
    n = phi.shape[1]
    err = np.zeros(T)
    Mt = np.empty(T)
    Ft = np.empty(T)
    for t in range(T):
        s = S[t]
        if t <= K:
            ft = F[t]
        else:
            ft = interest[S[t - K]]
            for k in range(t - K + 1, t + 1):
                ft = ft * rho_tab[S[k - 1], A[k - 1]] * gamma[S[k]] + interest[S[k]]
        Ft[t] = ft
        if offpolicy_td:
            Mt[t] = 1.0
        else:
            Mt[t] = lam[s] * interest[s] + (1.0 - lam[s]) * ft
        if t <= K:
            worst = 0.0
        else:
            worst = abs(F[t] - ft)
            sk = S[t - K]
            et = np.empty(n)
            for j in range(n):
                et[j] = Mt[t - K] * phi[sk, j]
            for k in range(t - K + 1, t + 1):
                beta = rho_tab[S[k - 1], A[k - 1]] * gamma[S[k]] * lam[S[k]]
                for j in range(n):
                    et[j] = beta * et[j] + Mt[k] * phi[S[k], j]
            for j in range(n):
                d = abs(E[t, j] - et[j])
                if d > worst:
                    worst = d
        err[t] = worst
    return err
