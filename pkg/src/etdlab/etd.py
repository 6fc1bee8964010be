"""Stochastic ETD(lambda) iterates and their constrained, clipped and perturbed variants.

The per-step functions here (``trace_step``, ``theta_step`` ...) are the
reference definitions. :func:`simulate` runs long trajectories through the
compiled kernels in :mod:`etdlab._kernels`, consuming random numbers in
fixed-size chunks so that a ``(seed, run)`` pair always reproduces the same
trajectory regardless of the variant being simulated.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels as K
from .exceptions import ModelError, NonFinite
from .mdp import cdf_table, check_compatible, policy_matrices, stationary_distribution

CHUNK = 1 << 16
DIVERGENCE_BOUND = 1e8


class Variant(str, Enum):
    UNCONSTRAINED = "UnconstrainedETD"
    PROJECTED = "ProjectedETD"
    CLIP_TRACE = "ClipTraceETD"
    CLIP_INCREMENT = "ClipIncrementETD"
    OFFPOLICY_TD = "OffPolicyTD"
    PROJECTED_OFFPOLICY_TD = "ProjectedOffPolicyTD"

    @property
    def projected(self):
        return self not in (Variant.UNCONSTRAINED, Variant.OFFPOLICY_TD)

    @property
    def clipped(self):
        return self in (Variant.CLIP_TRACE, Variant.CLIP_INCREMENT)

    @property
    def offpolicy_td(self):
        return self in (Variant.OFFPOLICY_TD, Variant.PROJECTED_OFFPOLICY_TD)

    @property
    def code(self):
        return _VARIANT_CODES[self]


_VARIANT_CODES = {
    Variant.UNCONSTRAINED: K.UNCONSTRAINED,
    Variant.PROJECTED: K.PROJECTED,
    Variant.CLIP_TRACE: K.CLIP_TRACE,
    Variant.CLIP_INCREMENT: K.CLIP_INCREMENT,
    Variant.OFFPOLICY_TD: K.OFFPOLICY_TD,
    Variant.PROJECTED_OFFPOLICY_TD: K.PROJECTED_OFFPOLICY_TD,
}
CLIP_KINDS = {"radial": K.RADIAL, "componentwise": K.COMPONENTWISE}


# ---------------------------------------------------------------------------
# Stepsizes


@dataclass(frozen=True)
class StepSchedule:
    """Deterministic stepsize sequence.

    kinds:
      ``constant``   alpha_t = a
      ``polynomial`` alpha_t = a / (t + t0) ** beta, beta in (0, 1]
      ``classic``    alpha_t = a / (t + t0)
      ``piecewise``  constant on consecutive intervals I_k, value a / (k + 1) ** beta;
                     ``lengths`` is either an int L (interval k has length L * (k + 1))
                     or an explicit tuple whose last entry repeats
    """

    kind: str = "constant"
    a: float = 0.01
    t0: float = 1.0
    beta: float = 1.0
    lengths: int | tuple = 100

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial", "classic", "piecewise"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.a < 0:
            raise ValueError("stepsize scale must be nonnegative")
        if self.kind in ("polynomial", "piecewise") and not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.kind in ("polynomial", "classic") and self.t0 <= 0:
            raise ValueError("t0 must be positive")

    @classmethod
    def constant(cls, alpha):
        return cls("constant", a=alpha)

    @classmethod
    def polynomial(cls, a, t0, beta):
        return cls("polynomial", a=a, t0=t0, beta=beta)

    @classmethod
    def classic(cls, a, t0):
        return cls("classic", a=a, t0=t0, beta=1.0)

    @classmethod
    def piecewise(cls, a, lengths, beta):
        if not isinstance(lengths, int):
            lengths = tuple(int(x) for x in lengths)
        return cls("piecewise", a=a, lengths=lengths, beta=beta)

    def _interval_index(self, t):
        t = np.asarray(t, dtype=np.int64)
        if isinstance(self.lengths, int):
            # interval k covers [L k (k+1) / 2, L (k+1)(k+2) / 2)
            L = self.lengths
            k = np.floor((np.sqrt(1.0 + 8.0 * t / L) - 1.0) / 2.0).astype(np.int64)
            k = np.where(L * (k + 1) * (k + 2) // 2 <= t, k + 1, k)
            k = np.where(L * k * (k + 1) // 2 > t, k - 1, k)
            return k
        bounds = np.cumsum(self.lengths)
        k = np.searchsorted(bounds, t, side="right")
        beyond = k >= len(bounds)
        last = self.lengths[-1]
        extra = np.where(beyond, (t - bounds[-1]) // last + 1, 0)
        return np.where(beyond, len(bounds) - 1 + extra, k)

    def values(self, start, count):
        """``alpha_t`` for ``t = start, ..., start + count - 1``."""
        t = np.arange(start, start + count, dtype=np.float64)
        if self.kind == "constant":
            return np.full(count, float(self.a))
        if self.kind == "polynomial":
            return self.a / (t + self.t0) ** self.beta
        if self.kind == "classic":
            return self.a / (t + self.t0)
        k = self._interval_index(np.arange(start, start + count))
        return self.a / (k + 1.0) ** self.beta

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "t0": self.t0, "beta": self.beta,
                "lengths": self.lengths if isinstance(self.lengths, int) else list(self.lengths)}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "alpha" in doc:
            doc["a"] = doc.pop("alpha")
        if isinstance(doc.get("lengths"), list):
            doc["lengths"] = tuple(doc["lengths"])
        return cls(**doc)


def stepsize_at(sched, t):
    return float(sched.values(int(t), 1)[0])


def m_of(sched, k, T):
    """``min{t >= k : sum_{j=k}^{t+1} alpha_j > T}``."""
    total = 0.0
    block = 4096
    start = k
    while True:
        vals = sched.values(start, block)
        csum = total + np.cumsum(vals)
        hit = np.flatnonzero(csum > T)
        if hit.size:
            # csum index i covers j = k .. start + i, which is t + 1
            t = start + int(hit[0]) - 1
            return max(t, k)
        total = float(csum[-1])
        start += block
        if block < 1 << 22:
            block *= 2


def slow_decrease_gap(sched, t_range, m=lambda t: int(math.isqrt(t))):
    """``max_t sup_{0<=j<=m_t} |alpha_{t+j}/alpha_t - 1|`` over ``t_range``.

    Every built-in schedule is nonincreasing, so the inner sup sits at j = m_t.
    """
    ts = np.asarray(list(t_range), dtype=np.int64)
    ms = np.array([m(int(t)) for t in ts], dtype=np.int64)
    a_t = np.array([stepsize_at(sched, t) for t in ts])
    a_tm = np.array([stepsize_at(sched, t + j) for t, j in zip(ts, ms)])
    return float(np.max(np.abs(a_tm / a_t - 1.0)))


# ---------------------------------------------------------------------------
# Configuration and state


@dataclass(frozen=True, eq=False)
class AlgoConfig:
    """Which update rule to run and its parameters.

    ``perturb_std`` may be a number or the string ``"alpha"`` (std equal to the
    stepsize). ``init_*`` left as None selects the default initialization.
    """

    variant: Variant = Variant.PROJECTED
    schedule: StepSchedule = field(default_factory=StepSchedule)
    radius: float | None = None
    clip_K: float | None = None
    clip_kind: str = "componentwise"
    perturb_std: float | str = 0.0
    init_state: int | None = None
    init_e: np.ndarray | None = None
    init_F: float | None = None
    init_theta: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant.projected and not (self.radius and self.radius > 0):
            raise ModelError(f"{self.variant.value} needs radius > 0")
        if self.variant.clipped and not (self.clip_K and self.clip_K > 0):
            raise ModelError(f"{self.variant.value} needs clip_K > 0")
        if self.clip_kind not in CLIP_KINDS:
            raise ModelError(f"clip_kind must be one of {sorted(CLIP_KINDS)}")
        if isinstance(self.perturb_std, str):
            if self.perturb_std != "alpha":
                raise ModelError("perturb_std must be a number or 'alpha'")
        elif self.perturb_std < 0:
            raise ModelError("perturb_std must be nonnegative")

    def sigma(self):
        if self.perturb_std == "alpha":
            if self.schedule.kind != "constant":
                raise ModelError("perturb_std='alpha' needs a constant stepsize")
            return float(self.schedule.a)
        return float(self.perturb_std)

    def to_dict(self):
        def arr(x):
            return None if x is None else np.asarray(x, dtype=float).tolist()
        return {
            "variant": self.variant.value, "schedule": self.schedule.to_dict(),
            "radius": self.radius, "clip_K": self.clip_K, "clip_kind": self.clip_kind,
            "perturb_std": self.perturb_std, "init_state": self.init_state,
            "init_e": arr(self.init_e), "init_F": self.init_F, "init_theta": arr(self.init_theta),
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "schedule" in doc:
            doc["schedule"] = StepSchedule.from_dict(doc["schedule"])
        for key in ("init_e", "init_theta"):
            if doc.get(key) is not None:
                doc[key] = np.asarray(doc[key], dtype=float)
        return cls(**doc)


@dataclass(eq=False)
class AlgState:
    t: int
    s: int
    rho_prev: float
    e: np.ndarray
    F: float
    M: float
    theta: np.ndarray


def check_offpolicy_td_model(mdp):
    if np.ptp(mdp.gamma) > 0 or np.ptp(mdp.lam) > 0:
        raise ModelError("off-policy TD(lambda) needs constant gamma and lambda")


def initial_state(mdp, cfg, s0):
    """Default: ``F_0 = i(S_0)``, ``M_0 = i(S_0)``, ``e_0 = M_0 phi(S_0)``, ``theta_0 = 0``.

    Off-policy TD uses ``M = 1`` and ``e_0 = phi(S_0)``.
    """
    i0, lam0 = mdp.interest[s0], mdp.lam[s0]
    F0 = float(i0 if cfg.init_F is None else cfg.init_F)
    M0 = 1.0 if cfg.variant.offpolicy_td else lam0 * i0 + (1.0 - lam0) * F0
    if cfg.init_e is None:
        e0 = M0 * mdp.features[s0]
    else:
        e0 = np.array(cfg.init_e, dtype=float)
    theta0 = np.zeros(mdp.n_features) if cfg.init_theta is None else np.array(cfg.init_theta, dtype=float)
    if e0.shape != (mdp.n_features,) or theta0.shape != (mdp.n_features,):
        raise ModelError("init_e and init_theta must have one entry per feature")
    return AlgState(t=0, s=int(s0), rho_prev=1.0, e=e0, F=F0, M=float(M0), theta=theta0)


# ---------------------------------------------------------------------------
# Single-step reference updates


def trace_step(mdp, state, s_new, rho_prev, offpolicy_td=False):
    """Advance ``(e, F, M)`` to the new state; returns the new triple."""
    g, lam, i = mdp.gamma[s_new], mdp.lam[s_new], mdp.interest[s_new]
    phi = mdp.features[s_new]
    F = g * rho_prev * state.F + i
    if offpolicy_td:
        M = 1.0
        e = lam * g * rho_prev * state.e + phi
    else:
        M = lam * i + (1.0 - lam) * F
        e = lam * g * rho_prev * state.e + M * phi
    return e, F, M


def psi_clip(x, K, kind="componentwise"):
    """Bounded Lipschitz map equal to the identity on ``|x|_inf <= K``.

    ``radial`` rescales onto the Euclidean sphere of radius ``sqrt(n) K``;
    ``componentwise`` clamps each coordinate to ``[-K, K]``.
    """
    x = np.asarray(x, dtype=float)
    if K <= 0:
        raise ValueError("K must be positive")
    if kind == "radial":
        rbar = math.sqrt(x.size) * K
        nrm = np.linalg.norm(x)
        return rbar * x / nrm if nrm >= rbar else x.copy()
    if kind == "componentwise":
        return np.clip(x, -K, K)
    raise ValueError(f"unknown clip kind {kind!r}")


def project_ball(theta, radius):
    theta = np.asarray(theta, dtype=float)
    if radius <= 0:
        raise ValueError("radius must be positive")
    nrm = np.linalg.norm(theta)
    return radius * theta / nrm if nrm > radius else theta.copy()


def h_eval(mdp, pp, theta, xi):
    """Mean-reward increment ``e rho(s,a) (r(s,a,s') + gamma(s') phi(s')'theta - phi(s)'theta)``.

    ``xi = (e, F, s, a, s_next)``.
    """
    e, _F, s, a, s2 = xi
    rho = pp.ratios()[s, a]
    phi = mdp.features
    td = mdp.reward_mean[s, a, s2] + mdp.gamma[s2] * phi[s2] @ theta - phi[s] @ theta
    return np.asarray(e, dtype=float) * rho * td


def increment(cfg, mdp, pp, state, transition):
    """The pre-stepsize increment ``Y_t`` of ``cfg.variant`` (clipping included)."""
    a, s2, reward = transition
    s = state.s
    rho = pp.ratios()[s, a]
    phi = mdp.features
    td = reward + mdp.gamma[s2] * (phi[s2] @ state.theta) - phi[s] @ state.theta
    if cfg.variant is Variant.CLIP_TRACE:
        return psi_clip(state.e, cfg.clip_K, cfg.clip_kind) * rho * td
    Y = state.e * rho * td
    if cfg.variant is Variant.CLIP_INCREMENT:
        return psi_clip(Y, cfg.clip_K, cfg.clip_kind)
    return Y


def theta_step(cfg, mdp, pp, state, transition, alpha, rng=None):
    """``theta_{t+1}`` from the traces at time t and the transition out of ``S_t``.

    Raises NonFinite when the result has NaN/Inf entries.
    """
    theta = state.theta + alpha * increment(cfg, mdp, pp, state, transition)
    sigma = cfg.sigma()
    if sigma > 0:
        if rng is None:
            raise ValueError("a perturbed variant needs an rng")
        theta = theta + alpha * sigma * rng.standard_normal(theta.size)
    if cfg.variant.projected:
        theta = project_ball(theta, cfg.radius)
    if not np.all(np.isfinite(theta)):
        raise NonFinite(f"theta became non-finite at t={state.t}")
    return theta


# ---------------------------------------------------------------------------
# Truncated traces


class TruncatedTrace:
    """Traces rebuilt from only the last ``K + 1`` transitions.

    Exact traces are carried alongside, so for ``t <= K`` the truncated pair
    is the exact one. Beyond that, the window sums are evaluated by a Horner
    recursion over a ring buffer; cached window-level emphasis values make
    each step O(K).
    """

    def __init__(self, mdp, K, s0, e0, F0, offpolicy_td=False):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.mdp = mdp
        self.K = int(K)
        self.offpolicy_td = offpolicy_td
        self.t = 0
        self.s = int(s0)
        self.e = np.array(e0, dtype=float)
        self.F = float(F0)
        # (interest, rho_prev * gamma, beta, M~, phi) per time in the window
        self._buf = deque(maxlen=self.K + 1)
        M0 = 1.0 if offpolicy_td else mdp.lam[s0] * mdp.interest[s0] + (1 - mdp.lam[s0]) * F0
        self._buf.append((mdp.interest[s0], 0.0, 0.0, M0, mdp.features[s0]))
        self.e_tilde = self.e.copy()
        self.F_tilde = self.F

    def push(self, rho_prev, s_new):
        mdp = self.mdp
        g, lam, i = mdp.gamma[s_new], mdp.lam[s_new], mdp.interest[s_new]
        phi = mdp.features[s_new]
        state = AlgState(self.t, self.s, rho_prev, self.e, self.F, 0.0, None)
        self.e, self.F, _ = trace_step(mdp, state, s_new, rho_prev, self.offpolicy_td)
        self.t += 1
        self.s = int(s_new)
        gr = rho_prev * g
        beta = gr * lam
        if self.t <= self.K:
            F_tilde = self.F
        else:
            entries = list(self._buf)[1:]  # times t-K .. t-1
            F_tilde = entries[0][0]
            for i_k, gr_k, _, _, _ in entries[1:]:
                F_tilde = F_tilde * gr_k + i_k
            F_tilde = F_tilde * gr + i
        M_tilde = 1.0 if self.offpolicy_td else lam * i + (1.0 - lam) * F_tilde
        self._buf.append((i, gr, beta, M_tilde, phi))
        if self.t <= self.K:
            self.e_tilde, self.F_tilde = self.e.copy(), self.F
        else:
            entries = list(self._buf)
            acc = entries[0][3] * entries[0][4]
            for _, _, beta_k, M_k, phi_k in entries[1:]:
                acc = beta_k * acc + M_k * phi_k
            self.e_tilde, self.F_tilde = acc, F_tilde
        return self.e_tilde, self.F_tilde


def truncated_trace_direct(mdp, pp, states, actions, t, K, e_exact, F_exact):
    """Direct evaluation of the truncated sums at time ``t`` (debug oracle).

    ``states[k], actions[k]`` for k <= t; ``e_exact/F_exact`` are the exact
    traces, used for ``t <= K`` and for ``M~_k`` with ``k <= K``.
    """
    if t <= K:
        return np.array(e_exact[t], dtype=float), float(F_exact[t])
    rho = pp.ratios()
    g, lam, i, phi = mdp.gamma, mdp.lam, mdp.interest, mdp.features

    def F_tilde(u):
        if u <= K:
            return float(F_exact[u])
        total = 0.0
        for k in range(u - K, u + 1):
            prod = 1.0
            for j in range(k, u):
                prod *= rho[states[j], actions[j]] * g[states[j + 1]]
            total += i[states[k]] * prod
        return total

    def M_tilde(u):
        s = states[u]
        return lam[s] * i[s] + (1 - lam[s]) * F_tilde(u)

    e = np.zeros(mdp.n_features)
    for k in range(t - K, t + 1):
        prod = 1.0
        for j in range(k + 1, t + 1):
            prod *= rho[states[j - 1], actions[j - 1]] * g[states[j]] * lam[states[j]]
        e += M_tilde(k) * phi[states[k]] * prod
    return e, F_tilde(t)


# ---------------------------------------------------------------------------
# Long trajectories


@dataclass(frozen=True, eq=False)
class ModelTables:
    """Arrays the kernels need, precomputed once per model."""

    beh_cdf: np.ndarray
    trans_cdf: np.ndarray
    reward_mean: np.ndarray
    noise_std: np.ndarray
    rho: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    interest: np.ndarray
    phi: np.ndarray
    d_behavior: np.ndarray

    @classmethod
    def build(cls, mdp, pp):
        check_compatible(mdp, pp)
        P_beh, _ = policy_matrices(mdp, pp.behavior)
        c = np.ascontiguousarray
        return cls(
            beh_cdf=c(cdf_table(pp.behavior)), trans_cdf=c(cdf_table(mdp.trans)),
            reward_mean=c(mdp.reward_mean), noise_std=c(mdp.reward_noise_std),
            rho=c(pp.ratios()), gamma=c(mdp.gamma), lam=c(mdp.lam),
            interest=c(mdp.interest), phi=c(mdp.features),
            d_behavior=stationary_distribution(P_beh))


def draw_start_state(tables, rng, init_state=None):
    if init_state is not None:
        return int(init_state)
    return int(np.searchsorted(cdf_table(tables.d_behavior), rng.random(), side="right"))


def draw_chunk(rng, length, n_features, perturb):
    """Random inputs for ``length`` steps, always drawn in this order."""
    u = rng.random((length, 2))
    z = rng.standard_normal(length)
    pert = rng.standard_normal((length, n_features)) if perturb else np.zeros((0, n_features))
    return u, z, pert


@dataclass(eq=False)
class StreamChunk:
    """Transitions and traces for times ``t0 .. t0 + L - 1``."""

    t0: int
    S: np.ndarray      # L + 1 states, S[k] = S_{t0+k}
    A: np.ndarray
    R: np.ndarray
    E: np.ndarray      # e_{t0+k}
    F: np.ndarray
    M: np.ndarray
    pert: np.ndarray


def stream(mdp, pp, rng, n_steps, *, init_state=None, init_e=None, init_F=None,
           offpolicy_td=False, perturb=False, tables=None, chunk=CHUNK):
    """Yield StreamChunk objects covering ``n_steps`` behavior-policy steps.

    The trace stream does not depend on theta, so every estimator and every
    algorithm variant can share it.
    """
    tables = ModelTables.build(mdp, pp) if tables is None else tables
    if offpolicy_td:
        check_offpolicy_td_model(mdp)
    s = draw_start_state(tables, rng, init_state)
    cfg = AlgoConfig(variant=Variant.OFFPOLICY_TD if offpolicy_td else Variant.UNCONSTRAINED,
                     init_e=init_e, init_F=init_F)
    st = initial_state(mdp, cfg, s)
    e, F = st.e, st.F
    n = mdp.n_features
    t0 = 0
    while t0 < n_steps:
        L = min(chunk, n_steps - t0)
        u, z, pert = draw_chunk(rng, L, n, perturb)
        S = np.empty(L + 1, dtype=np.int64)
        A = np.empty(L, dtype=np.int64)
        R = np.empty(L)
        K.transitions_chunk(s, u, z, tables.beh_cdf, tables.trans_cdf, tables.reward_mean,
                            tables.noise_std, S, A, R)
        E = np.empty((L, n))
        Fa = np.empty(L)
        Ma = np.empty(L)
        e, F = K.traces_chunk(S, A, tables.rho, tables.gamma, tables.lam, tables.interest,
                              tables.phi, e, F, offpolicy_td, E, Fa, Ma)
        yield StreamChunk(t0, S, A, R, E, Fa, Ma, pert)
        s = int(S[-1])
        t0 += L


@dataclass(eq=False)
class Trajectory:
    """Output of :func:`simulate`.

    Row k of the logged arrays describes time ``t[k]``: the state, traces and
    the iterate *before* the update at that time.
    """

    t: np.ndarray
    states: np.ndarray
    F: np.ndarray
    M: np.ndarray
    norm_e: np.ndarray
    theta: np.ndarray
    theta_final: np.ndarray
    theta_bar_final: np.ndarray
    n_steps: int
    diverged: bool
    diverged_at: int | None
    clip_events: int
    max_abs_e: float
    thin: int

    def theta_bar(self):
        """Running averages of the logged iterates (exact when ``thin == 1``)."""
        csum = np.cumsum(self.theta, axis=0)
        return csum / np.arange(1, len(self.theta) + 1)[:, None]


def simulate(mdp, pp, cfg, n_steps, rng, thin=1, tables=None):
    """Run ``n_steps`` iterations of ``cfg.variant``.

    Unconstrained runs stop early once ``|theta|`` exceeds 1e8 or goes
    non-finite; the result then has ``diverged=True``.
    """
    if thin < 1:
        raise ValueError("thin must be >= 1")
    tables = ModelTables.build(mdp, pp) if tables is None else tables
    variant = cfg.variant
    sigma = cfg.sigma()
    n = mdp.n_features
    theta = (np.zeros(n) if cfg.init_theta is None else np.array(cfg.init_theta, dtype=float))
    if variant.projected:
        theta = project_ball(theta, cfg.radius)
    theta_sum = np.zeros(n)
    n_log = (n_steps + thin - 1) // thin
    log_theta = np.empty((n_log, n))
    log_S = np.empty(n_log, dtype=np.int64)
    log_F = np.empty(n_log)
    log_M = np.empty(n_log)
    log_ne = np.empty(n_log)
    pos = 0
    done = 0
    clip_events = 0
    max_e = 0.0
    diverged_at = None
    K_clip = float(cfg.clip_K or 0.0)
    radius = float(cfg.radius or 0.0)
    chunks = stream(mdp, pp, rng, n_steps, init_state=cfg.init_state, init_e=cfg.init_e,
                    init_F=cfg.init_F, offpolicy_td=variant.offpolicy_td, perturb=sigma > 0,
                    tables=tables)
    for ch in chunks:
        L = len(ch.A)
        alphas = cfg.schedule.values(ch.t0, L)
        start = pos
        status, steps, pos, clips = K.theta_chunk(
            variant.code, CLIP_KINDS[cfg.clip_kind], K_clip, radius, sigma,
            ch.S, ch.A, ch.R, ch.E, tables.rho, tables.gamma, tables.phi,
            alphas, ch.pert, theta, theta_sum, ch.t0, thin, DIVERGENCE_BOUND, log_theta, pos)
        # log rows: times t0 + k for k with (t0 + k) % thin == 0, k < number logged
        ks = (np.arange(start, pos) * thin) - ch.t0
        log_S[start:pos] = ch.S[ks]
        log_F[start:pos] = ch.F[ks]
        log_M[start:pos] = ch.M[ks]
        log_ne[start:pos] = np.linalg.norm(ch.E[ks], axis=1)
        clip_events += int(clips)
        seen = ch.E[: steps + 1] if status == K.DIVERGED else ch.E
        max_e = max(max_e, float(np.abs(seen).max(initial=0.0)))
        done += int(steps)
        if status == K.DIVERGED:
            diverged_at = done
            break
    theta_bar = theta_sum / max(done + (diverged_at is not None), 1)
    return Trajectory(
        t=np.arange(pos) * thin, states=log_S[:pos], F=log_F[:pos], M=log_M[:pos],
        norm_e=log_ne[:pos], theta=log_theta[:pos], theta_final=theta.copy(),
        theta_bar_final=theta_bar, n_steps=done, diverged=diverged_at is not None,
        diverged_at=diverged_at, clip_events=clip_events, max_abs_e=max_e, thin=thin)
