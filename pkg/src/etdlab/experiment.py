"""Seeded Monte Carlo ensembles and the statistics computed from them.

Every estimator over iterate logs works in *log rows*: with thinning stride
``thin``, row k holds theta at step ``k * thin``. Windows, burn-in and the
window length ``m`` are all counted in rows.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import _kernels as K
from .analysis import analyze
from .etd import AlgoConfig, ModelTables, simulate, stream
from .exceptions import ModelError, WindowOutOfRange
from .mdp import make_rng


@dataclass(frozen=True, eq=False)
class ExperimentPlan:
    """One ensemble: a model, an algorithm and the statistics parameters.

    ``burn_in`` defaults to 20% of the horizon; ``delta`` is the radius of the
    neighborhood of theta* used by the occupation statistics.
    """

    mdp: object
    pp: object
    algo: AlgoConfig
    horizon: int
    n_runs: int = 1
    base_seed: int = 0
    delta: float = 0.1
    burn_in: int | None = None
    window_m: int = 1
    thin: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ModelError("horizon must be >= 1")
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", int(0.2 * self.horizon))
        if not 0 <= self.burn_in < self.horizon:
            raise ModelError("burn_in must lie in [0, horizon)")
        if self.n_runs < 1:
            raise ModelError("n_runs must be >= 1")
        if self.delta <= 0:
            raise ModelError("delta must be positive")
        if self.window_m < 1 or self.thin < 1:
            raise ModelError("window_m and thin must be >= 1")

    @property
    def burn_in_rows(self):
        return -(-self.burn_in // self.thin)

    @property
    def n_rows(self):
        return -(-self.horizon // self.thin)

    def rng(self, run_index):
        return make_rng(self.base_seed, run_index)


def run_trajectory(plan, run_index, tables=None):
    """Deterministic function of ``(plan, run_index)``."""
    return simulate(plan.mdp, plan.pp, plan.algo, plan.horizon, plan.rng(run_index),
                    thin=plan.thin, tables=tables)


def _as_log(log):
    theta = getattr(log, "theta", log)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    return theta


def _window(n_rows, from_k, length):
    if from_k < 0 or length < 1 or from_k + length > n_rows:
        raise WindowOutOfRange(f"window [{from_k}, {from_k + length}) outside log of {n_rows} rows")


def _distances(log, theta_star):
    theta = _as_log(log)
    return np.linalg.norm(theta - np.asarray(theta_star, dtype=float), axis=1)


# ---------------------------------------------------------------------------
# Path statistics


def occupation_fraction(log, theta_star, delta, from_k, length):
    """Fraction of rows ``from_k .. from_k+length-1`` in the closed delta-ball."""
    dist = _distances(log, theta_star)
    _window(len(dist), from_k, length)
    return float(np.mean(dist[from_k:from_k + length] <= delta))


def wilson_interval(successes, trials, confidence=0.95):
    ci = binomtest(int(successes), int(trials)).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def segment_violated(log, theta_star, delta, from_k, length):
    dist = _distances(log, theta_star)
    _window(len(dist), from_k, length)
    return bool(np.any(dist[from_k:from_k + length] > delta))


def segment_violation_prob(logs, theta_star, delta, from_k, length):
    """Fraction of runs leaving the delta-ball somewhere in the window, with a Wilson 95% CI."""
    flags = [segment_violated(log, theta_star, delta, from_k, length) for log in logs]
    if not flags:
        raise ValueError("need at least one run")
    k = int(sum(flags))
    return k / len(flags), wilson_interval(k, len(flags))


def running_average(log):
    """``theta_bar_t = (1/t) sum_{j<t} theta_j`` for t = 1..len(log)."""
    theta = _as_log(log)
    return np.cumsum(theta, axis=0) / np.arange(1, len(theta) + 1)[:, None]


def averaged_deviation(log, theta_star, k, m):
    """``max_{k <= t < k+m} |theta_bar_t - theta*|`` (needs ``k >= 1``)."""
    theta = _as_log(log)
    if k < 1 or m < 1 or k + m > len(theta) + 1:
        raise WindowOutOfRange(f"averaging window [{k}, {k + m}) invalid for {len(theta)} rows")
    bars = running_average(theta[:k + m - 1])  # bars[t-1] is theta_bar_t
    dev = np.linalg.norm(bars[k - 1:k + m - 1] - np.asarray(theta_star, dtype=float), axis=1)
    return float(dev.max())


def _inside_windows(dist, delta, m, burn_in):
    """Indicator per window start that ``m`` consecutive rows lie in the open ball."""
    inside = (dist[burn_in:] < delta).astype(np.int64)
    if len(inside) < m:
        raise WindowOutOfRange("fewer post-burn-in rows than the window length")
    csum = np.concatenate(([0], np.cumsum(inside)))
    return (csum[m:] - csum[:-m]) == m


def batch_means_se(x, n_batches=20):
    x = np.asarray(x, dtype=float)
    n_batches = min(n_batches, len(x))
    if n_batches < 2:
        return float("nan")
    means = np.array([b.mean() for b in np.array_split(x, n_batches)])
    return float(means.std(ddof=1) / np.sqrt(n_batches))


@dataclass(frozen=True)
class KappaEstimate:
    value: float
    se: float
    per_run: tuple
    single_run: bool


def kappa_estimate(logs, theta_star, delta, m, burn_in, n_batches=20):
    """Occupation estimate of the mass of ``[N_delta(theta*)]^m``.

    Overlapping windows of ``m`` rows after ``burn_in`` count when every row
    lies strictly inside the ball. The standard error is taken across runs
    when there are several, and from batch means along the run otherwise.
    """
    fracs, ses = [], []
    for log in logs:
        ok = _inside_windows(_distances(log, theta_star), delta, m, burn_in)
        fracs.append(float(ok.mean()))
        ses.append(batch_means_se(ok, n_batches))
    if not fracs:
        raise ValueError("need at least one run")
    value = float(np.mean(fracs))
    if len(fracs) > 1:
        se = float(np.std(fracs, ddof=1) / np.sqrt(len(fracs)))
    else:
        se = ses[0]
    return KappaEstimate(value, se, tuple(fracs), len(fracs) == 1)


def pathwise_bound(kappa, delta, radius, n_se=3.0):
    """Right side of the averaged-iterate bound ``delta k + 2 r_B (1-k) + n_se SE``."""
    return delta * kappa.value + 2.0 * radius * (1.0 - kappa.value) + n_se * kappa.se


# ---------------------------------------------------------------------------
# Estimators that need their own trace streams


def trace_arrays(mdp, pp, rng, T, **kw):
    """Concatenated stream output for ``T`` steps (states has ``T + 1`` entries)."""
    parts = list(stream(mdp, pp, rng, T, **kw))
    S = np.concatenate([p.S[:-1] for p in parts] + [parts[-1].S[-1:]])
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return {"S": S, "A": cat("A"), "R": cat("R"), "E": cat("E"), "F": cat("F"), "M": cat("M")}


def _plan_source(plan_or_model):
    if isinstance(plan_or_model, ExperimentPlan):
        return plan_or_model.mdp, plan_or_model.pp, plan_or_model.algo.variant.offpolicy_td
    mdp, pp = plan_or_model
    return mdp, pp, False


def elstd_estimate(plan, T, run_index=0):
    """Time averages ``C_hat`` and ``b_hat`` of the ELSTD matrix and vector iterates.

    ``plan`` is an ExperimentPlan (seeded by ``(base_seed, run_index)``) or an
    ``(mdp, pp)`` pair, in which case ``run_index`` is used as the seed.
    """
    mdp, pp, td = _plan_source(plan)
    rng = plan.rng(run_index) if isinstance(plan, ExperimentPlan) else make_rng(run_index, 0)
    tables = ModelTables.build(mdp, pp)
    phi, gamma = tables.phi, tables.gamma
    n = mdp.n_features
    C = np.zeros((n, n))
    b = np.zeros(n)
    for ch in stream(mdp, pp, rng, T, offpolicy_td=td, tables=tables):
        s0, s1 = ch.S[:-1], ch.S[1:]
        W = ch.E * tables.rho[s0, ch.A][:, None]
        C += W.T @ (gamma[s1][:, None] * phi[s1] - phi[s0])
        b += W.T @ ch.R
    return C / T, b / T


def _psi_rows(X, K_clip, kind):
    if kind == "componentwise":
        return np.clip(X, -K_clip, K_clip)
    rbar = np.sqrt(X.shape[1]) * K_clip
    nrm = np.linalg.norm(X, axis=1, keepdims=True)
    scale = np.where(nrm >= rbar, rbar / np.where(nrm > 0, nrm, 1.0), 1.0)
    return X * scale


def hbar_estimate(plan, theta, T, clip=None, clip_kind="componentwise", clip_mode="increment",
                  run_index=0):
    """``(1/T) sum_t h(theta, xi_t)`` along a simulated trace stream.

    With ``clip=K`` the clipped field is used instead: ``psi_K`` applied to the
    whole increment (``clip_mode="increment"``) or only to the trace
    (``clip_mode="trace"``). Rewards enter through their means.
    """
    mdp, pp, td = _plan_source(plan)
    rng = plan.rng(run_index) if isinstance(plan, ExperimentPlan) else make_rng(run_index, 0)
    tables = ModelTables.build(mdp, pp)
    theta = np.asarray(theta, dtype=float)
    v = tables.phi @ theta
    total = np.zeros(mdp.n_features)
    for ch in stream(mdp, pp, rng, T, offpolicy_td=td, tables=tables):
        s0, s1 = ch.S[:-1], ch.S[1:]
        td_err = tables.reward_mean[s0, ch.A, s1] + tables.gamma[s1] * v[s1] - v[s0]
        w = (tables.rho[s0, ch.A] * td_err)[:, None]
        if clip is None:
            Y = ch.E * w
        elif clip_mode == "trace":
            Y = _psi_rows(ch.E, clip, clip_kind) * w
        elif clip_mode == "increment":
            Y = _psi_rows(ch.E * w, clip, clip_kind)
        else:
            raise ValueError("clip_mode must be 'trace' or 'increment'")
        total += Y.sum(axis=0)
    return total / T


def truncation_error_curve(mdp, pp, rng, T, K_list, offpolicy_td=False):
    """Time-averaged ``max(|e_t - e~_{t,K}|_inf, |F_t - F~_{t,K}|)`` for each K."""
    tr = trace_arrays(mdp, pp, rng, T, offpolicy_td=offpolicy_td)
    tables = ModelTables.build(mdp, pp)
    out = {}
    for Kw in K_list:
        err = K.truncated_errors(tr["S"][:-1], tr["A"], tables.rho, tables.gamma, tables.lam,
                                 tables.interest, tables.phi, tr["E"], tr["F"], int(Kw),
                                 offpolicy_td)
        out[int(Kw)] = float(err.mean())
    return out


@dataclass(frozen=True, eq=False)
class CouplingResult:
    F_gap: np.ndarray
    e_gap: np.ndarray

    @property
    def terminal_F_gap(self):
        return float(self.F_gap[-1])

    @property
    def terminal_e_gap(self):
        return float(self.e_gap[-1])


def coupling_check(mdp, pp, init_a, init_b, seed, T, init_state=None):
    """Traces from two initial ``(e_0, F_0)`` pairs driven by the same transitions.

    Both streams share ``make_rng(seed, 0)``; the random inputs never depend on
    the traces, so the state/action sequences coincide.
    """
    runs = []
    for e0, F0 in (init_a, init_b):
        tr = trace_arrays(mdp, pp, make_rng(seed, 0), T, init_state=init_state,
                          init_e=np.asarray(e0, dtype=float), init_F=float(F0))
        runs.append(tr)
    a, b = runs
    return CouplingResult(F_gap=np.abs(a["F"] - b["F"]),
                          e_gap=np.abs(a["E"] - b["E"]).max(axis=1))


def ui_diagnostic(norms, a_list, n_boot=200, seed=0, confidence=0.9):
    """Uniform-integrability curve ``a -> max_t mean_runs(|e_t| 1(|e_t| >= a))``.

    ``norms`` has one row per run and one column per logged time. Bands come
    from a bootstrap over runs.
    """
    norms = np.asarray(norms, dtype=float)
    if norms.ndim != 2:
        raise ValueError("norms must be (runs, times)")
    a_arr = np.asarray(a_list, dtype=float)

    def curve(x):
        return np.array([(x * (x >= a)).mean(axis=0).max() for a in a_arr])

    point = curve(norms)
    rng = np.random.default_rng(seed)
    boots = np.array([curve(norms[rng.integers(0, len(norms), len(norms))]) for _ in range(n_boot)])
    q = (1 - confidence) / 2
    return {"a": a_arr, "curve": point, "lo": np.quantile(boots, q, axis=0),
            "hi": np.quantile(boots, 1 - q, axis=0)}


# ---------------------------------------------------------------------------
# Ensembles


@dataclass(frozen=True)
class RunRecord:
    run_index: int
    seed: int
    neighborhood_fraction: float
    segment_violation: bool
    averaged_deviation: float
    final_deviation: float
    kappa: float
    kappa_se: float
    diverged: bool
    diverged_at: int
    clip_events: int
    n_steps: int

    def to_dict(self):
        return asdict(self)


def run_statistics(plan, traj, run_index, theta_star):
    """Per-run record; a diverged run counts as violating and never inside."""
    rows = len(traj.theta)
    burn = plan.burn_in_rows
    if traj.diverged or rows <= burn:
        return RunRecord(run_index, plan.base_seed, 0.0, True, float("inf"), float("inf"),
                         0.0, 0.0, bool(traj.diverged), int(traj.diverged_at or -1),
                         traj.clip_events, traj.n_steps)
    length = rows - burn
    frac = occupation_fraction(traj, theta_star, plan.delta, burn, length)
    viol = segment_violated(traj, theta_star, plan.delta, burn, length)
    dev = averaged_deviation(traj, theta_star, max(burn, 1), rows - max(burn, 1) + 1)
    final = float(np.linalg.norm(traj.theta_bar_final - theta_star))
    if length >= plan.window_m:
        ok = _inside_windows(_distances(traj, theta_star), plan.delta, plan.window_m, burn)
        kappa, kse = float(ok.mean()), batch_means_se(ok)
    else:
        kappa, kse = 0.0, float("nan")
    return RunRecord(run_index, plan.base_seed, frac, viol, dev, final, kappa, kse, False, -1,
                     traj.clip_events, traj.n_steps)


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Per-run records plus aggregates that are recomputable from them."""

    records: tuple
    aggregate: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records):
        records = tuple(sorted(records, key=lambda r: r.run_index))
        if not records:
            raise ValueError("no run records")
        R = len(records)
        frac = np.array([r.neighborhood_fraction for r in records])
        dev = np.array([r.averaged_deviation for r in records])
        fin = np.array([r.final_deviation for r in records])
        kap = np.array([r.kappa for r in records])
        n_viol = sum(r.segment_violation for r in records)
        n_div = sum(r.diverged for r in records)
        if R > 1:
            kappa_se = float(kap.std(ddof=1) / np.sqrt(R))
        else:
            kappa_se = float(records[0].kappa_se)
        agg = {
            "n_runs": R,
            "neighborhood_fraction_mean": float(frac.mean()),
            "neighborhood_fraction_median": float(np.median(frac)),
            "segment_violation_prob": n_viol / R,
            "segment_violation_ci": list(wilson_interval(n_viol, R)),
            "averaged_deviation_median": float(np.median(dev)),
            "final_deviation_median": float(np.median(fin)),
            "divergence_rate": n_div / R,
            "divergence_ci": list(wilson_interval(n_div, R)),
            "kappa": float(kap.mean()),
            "kappa_se": kappa_se,
            "kappa_single_run_heuristic": R == 1,
            "clip_events_total": int(sum(r.clip_events for r in records)),
        }
        return cls(records, agg)

    def to_dict(self):
        return {"aggregate": self.aggregate, "runs": [r.to_dict() for r in self.records]}


def _worker(args):
    plan, run_index, theta_star = args
    traj = run_trajectory(plan, run_index)
    return run_statistics(plan, traj, run_index, theta_star), traj


def default_jobs():
    try:
        return max(1, int(os.environ.get("ETDLAB_JOBS", "1")))
    except ValueError:
        return 1


def run_ensemble(plan, jobs=None, theta_star=None, keep_logs=False):
    """Run ``plan.n_runs`` seeded trajectories, in a process pool when ``jobs > 1``.

    Returns ``(EnsembleStats, logs)``; ``logs`` is a list of trajectories
    ordered by run index when ``keep_logs`` is set, else None.
    """
    if theta_star is None:
        weighting = "behavior" if plan.algo.variant.offpolicy_td else "emphatic"
        theta_star = analyze(plan.mdp, plan.pp, weighting=weighting).theta_star
    theta_star = np.asarray(theta_star, dtype=float)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    tasks = [(plan, r, theta_star) for r in range(plan.n_runs)]
    if jobs == 1 or plan.n_runs == 1:
        results = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, tasks))
    stats = EnsembleStats.from_records([rec for rec, _ in results])
    logs = [traj for _, traj in sorted(results, key=lambda x: x[0].run_index)] if keep_logs else None
    return stats, logs
