"""Closed-form quantities of the emphatic TD(lambda) projected Bellman equation.

Everything here is exact linear algebra on the model: value function,
multistep Bellman operators, emphasis weights, the ``C theta + b = 0`` system
and its solution, the emphasized-subspace structure, and the mean ODE.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import EmptyEmphasis, Inconsistent, SingularSystem
from .mdp import (AssumptionReport, check_compatible, policy_matrices,
                  stationary_distribution, validate_assumptions)

RANK_RTOL = 1e-9
EMPHASIS_CLAMP = 1e-12
WEIGHTINGS = ("emphatic", "behavior")


def _solve(A, B, what):
    A = np.asarray(A, dtype=float)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-13 * max(1.0, sv[0]) * A.shape[0]:
        raise SingularSystem(f"{what} is singular (smallest singular value {sv[-1]:.2e})")
    return np.linalg.solve(A, B)


def _sym(A):
    return 0.5 * (A + A.T)


def numerical_rank(A, rtol=RANK_RTOL):
    A = np.atleast_2d(A)
    if A.size == 0:
        return 0
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


@dataclass(frozen=True, eq=False)
class BellmanOperators:
    P_lambda: np.ndarray
    r_lambda: np.ndarray
    v_pi: np.ndarray
    P_pi_gamma: np.ndarray
    r_pi: np.ndarray


@dataclass(frozen=True, eq=False)
class SubspaceReport:
    J1: np.ndarray
    J0: np.ndarray
    G_hat: np.ndarray
    Q_hat: np.ndarray
    M_hat_diag: np.ndarray
    pd_margin: float
    subspace_basis: np.ndarray
    subspace_margin: float

    def to_dict(self):
        return {
            "J1": self.J1.tolist(),
            "J0": self.J0.tolist(),
            "G_hat": self.G_hat.tolist(),
            "Q_hat": self.Q_hat.tolist(),
            "M_hat_diag": self.M_hat_diag.tolist(),
            "pd_margin": self.pd_margin,
            "subspace_basis": self.subspace_basis.tolist(),
            "subspace_margin": self.subspace_margin,
        }


@dataclass(frozen=True, eq=False)
class SolutionReport:
    """Ground truth for one model: the linear system and its diagnostics.

    ``radius_threshold`` is ``|b| / c`` with ``c`` the definiteness margin, or
    the margin on the emphasized-feature span when ``C`` is only
    semidefinite; it is ``inf`` when neither margin is positive.
    """

    emphasis: np.ndarray
    C: np.ndarray
    b: np.ndarray
    theta_star: np.ndarray | None
    margin_c: float
    radius_threshold: float
    emphasized_states: np.ndarray
    feature_rank_on_J1: int
    n_features: int
    weighting: str = "emphatic"
    operators: BellmanOperators | None = None
    subspace: SubspaceReport | None = None
    assumptions: AssumptionReport | None = None
    d_behavior: np.ndarray | None = field(default=None)

    @property
    def negative_definite(self):
        return self.margin_c > 1e-9

    @property
    def effective_margin(self):
        """Margin usable for the ball-radius rule: full-space or on the span."""
        if self.margin_c > 0:
            return self.margin_c
        if self.subspace is not None and self.subspace.subspace_margin > 0:
            return self.subspace.subspace_margin
        return 0.0

    def hbar(self, theta):
        """Mean field ``C theta + b``."""
        return self.C @ np.asarray(theta, dtype=float) + self.b

    def to_dict(self):
        out = {
            "weighting": self.weighting,
            "n_features": self.n_features,
            "emphasis": self.emphasis.tolist(),
            "C": self.C.tolist(),
            "b": self.b.tolist(),
            "theta_star": None if self.theta_star is None else self.theta_star.tolist(),
            "margin_c": self.margin_c,
            "negative_definite": self.negative_definite,
            "radius_threshold": self.radius_threshold if np.isfinite(self.radius_threshold) else None,
            "emphasized_states": self.emphasized_states.tolist(),
            "feature_rank_on_J1": self.feature_rank_on_J1,
        }
        if self.operators is not None:
            out["v_pi"] = self.operators.v_pi.tolist()
            out["P_lambda"] = self.operators.P_lambda.tolist()
            out["r_lambda"] = self.operators.r_lambda.tolist()
        if self.d_behavior is not None:
            out["d_behavior"] = self.d_behavior.tolist()
        if self.subspace is not None:
            out["subspace"] = self.subspace.to_dict()
        if self.assumptions is not None:
            out["assumptions"] = self.assumptions.to_dict()
        return out


def value_function(mdp, pp):
    """``v_pi = (I - P_pi Gamma)^{-1} r_pi``."""
    P, r = policy_matrices(mdp, pp.target)
    A = np.eye(mdp.n_states) - P * mdp.gamma[None, :]
    v = _solve(A, r, "I - P_pi Gamma")
    return v


def multistep_bellman(mdp, pp):
    P, r = policy_matrices(mdp, pp.target)
    N = mdp.n_states
    PG = P * mdp.gamma[None, :]
    PGL = PG * mdp.lam[None, :]
    I = np.eye(N)
    X = _solve(I - PGL, np.column_stack([I - PG, r]), "I - P_pi Gamma Lambda")
    P_lam = I - X[:, :N]
    r_lam = X[:, N]
    v = _solve(I - PG, r, "I - P_pi Gamma")
    return BellmanOperators(P_lambda=P_lam, r_lambda=r_lam, v_pi=v, P_pi_gamma=PG, r_pi=r)


def behavior_distribution(mdp, pp):
    P_beh, _ = policy_matrices(mdp, pp.behavior)
    return stationary_distribution(P_beh)


def emphasis_weights(mdp, pp, ops, d_behavior=None):
    """``diag(M) = d_{pi_o, i}^T (I - P^lambda)^{-1}``, tiny entries clamped to 0."""
    d = behavior_distribution(mdp, pp) if d_behavior is None else d_behavior
    d_i = d * mdp.interest
    m = _solve((np.eye(mdp.n_states) - ops.P_lambda).T, d_i, "I - P^lambda")
    m[m < EMPHASIS_CLAMP] = 0.0
    return m


def subspace_analysis(mdp, pp, ops, emphasis, C=None):
    """Block structure of ``C`` over emphasized states.

    Raises EmptyEmphasis when no state is emphasized.
    """
    J1 = np.flatnonzero(emphasis > 0)
    J0 = np.flatnonzero(emphasis <= 0)
    if J1.size == 0:
        raise EmptyEmphasis("no state has positive emphasis")
    Q_hat = ops.P_lambda[np.ix_(J1, J1)]
    M_hat = emphasis[J1]
    G_hat = M_hat[:, None] * (np.eye(J1.size) - Q_hat)
    pd_margin = float(np.linalg.eigvalsh(_sym(G_hat)).min())

    Phi1 = mdp.features[J1]
    _, sv, Vt = np.linalg.svd(Phi1, full_matrices=False)
    k = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0
    basis = Vt[:k].T
    if C is None:
        C = -mdp.features.T @ (emphasis[:, None] * (np.eye(mdp.n_states) - ops.P_lambda)) @ mdp.features
    if k:
        restricted = basis.T @ C @ basis
        sub_margin = float(-np.linalg.eigvalsh(_sym(restricted)).max())
    else:
        sub_margin = 0.0
    return SubspaceReport(J1=J1, J0=J0, G_hat=G_hat, Q_hat=Q_hat, M_hat_diag=M_hat,
                          pd_margin=pd_margin, subspace_basis=basis, subspace_margin=sub_margin)


def solve_theta_star(C, b, subspace=None, tol=1e-9):
    """Solution of ``C theta + b = 0``.

    Full rank: a direct solve. Otherwise the unique solution inside the
    emphasized-feature span if ``subspace`` is given, else the minimal-norm
    least-squares solution. Raises Inconsistent if the residual is not small.
    """
    C = np.asarray(C, dtype=float)
    b = np.asarray(b, dtype=float)
    n = b.size
    scale = max(1.0, np.abs(C).max(initial=0.0), np.abs(b).max(initial=0.0))
    if numerical_rank(C) == n:
        return np.linalg.solve(C, -b)
    if subspace is not None:
        U = subspace.subspace_basis
        if U.shape[1] == 0:
            theta = np.zeros(n)
        else:
            y = np.linalg.solve(U.T @ C @ U, -(U.T @ b))
            theta = U @ y
    else:
        theta = np.linalg.pinv(C, rcond=RANK_RTOL) @ (-b)
    resid = np.abs(C @ theta + b).max(initial=0.0)
    if resid > tol * scale:
        raise Inconsistent(f"b is not in range(C): residual {resid:.2e}")
    return theta


def linear_system(mdp, ops, emphasis, pp=None, weighting="emphatic"):
    """Assemble ``C``, ``b``, ``theta*`` and the definiteness diagnostics.

    ``emphasis`` is the diagonal weighting: the emphasis weights for ETD, or
    the behavior stationary distribution for off-policy TD(lambda).
    """
    Phi = mdp.features
    N, n = Phi.shape
    G = emphasis[:, None] * (np.eye(N) - ops.P_lambda)
    C = -Phi.T @ G @ Phi
    b = Phi.T @ (emphasis * ops.r_lambda)
    margin = float(-np.linalg.eigvalsh(_sym(C)).max())
    J1 = np.flatnonzero(emphasis > 0)
    rank_J1 = numerical_rank(Phi[J1]) if J1.size else 0

    subspace = None
    if J1.size and pp is not None:
        subspace = subspace_analysis(mdp, pp, ops, emphasis, C=C)
    if not np.any(emphasis > 0):
        theta = np.zeros(n)
    else:
        try:
            theta = solve_theta_star(C, b, subspace if weighting == "emphatic" else None)
        except (Inconsistent, np.linalg.LinAlgError):
            theta = None

    margin_for_radius = margin
    if margin_for_radius <= 0 and subspace is not None:
        margin_for_radius = subspace.subspace_margin
    bnorm = float(np.linalg.norm(b))
    threshold = bnorm / margin_for_radius if margin_for_radius > 0 else np.inf

    return SolutionReport(
        emphasis=emphasis, C=C, b=b, theta_star=theta, margin_c=margin,
        radius_threshold=float(threshold), emphasized_states=J1, feature_rank_on_J1=rank_J1,
        n_features=n, weighting=weighting, operators=ops, subspace=subspace)


def analyze(mdp, pp, weighting="emphatic"):
    """Full exact analysis of a model.

    ``weighting="emphatic"`` gives the ETD(lambda) system; ``"behavior"``
    weights states by the behavior stationary distribution, which is the
    off-policy TD(lambda) system.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    check_compatible(mdp, pp)
    assumptions = validate_assumptions(mdp, pp)
    ops = multistep_bellman(mdp, pp)
    d = behavior_distribution(mdp, pp)
    if weighting == "emphatic":
        weights = emphasis_weights(mdp, pp, ops, d_behavior=d)
    else:
        weights = d.copy()
    report = linear_system(mdp, ops, weights, pp=pp, weighting=weighting)
    assumptions = replace(assumptions, feature_rank_full=report.feature_rank_on_J1 == mdp.n_features)
    return replace(report, assumptions=assumptions, d_behavior=d)


def integrate_mean_ode(report, theta0, horizon, dt, rhs=None):
    """Fixed-step RK4 path of ``x' = C x + b``.

    ``report`` is a SolutionReport or a ``(C, b)`` pair. ``rhs`` overrides the
    vector field (any callable ``x -> x'``). Returns ``(tau, path)`` with
    ``path[k]`` the state at ``tau[k]``.
    """
    if rhs is None:
        if isinstance(report, SolutionReport):
            C, b = report.C, report.b
        else:
            C, b = (np.asarray(v, dtype=float) for v in report)
        rhs = lambda x: C @ x + b  # noqa: E731
    n_steps = int(round(horizon / dt))
    x = np.array(theta0, dtype=float)
    path = np.empty((n_steps + 1, x.size))
    path[0] = x
    for k in range(n_steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        path[k + 1] = x
    return np.arange(n_steps + 1) * dt, path
