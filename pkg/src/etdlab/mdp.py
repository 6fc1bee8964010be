"""Finite MDP models, policy pairs and the Markov-chain primitives behind them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .exceptions import ModelError, NonIrreducible, UnreachableAction

STOCHASTIC_ATOL = 1e-12


def _frozen(x, dtype=float):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_stochastic(mat, name, axis=-1):
    if np.any(~np.isfinite(mat)):
        raise ModelError(f"{name} contains non-finite entries")
    if np.any(mat < 0):
        raise ModelError(f"{name} has negative entries")
    sums = mat.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > STOCHASTIC_ATOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ModelError(f"{name} rows do not sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True, eq=False)
class MdpModel:
    """A finite MDP together with the per-state functions ETD needs.

    Arrays are copied and made read-only on construction. ``trans[s, a, s2]``
    is ``p(s2 | s, a)``; ``reward_mean`` and ``reward_noise_std`` share that
    layout. ``features`` has one row per state.
    """

    trans: np.ndarray
    reward_mean: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    interest: np.ndarray
    features: np.ndarray
    reward_noise_std: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        trans = _frozen(self.trans)
        if trans.ndim != 3 or trans.shape[0] != trans.shape[2]:
            raise ModelError(f"trans must have shape (N, A, N), got {trans.shape}")
        n_states, n_actions, _ = trans.shape
        if n_states < 1 or n_actions < 1:
            raise ModelError("need at least one state and one action")
        _check_stochastic(trans, "trans")

        reward = _frozen(self.reward_mean)
        if reward.shape != trans.shape:
            raise ModelError(f"reward_mean must have shape {trans.shape}, got {reward.shape}")
        noise = (np.zeros(trans.shape) if self.reward_noise_std is None
                 else np.array(self.reward_noise_std, dtype=float))
        if noise.ndim == 0:
            noise = np.full(trans.shape, float(noise))
        if noise.shape != trans.shape:
            raise ModelError(f"reward_noise_std must have shape {trans.shape}, got {noise.shape}")
        if np.any(noise < 0):
            raise ModelError("reward_noise_std must be nonnegative")

        gamma = _frozen(np.broadcast_to(np.asarray(self.gamma, dtype=float), (n_states,)))
        lam = _frozen(np.broadcast_to(np.asarray(self.lam, dtype=float), (n_states,)))
        interest = _frozen(np.broadcast_to(np.asarray(self.interest, dtype=float), (n_states,)))
        for vec, label in ((gamma, "gamma"), (lam, "lambda")):
            if np.any((vec < 0) | (vec > 1)):
                raise ModelError(f"{label} must lie in [0, 1]")
        if not np.any(gamma < 1):
            raise ModelError("gamma(s) < 1 must hold for at least one state")
        if np.any(interest < 0):
            raise ModelError("interest must be nonnegative")

        feats = _frozen(self.features)
        if feats.ndim == 1:
            feats = _frozen(feats[:, None])
        if feats.ndim != 2 or feats.shape[0] != n_states:
            raise ModelError(f"features must have shape (N, n) with N={n_states}, got {feats.shape}")

        set_ = object.__setattr__
        set_(self, "trans", trans)
        set_(self, "reward_mean", reward)
        set_(self, "reward_noise_std", _frozen(noise))
        set_(self, "gamma", gamma)
        set_(self, "lam", lam)
        set_(self, "interest", interest)
        set_(self, "features", feats)

    @property
    def n_states(self):
        return self.trans.shape[0]

    @property
    def n_actions(self):
        return self.trans.shape[1]

    @property
    def n_features(self):
        return self.features.shape[1]

    def replace(self, **changes):
        """Return a copy with some fields swapped out."""
        kwargs = {k: getattr(self, k) for k in
                  ("trans", "reward_mean", "gamma", "lam", "interest", "features",
                   "reward_noise_std", "name")}
        kwargs.update(changes)
        return MdpModel(**kwargs)


@dataclass(frozen=True, eq=False)
class PolicyPair:
    """Target policy ``pi(a|s)`` and behavior policy ``pi_o(a|s)``, both N x A."""

    target: np.ndarray
    behavior: np.ndarray
    _ratios: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        target = _frozen(self.target)
        behavior = _frozen(self.behavior)
        if target.shape != behavior.shape or target.ndim != 2:
            raise ModelError("target and behavior must both have shape (N, A)")
        _check_stochastic(target, "target policy")
        _check_stochastic(behavior, "behavior policy")
        ratios = np.zeros_like(target)
        np.divide(target, behavior, out=ratios, where=behavior > 0)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "behavior", behavior)
        object.__setattr__(self, "_ratios", _frozen(ratios))

    @property
    def support_ok(self):
        return bool(not np.any((self.target > 0) & (self.behavior == 0)))

    def ratios(self):
        """Table of ``rho(s, a)``; raises if the support condition fails."""
        if not self.support_ok:
            s, a = np.argwhere((self.target > 0) & (self.behavior == 0))[0]
            raise UnreachableAction(f"pi({a}|{s}) > 0 but behavior never takes it")
        return self._ratios


@dataclass(frozen=True)
class AssumptionReport:
    invertible: bool
    spectral_radius: float
    irreducible: bool
    support_ok: bool
    feature_rank_full: bool | None = None

    @property
    def ok(self):
        """Hard requirements only: invertibility, irreducibility, support."""
        return self.invertible and self.irreducible and self.support_ok

    def to_dict(self):
        return {
            "invertible": self.invertible,
            "spectral_radius": self.spectral_radius,
            "irreducible": self.irreducible,
            "support_ok": self.support_ok,
            "feature_rank_full": self.feature_rank_full,
        }


def check_compatible(mdp, pp):
    if pp.target.shape != (mdp.n_states, mdp.n_actions):
        raise ModelError(
            f"policies have shape {pp.target.shape}, model needs "
            f"({mdp.n_states}, {mdp.n_actions})")


def policy_matrices(mdp, policy):
    """State transition matrix and expected one-stage reward under ``policy``."""
    policy = np.asarray(policy, dtype=float)
    P = np.einsum("sa,sat->st", policy, mdp.trans)
    r = np.einsum("sa,sat,sat->s", policy, mdp.trans, mdp.reward_mean)
    return P, r


def spectral_radius(A, tol=1e-10, max_iter=200_000):
    """Perron root of a nonnegative matrix by power iteration.

    Iterates on ``A + I`` (aperiodic, same Perron vector) and stops once the
    Collatz-Wielandt bounds agree to ``tol``. Falls back to a dense eigenvalue
    solve if the bounds have not closed, which can happen for reducible ``A``.
    """
    A = np.asarray(A, dtype=float)
    if np.any(A < 0):
        return float(np.max(np.abs(np.linalg.eigvals(A))))
    B = A + np.eye(A.shape[0])
    x = np.ones(A.shape[0])
    for _ in range(max_iter):
        y = B @ x
        ratios = y / x
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol:
            return float(0.5 * (lo + hi) - 1.0)
        x = y / y.max()
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def is_irreducible(P):
    """Strong connectivity of the directed graph ``{(s, s2): P[s, s2] > 0}``."""
    adj = (np.asarray(P) > 0).astype(np.int8)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1


def stationary_distribution(P):
    """Stationary distribution of an irreducible stochastic matrix.

    Uses the Grassmann-Taksar-Heyman elimination, which involves no
    subtractions and therefore keeps every entry positive.
    """
    P = np.array(P, dtype=float)
    n = P.shape[0]
    if n == 1:
        return np.ones(1)
    T = P.copy()
    for k in range(n - 1, 0, -1):
        s = T[k, :k].sum()
        if s <= 0:
            raise NonIrreducible(f"state {k} cannot reach lower-indexed states")
        T[:k, k] /= s
        T[:k, :k] += np.outer(T[:k, k], T[k, :k])
    d = np.zeros(n)
    d[0] = 1.0
    for k in range(1, n):
        d[k] = d[:k] @ T[:k, k]
    d /= d.sum()
    residual = np.max(np.abs(d @ P - d))
    if not np.all(d > 0) or residual > 1e-10:
        raise NonIrreducible(f"no strictly positive stationary distribution (residual {residual:.2e})")
    return d


def importance_ratio(pp, s, a):
    """``pi(a|s) / pi_o(a|s)`` with ``0/0 = 0``."""
    t, b = pp.target[s, a], pp.behavior[s, a]
    if b == 0:
        if t > 0:
            raise UnreachableAction(f"pi({a}|{s}) = {t} but behavior probability is 0")
        return 0.0
    return float(t / b)


def validate_assumptions(mdp, pp):
    check_compatible(mdp, pp)
    P_pi, _ = policy_matrices(mdp, pp.target)
    A = P_pi * mdp.gamma[None, :]
    I_minus = np.eye(mdp.n_states) - A
    sv = np.linalg.svd(I_minus, compute_uv=False)
    invertible = bool(sv[-1] > 1e-12 * max(1.0, sv[0]) * mdp.n_states)
    P_beh, _ = policy_matrices(mdp, pp.behavior)
    return AssumptionReport(
        invertible=invertible,
        spectral_radius=spectral_radius(A),
        irreducible=is_irreducible(P_beh),
        support_ok=pp.support_ok,
    )


def cdf_table(probs):
    """Row-wise CDFs for inverse-transform sampling.

    Entries at and beyond the last positive-probability column are set to 2 so
    that ``searchsorted(row, u, 'right')`` with ``u`` in [0, 1) never lands on a
    zero-probability outcome.
    """
    probs = np.asarray(probs, dtype=float)
    cum = np.cumsum(probs, axis=-1)
    flat_p = probs.reshape(-1, probs.shape[-1])
    flat_c = cum.reshape(-1, probs.shape[-1])
    for p_row, c_row in zip(flat_p, flat_c):
        last = np.flatnonzero(p_row > 0)
        if last.size:
            c_row[last[-1]:] = 2.0
    return flat_c.reshape(probs.shape)


def sample_step(mdp, pp, rng, s):
    """One behavior-policy transition from state ``s``: ``(a, s_next, reward)``."""
    a = int(np.searchsorted(cdf_table(pp.behavior[s]), rng.random(), side="right"))
    s_next = int(np.searchsorted(cdf_table(mdp.trans[s, a]), rng.random(), side="right"))
    reward = float(mdp.reward_mean[s, a, s_next])
    std = mdp.reward_noise_std[s, a, s_next]
    z = rng.standard_normal()
    if std > 0:
        reward += std * z
    return a, s_next, reward


def make_rng(base_seed, run_index=0):
    """Counter-based Philox stream keyed by ``(base_seed, run_index)``."""
    seq = np.random.SeedSequence([int(base_seed), int(run_index)])
    return np.random.Generator(np.random.Philox(seq))


# ---------------------------------------------------------------------------
# Built-in examples and JSON I/O


def twostate(gamma=0.8, lam=0.5, noise=0.1):
    """Two states, two actions; action 1 drifts toward state 1, which pays 1."""
    trans = np.array([[[0.9, 0.1], [0.3, 0.7]],
                      [[0.6, 0.4], [0.1, 0.9]]])
    reward = np.zeros_like(trans)
    reward[:, :, 1] = 1.0
    mdp = MdpModel(
        trans=trans, reward_mean=reward, reward_noise_std=np.full(trans.shape, noise),
        gamma=np.full(2, gamma), lam=np.full(2, lam), interest=np.ones(2),
        features=np.array([[1.0, 0.0], [1.0, 1.0]]), name="twostate")
    pp = PolicyPair(target=np.array([[0.3, 0.7], [0.3, 0.7]]),
                    behavior=np.full((2, 2), 0.5))
    return mdp, pp


def baird7(gamma=0.99, lam=0.0, reward=1.0):
    """Baird's seven-state star with the eight-feature map.

    Action 0 ("dashed") jumps uniformly to one of the six outer states,
    action 1 ("solid") jumps to the hub (state 6). The behavior policy takes
    the dashed action with probability 6/7, the target policy always goes
    solid. Every transition pays ``reward``.
    """
    n = 7
    trans = np.zeros((n, 2, n))
    trans[:, 0, :6] = 1.0 / 6.0
    trans[:, 1, 6] = 1.0
    feats = np.zeros((n, 8))
    for s in range(6):
        feats[s, s] = 2.0
        feats[s, 7] = 1.0
    feats[6, 6] = 1.0
    feats[6, 7] = 2.0
    mdp = MdpModel(
        trans=trans, reward_mean=np.full(trans.shape, float(reward)),
        gamma=np.full(n, gamma), lam=np.full(n, lam), interest=np.ones(n),
        features=feats, name="baird7")
    pp = PolicyPair(target=np.tile([0.0, 1.0], (n, 1)),
                    behavior=np.tile([6.0 / 7.0, 1.0 / 7.0], (n, 1)))
    return mdp, pp


BUILTINS = {"twostate": twostate, "baird7": baird7}


def builtin(name, **overrides):
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ModelError(f"unknown builtin model {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**overrides)


MODEL_KEYS = ("n_states", "n_actions", "trans", "reward_mean", "reward_noise_std", "gamma",
              "lambda", "interest", "features", "target_policy", "behavior_policy")


def model_from_dict(doc):
    """Build ``(MdpModel, PolicyPair)`` from the JSON document layout."""
    missing = [k for k in MODEL_KEYS if k not in doc and k != "reward_noise_std"]
    if missing:
        raise ModelError(f"model document is missing key {missing[0]!r}")
    mdp = MdpModel(
        trans=doc["trans"], reward_mean=doc["reward_mean"],
        reward_noise_std=doc.get("reward_noise_std"),
        gamma=doc["gamma"], lam=doc["lambda"], interest=doc["interest"],
        features=doc["features"], name=doc.get("name", "custom"))
    if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
        raise ModelError("n_states/n_actions disagree with the shape of trans")
    pp = PolicyPair(target=doc["target_policy"], behavior=doc["behavior_policy"])
    check_compatible(mdp, pp)
    return mdp, pp


def model_to_dict(mdp, pp):
    return {
        "name": mdp.name,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "trans": mdp.trans.tolist(),
        "reward_mean": mdp.reward_mean.tolist(),
        "reward_noise_std": mdp.reward_noise_std.tolist(),
        "gamma": mdp.gamma.tolist(),
        "lambda": mdp.lam.tolist(),
        "interest": mdp.interest.tolist(),
        "features": mdp.features.tolist(),
        "target_policy": pp.target.tolist(),
        "behavior_policy": pp.behavior.tolist(),
    }


def load_model(path):
    with open(Path(path)) as fh:
        return model_from_dict(json.load(fh))


def random_model(rng, n_states, n_actions, n_features, *, sparsity=0.3,
                 rank_deficient=False, zero_interest_frac=0.0):
    """Random valid model for property tests.

    A fraction ``sparsity`` of transition entries is zeroed (keeping each row
    nonempty); the behavior policy is uniform so the chain stays irreducible
    when the union of action graphs is. With ``rank_deficient`` the feature
    matrix is forced to rank ``n_features - 1``.
    """
    while True:
        trans = rng.random((n_states, n_actions, n_states))
        trans[rng.random(trans.shape) < sparsity] = 0.0
        for s in range(n_states):
            for a in range(n_actions):
                if trans[s, a].sum() == 0:
                    trans[s, a, rng.integers(n_states)] = 1.0
        trans /= trans.sum(axis=-1, keepdims=True)
        behavior = np.full((n_states, n_actions), 1.0 / n_actions)
        if is_irreducible(np.einsum("sa,sat->st", behavior, trans)):
            break
    target = rng.random((n_states, n_actions)) + 0.05
    target[rng.random(target.shape) < 0.3] = 0.0
    for s in range(n_states):
        if target[s].sum() == 0:
            target[s, rng.integers(n_actions)] = 1.0
    target /= target.sum(axis=1, keepdims=True)
    feats = rng.standard_normal((n_states, n_features))
    if rank_deficient and n_features > 1:
        feats[:, -1] = feats[:, :-1] @ rng.standard_normal(n_features - 1)
    interest = rng.random(n_states) + 0.1
    interest[rng.random(n_states) < zero_interest_frac] = 0.0
    mdp = MdpModel(
        trans=trans, reward_mean=rng.standard_normal(trans.shape),
        reward_noise_std=np.full(trans.shape, 0.1),
        gamma=rng.uniform(0.3, 0.95, n_states), lam=rng.uniform(0.0, 1.0, n_states),
        interest=interest, features=feats, name="random")
    return mdp, PolicyPair(target=target, behavior=behavior)
