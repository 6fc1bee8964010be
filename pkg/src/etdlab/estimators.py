"""scikit-learn style wrappers around the exact solver and the stochastic iterates.

``fit`` takes a model and its policy pair instead of a data matrix, since the
data stream is generated from the model. ``predict`` maps feature rows to
value estimates ``phi' theta``, so ``score`` compares against ``v_pi`` or any
other target values via R^2.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .analysis import analyze, solve_theta_star
from .etd import AlgoConfig, StepSchedule, Variant, simulate
from .exceptions import ModelError
from .experiment import elstd_estimate
from .mdp import MdpModel, PolicyPair, check_compatible, make_rng


def check_model(mdp, pp):
    """Raise ModelError unless ``(mdp, pp)`` is a compatible model/policy pair."""
    if not isinstance(mdp, MdpModel):
        raise ModelError(f"expected an MdpModel, got {type(mdp).__name__}")
    if not isinstance(pp, PolicyPair):
        raise ModelError(f"expected a PolicyPair, got {type(pp).__name__}")
    check_compatible(mdp, pp)
    return mdp, pp


def check_seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, (bool, np.bool_)) or not isinstance(random_state, (int, np.integer)):
        raise ValueError("random_state must be an int seed")
    return int(random_state)


class _LinearValueMixin(RegressorMixin):

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.coef_.shape[0]:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.coef_.shape[0]}")
        return X @ self.coef_


class ExactTD(_LinearValueMixin, BaseEstimator):
    """Solution of the projected Bellman equation computed from the model.

    Args:
        weighting: "emphatic" (ETD fixed point) or "behavior" (off-policy TD).
    """

    def __init__(self, weighting="emphatic"):
        self.weighting = weighting

    def fit(self, mdp, pp):
        mdp, pp = check_model(mdp, pp)
        self.report_ = analyze(mdp, pp, weighting=self.weighting)
        if self.report_.theta_star is None:
            raise ModelError("the linear system has no solution")
        self.coef_ = self.report_.theta_star.copy()
        self.n_features_in_ = mdp.n_features
        return self


class ELSTD(_LinearValueMixin, BaseEstimator):
    """Least-squares estimate from time-averaged emphatic trace statistics."""

    def __init__(self, n_steps=100_000, random_state=None):
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, mdp, pp):
        mdp, pp = check_model(mdp, pp)
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.C_, self.b_ = elstd_estimate((mdp, pp), int(self.n_steps),
                                          run_index=check_seed(self.random_state))
        self.coef_ = solve_theta_star(self.C_, self.b_)
        self.n_features_in_ = mdp.n_features
        return self


class EmphaticTD(_LinearValueMixin, BaseEstimator):
    """Stochastic ETD(lambda) or off-policy TD(lambda) iterates.

    ``radius="auto"`` uses ``radius_factor`` times the exact ball-radius
    threshold. ``coef_`` is the averaged iterate when ``average`` is set,
    otherwise the last one.
    """

    def __init__(self, variant="ProjectedETD", alpha=0.01, radius="auto", radius_factor=1.5,
                 clip_K=None, clip_kind="componentwise", perturb_std=0.0, n_steps=100_000,
                 thin=1, average=True, random_state=None):
        self.variant = variant
        self.alpha = alpha
        self.radius = radius
        self.radius_factor = radius_factor
        self.clip_K = clip_K
        self.clip_kind = clip_kind
        self.perturb_std = perturb_std
        self.n_steps = n_steps
        self.thin = thin
        self.average = average
        self.random_state = random_state

    def _config(self, mdp, pp):
        variant = Variant(self.variant)
        radius = self.radius
        if radius == "auto":
            if variant.projected:
                weighting = "behavior" if variant.offpolicy_td else "emphatic"
                thr = analyze(mdp, pp, weighting=weighting).radius_threshold
                if not np.isfinite(thr):
                    raise ModelError("radius='auto' needs a positive definiteness margin")
                radius = self.radius_factor * thr
            else:
                radius = None
        return AlgoConfig(variant=variant, schedule=StepSchedule.constant(self.alpha),
                          radius=radius, clip_K=self.clip_K, clip_kind=self.clip_kind,
                          perturb_std=self.perturb_std)

    def fit(self, mdp, pp):
        mdp, pp = check_model(mdp, pp)
        cfg = self._config(mdp, pp)
        rng = make_rng(check_seed(self.random_state), 0)
        self.trajectory_ = simulate(mdp, pp, cfg, int(self.n_steps), rng, thin=int(self.thin))
        self.diverged_ = self.trajectory_.diverged
        traj = self.trajectory_
        self.coef_ = (traj.theta_bar_final if self.average else traj.theta_final).copy()
        self.n_features_in_ = mdp.n_features
        return self
