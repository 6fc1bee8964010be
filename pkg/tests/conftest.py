import numpy as np
import pytest

from etdlab.mdp import MdpModel, PolicyPair, builtin, random_model


@pytest.fixture
def twostate():
    return builtin("twostate")


@pytest.fixture
def baird():
    return builtin("baird7", gamma=0.9)


def uniform_two_state(gamma=0.9, lam=0.5, features=None, interest=1.0, noise=0.0):
    """Every transition has probability 1/2; rewards r(s,a,s') = s' + a."""
    trans = np.full((2, 2, 2), 0.5)
    reward = np.zeros((2, 2, 2))
    for a in range(2):
        for s2 in range(2):
            reward[:, a, s2] = s2 + a
    mdp = MdpModel(trans=trans, reward_mean=reward, reward_noise_std=np.full(trans.shape, noise),
                   gamma=np.full(2, gamma), lam=np.full(2, lam),
                   interest=np.full(2, interest),
                   features=np.eye(2) if features is None else features)
    pp = PolicyPair(target=np.full((2, 2), 0.5), behavior=np.full((2, 2), 0.5))
    return mdp, pp


def random_models(count, seed=0, **kw):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        N = int(rng.integers(2, 7))
        A = int(rng.integers(1, 4))
        n = int(rng.integers(1, 4))
        out.append(random_model(rng, N, A, n, **kw))
    return out
