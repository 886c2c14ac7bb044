"""In-batch InfoNCE between aggregated and augmented interests."""

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError

NORM_FLOOR = 1e-12


class ProjectionHead(nx.Module):
    def __init__(self, d, rng):
        self.fc1 = nx.Linear(d, d, rng)
        self.fc2 = nx.Linear(d, d, rng)

    def __call__(self, x):
        return self.fc2(nx.tanh(self.fc1(x)))


def cosine_normalize(x):
    sq = nx.sum_(x * x, axis=-1, keepdims=True)
    return x / nx.sqrt(nx.maximum(sq, NORM_FLOOR * NORM_FLOOR))


def info_nce(sim, tau):
    """Mean of −log softmax over the diagonal of ``sim`` (..., B, B).

    ``sim[..., u, v]`` compares user u's anchor with user v's candidate;
    the denominator runs over every v including u itself.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    sim = nx.as_tensor(sim)
    B = sim.shape[-1]
    if B < 2:
        raise ContractError("contrastive loss needs at least two users for negatives")
    logp = nx.log_softmax(sim * (1.0 / tau), axis=-1)
    ar = np.arange(B)
    diag = nx.index(logp, (Ellipsis, ar, ar))
    return -nx.mean(diag)


class CMIC(nx.Module):
    def __init__(self, d, rng, tau=0.05):
        if tau <= 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        self.tau = tau
        self.head_a = ProjectionHead(d, rng)
        self.head_b = ProjectionHead(d, rng)

    def similarities(self, r, r_star):
        """Cosine similarities (c, B, B) between projected r and projected r*."""
        r = nx.as_tensor(r)
        r_star = nx.stop_gradient(r_star)
        a = cosine_normalize(self.head_a(r))
        b = cosine_normalize(self.head_b(r_star))
        a = nx.transpose(a, (1, 0, 2))
        b = nx.transpose(b, (1, 0, 2))
        return nx.matmul(a, nx.swap_last(b))

    def __call__(self, r, r_star):
        return contrastive_loss(r, r_star, self.tau, self)


def contrastive_loss(r_batch, r_star_batch, tau, cmic):
    """L_cl for B×c×d aggregated and augmented interests (r* detached)."""
    if r_batch.shape[0] < 2:
        raise ContractError("contrastive loss needs a batch of at least two users")
    return info_nce(cmic.similarities(r_batch, r_star_batch), tau)
