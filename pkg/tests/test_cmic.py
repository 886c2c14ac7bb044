import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffumin import numerics as nx
from diffumin.cmic import CMIC, contrastive_loss, cosine_normalize, info_nce
from diffumin.errors import ConfigError, ContractError


def test_identical_embeddings_give_log_batch():
    cmic = CMIC(8, nx.Rng(0))
    r = np.ones((4, 3, 8))
    assert cmic(r, r).item() == pytest.approx(math.log(4), abs=1e-12)


def test_equal_similarities_give_log_batch():
    assert info_nce(np.full((2, 5, 5), 0.3), 0.05).item() == pytest.approx(math.log(5))


def test_two_users_hand_value():
    sim = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = -math.log(math.e / (math.e + 1.0))
    assert info_nce(sim, 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.3133, abs=1e-4)


def test_denominator_includes_positive():
    sim = np.array([[0.5, 0.2, -0.1], [0.0, 0.4, 0.3], [0.1, 0.1, 0.9]])
    ref = np.mean([-(sim[u, u] / 0.5 - math.log(sum(math.exp(s / 0.5) for s in sim[u])))
                   for u in range(3)])
    assert info_nce(sim, 0.5).item() == pytest.approx(ref, abs=1e-12)


def test_single_user_rejected():
    with pytest.raises(ContractError):
        info_nce(np.ones((1, 1)), 0.05)
    with pytest.raises(ContractError):
        contrastive_loss(np.ones((1, 2, 8)), np.ones((1, 2, 8)), 0.05, CMIC(8, nx.Rng(0)))


def test_non_positive_temperature_rejected():
    with pytest.raises(ConfigError):
        CMIC(8, nx.Rng(0), tau=0.0)


def test_similarities_are_bounded_cosines():
    cmic = CMIC(8, nx.Rng(1))
    rng = np.random.default_rng(2)
    sim = cmic.similarities(rng.normal(size=(5, 4, 8)), rng.normal(size=(5, 4, 8))).data
    assert sim.shape == (4, 5, 5)
    assert np.all(np.abs(sim) <= 1 + 1e-12)


def test_zero_vector_normalizes_safely():
    out = cosine_normalize(np.zeros((2, 8))).data
    assert np.all(np.isfinite(out)) and np.all(out == 0)


def test_loss_positive():
    rng = np.random.default_rng(3)
    cmic = CMIC(8, nx.Rng(4))
    assert cmic(rng.normal(size=(6, 4, 8)), rng.normal(size=(6, 4, 8))).item() > 0


def test_heads_are_distinct_and_r_star_detached():
    cmic = CMIC(8, nx.Rng(5))
    assert cmic.head_a.fc1.weight is not cmic.head_b.fc1.weight
    rng = np.random.default_rng(6)
    r_star = nx.Parameter(rng.normal(size=(3, 2, 8)))
    r = nx.Parameter(rng.normal(size=(3, 2, 8)))
    nx.backward(cmic(r, r_star))
    assert np.all(r_star.grad == 0) and np.any(r.grad != 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.05, 0.95))
def test_smaller_positive_angle_lowers_loss(seed, tau, shrink):
    rng = np.random.default_rng(seed)
    B = 4
    sim = rng.uniform(-1, 1, size=(B, B))
    theta = math.acos(sim[0, 0])
    if theta < 1e-3:
        return
    closer = sim.copy()
    closer[0, 0] = math.cos(theta * shrink)
    assert info_nce(closer, tau).item() < info_nce(sim, tau).item()
