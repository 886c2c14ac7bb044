import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffumin import numerics as nx
from diffumin.errors import ConfigError
from diffumin.omie import (OMIE, aggregate, filter_channels, keep_count, orthogonalize,
                           project_target, route, score, similarity_filter)


def ortho_error(O):
    c = O.shape[-2]
    return np.max(np.abs(O @ np.swapaxes(O, -1, -2) - np.eye(c)))


def gram_schmidt_oracle(S):
    rows = []
    for s in S:
        v = np.array(s, dtype=float)
        for q in rows:
            v = v - (v @ q) * q
        rows.append(v / np.linalg.norm(v))
    return np.array(rows)


# -- projection ---------------------------------------------------------------


def test_zero_projection():
    out = project_target(np.ones(8), nx.Parameter(np.zeros((8, 32))), 4).data
    assert out.shape == (4, 8) and np.all(out == 0)


def test_identity_block_projection():
    W = np.hstack([np.eye(2), np.eye(2)])
    np.testing.assert_array_equal(project_target(np.array([1.0, 2.0]), W, 2).data,
                                  [[1, 2], [1, 2]])


def test_projection_shape_default():
    W = nx.Parameter(np.random.default_rng(0).normal(size=(8, 32)))
    assert project_target(np.ones((3, 8)), W, 4).shape == (3, 4, 8)


# -- orthogonalization -------------------------------------------------------------


def test_axis_aligned_normalization():
    np.testing.assert_allclose(orthogonalize(np.array([[2.0, 0.0], [0.0, 3.0]])).data, np.eye(2))


def test_hand_gram_schmidt():
    np.testing.assert_allclose(orthogonalize(np.array([[1.0, 0.0], [1.0, 1.0]])).data,
                               np.eye(2), atol=1e-15)


def test_duplicate_rows_rescued():
    O = orthogonalize(np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])).data
    assert ortho_error(O) < 1e-12
    np.testing.assert_allclose(O[0], [2 ** -0.5, 2 ** -0.5, 0.0])
    # first canonical axis with a component outside span(row 0), normalized
    np.testing.assert_allclose(O[1], [2 ** -0.5, -(2 ** -0.5), 0.0])


def test_zero_input_rescued_to_canonical_axes():
    O = orthogonalize(np.zeros((3, 4))).data
    np.testing.assert_array_equal(O, np.eye(4)[:3])


def test_matches_oracle_on_random_rows():
    S = np.random.default_rng(1).normal(size=(4, 8))
    np.testing.assert_allclose(orthogonalize(S).data, gram_schmidt_oracle(S), atol=1e-12)


def test_orthonormal_for_random_targets():
    rng = np.random.default_rng(2)
    for c in (2, 4, 8):
        W = rng.normal(size=(8, 8 * c)) / np.sqrt(8)
        O = orthogonalize(project_target(rng.normal(size=(200, 8)), W, c)).data
        assert ortho_error(O) < 1e-5


def test_more_channels_than_dimensions_rejected():
    with pytest.raises(ConfigError):
        orthogonalize(np.ones((3, 2)))


# -- scores and routing ---------------------------------------------------------------


def test_score_of_channels_is_identity():
    O = gram_schmidt_oracle(np.random.default_rng(3).normal(size=(4, 8)))
    np.testing.assert_allclose(score(O, O).data, np.eye(4), atol=1e-14)


def test_score_zero_row():
    O = gram_schmidt_oracle(np.random.default_rng(4).normal(size=(4, 8)))
    E = np.random.default_rng(5).normal(size=(5, 8))
    E[2] = 0
    A = score(E, O).data
    assert np.all(A[2] == 0)
    for i in range(5):
        for j in range(4):
            assert abs(A[i, j] - sum(E[i, k] * O[j, k] for k in range(8))) < 1e-12


def test_route_argmax():
    A = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.4]])
    assert route(A, np.ones(3, bool)).astype(int).tolist() == [[1, 0], [0, 1], [1, 0]]


def test_route_tie_goes_to_lowest_channel():
    assert route(np.array([[0.5, 0.5]]), [True]).astype(int).tolist() == [[1, 0]]


def test_route_masked_row_empty():
    assert route(np.array([[0.5, 0.1]]), [False]).astype(int).tolist() == [[0, 0]]


# -- filtering -----------------------------------------------------------------


def test_keep_count_formula():
    assert keep_count(5000, 20).item() == 1000
    assert keep_count(4, 25).item() == 1
    assert keep_count(3, 20).item() == 1
    assert keep_count(200, 20).item() == 40


def test_keep_count_rejects_bad_percent():
    for p in (0, -5, 101):
        with pytest.raises(ConfigError):
            keep_count(10, p)


def test_full_percent_keeps_routing():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(10, 3))
    mask = np.array([False] * 2 + [True] * 8)
    phi = route(A, mask)
    assert np.array_equal(filter_channels(A, phi, 100, mask), phi)


def test_quarter_of_four_keeps_single_best():
    A = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.7], [0.2, 0.3]])
    mask = np.ones(4, bool)
    gamma = filter_channels(A, route(A, mask), 25, mask)
    assert gamma.astype(int).tolist() == [[1, 0], [0, 0], [0, 1], [0, 0]]


def test_rank_ties_prefer_smaller_row():
    A = np.array([[0.5, 0.0], [0.5, 0.0], [0.5, 0.0], [0.5, 0.0]])
    mask = np.ones(4, bool)
    gamma = filter_channels(A, route(A, mask), 25, mask)
    assert gamma[:, 0].tolist() == [True, False, False, False]


def test_top_k_mode():
    A = np.array([[3.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    mask = np.ones(3, bool)
    gamma = filter_channels(A, route(A, mask), None, mask, mode="top_k", top_k=2)
    assert gamma[:, 0].tolist() == [True, True, False]


def _random_case(seed, l=30, c=3, d=8, n_pad=5):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(l, d))
    E[:n_pad] = 0
    mask = np.arange(l) >= n_pad
    O = gram_schmidt_oracle(rng.normal(size=(c, d)))
    A = score(E, O).data
    return E, O, A, mask


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_routing_exclusive_and_filter_subset(seed):
    E, O, A, mask = _random_case(seed)
    phi = route(A, mask)
    assert np.all(phi.sum(axis=1) == mask.astype(int))
    gamma = filter_channels(A, phi, 20, mask)
    assert np.all(~gamma | phi)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1, 100), st.floats(1, 100))
def test_filter_monotone_in_percent(seed, p1, p2):
    p1, p2 = min(p1, p2), max(p1, p2)
    E, O, A, mask = _random_case(seed)
    phi = route(A, mask)
    assert np.all(~filter_channels(A, phi, p1, mask) | filter_channels(A, phi, p2, mask))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_covariance(seed):
    E, O, A, mask = _random_case(seed, n_pad=0)
    perm = np.random.default_rng(seed + 1).permutation(len(E))
    phi, phi_p = route(A, mask), route(A[perm], mask[perm])
    gamma = filter_channels(A, phi, 20, mask)
    gamma_p = filter_channels(A[perm], phi_p, 20, mask[perm])
    assert np.array_equal(phi[perm], phi_p) and np.array_equal(gamma[perm], gamma_p)
    np.testing.assert_allclose(aggregate(E, gamma).data, aggregate(E[perm], gamma_p).data,
                               atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_positive_scaling_keeps_selection(seed, scale):
    E, O, A, mask = _random_case(seed)
    A2 = score(E * scale, O).data
    phi, phi2 = route(A, mask), route(A2, mask)
    assert np.array_equal(phi, phi2)
    assert np.array_equal(filter_channels(A, phi, 20, mask), filter_channels(A2, phi2, 20, mask))


# -- aggregation -----------------------------------------------------------------


def test_aggregate_singletons_and_empty():
    E = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    gamma = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=bool)
    np.testing.assert_array_equal(aggregate(E, gamma).data, [[1, 2], [3, 4], [0, 0]])


def test_aggregate_mean():
    E = np.array([[1.0, 1.0], [3.0, 3.0]])
    np.testing.assert_array_equal(aggregate(E, np.array([[1], [1]], bool)).data, [[2, 2]])


def test_similarity_filter_keeps_most_similar():
    E = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.5, 0.5]])
    mask = np.array([False, True, True, True, True])
    r, selected = similarity_filter(E, np.array([1.0, 0.0]), 50, mask)
    assert selected.tolist() == [False, True, False, True, False]
    np.testing.assert_array_equal(r.data, [[1.5, 0.0]])


def test_module_output_shapes_and_invariants():
    rng = np.random.default_rng(7)
    omie = OMIE(8, 4, nx.Rng(0))
    E = rng.normal(size=(3, 20, 8))
    mask = np.ones((3, 20), bool)
    mask[:, :4] = False
    E[~mask] = 0
    out = omie(E, rng.normal(size=(3, 8)), mask)
    assert out.O.shape == (3, 4, 8) and out.r.shape == (3, 4, 8)
    assert ortho_error(out.O.data) < 1e-12
    assert np.all(out.phi.sum(-1) == mask)
