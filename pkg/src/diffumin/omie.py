"""Orthogonal multi-interest extraction.

The projected target is split into ``c`` rows and orthonormalized into
interest channels; each behavior is routed to its best channel, each
channel keeps its top-scoring behaviors, and the survivors are
mean-pooled into one aggregated interest per channel.

All functions accept leading batch axes: ``E`` is ``(..., l, d)``,
channels are ``(..., c, d)`` and scores ``(..., l, c)``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError

RESCUE_NORM = 1e-8


def project_target(e_s, W, c):
    """e_s W reshaped row-major into ``c`` rows of width d."""
    e_s = nx.as_tensor(e_s)
    d = e_s.shape[-1]
    flat = nx.matmul(nx.reshape(e_s, e_s.shape[:-1] + (1, d)), W)
    return nx.reshape(flat, e_s.shape[:-1] + (c, W.shape[-1] // c))


def _rescue_vector(accepted, d):
    # first canonical axis with a usable component outside span(accepted)
    for k in range(d):
        v = np.zeros(d)
        v[k] = 1.0
        for q in accepted:
            v = v - (v @ q) * q
        n = np.linalg.norm(v)
        if n >= 0.5 / math.sqrt(d):
            return v / n
    raise AssertionError("no rescue direction; more rows than dimensions")


def orthogonalize(S):
    """Modified Gram–Schmidt over the rows of ``S`` (..., c, d).

    A row whose residual norm drops below 1e-8 is replaced by the first
    canonical direction orthogonal to the rows already accepted; that
    replacement is a constant and carries no gradient.
    """
    S = nx.as_tensor(S)
    c, d = S.shape[-2], S.shape[-1]
    if c > d:
        raise ConfigError(f"cannot orthogonalize {c} channels in dimension {d}")
    lead = S.shape[:-2]
    rows = []
    for j in range(c):
        v = S[..., j, :]
        for q in rows:
            v = v - nx.sum_(v * q, axis=-1, keepdims=True) * q
        sq = nx.maximum(nx.sum_(v * v, axis=-1, keepdims=True), 1e-32)
        norm = nx.sqrt(sq)
        degenerate = nx.freeze(norm.data[..., 0] < RESCUE_NORM)
        q = v / nx.maximum(norm, RESCUE_NORM)
        if np.any(degenerate):
            rescue = np.zeros(lead + (d,))
            flat_deg = degenerate.reshape(-1)
            flat_rescue = rescue.reshape(-1, d)
            accepted = [r.data.reshape(-1, d) for r in rows]
            for b in np.flatnonzero(flat_deg):
                flat_rescue[b] = _rescue_vector([a[b] for a in accepted], d)
            keep = (~degenerate)[..., None].astype(float)
            q = q * keep + nx.freeze(rescue)
        rows.append(q)
    return nx.stack(rows, axis=-2)


def score(E, O):
    """Relevance of every behavior to every channel: A = E Oᵀ."""
    return nx.matmul(E, nx.swap_last(O))


def route(A, mask):
    """Top-1 routing: one channel per real behavior, lowest index on ties."""
    A = np.asarray(A.data if isinstance(A, nx.Tensor) else A)
    mask = np.asarray(mask, dtype=bool)
    best = A.argmax(axis=-1)
    phi = np.zeros(A.shape, dtype=bool)
    np.put_along_axis(phi, best[..., None], True, axis=-1)
    return phi & mask[..., None]


def keep_count(n_valid, p=None, mode="top_p", top_k=None):
    n_valid = np.asarray(n_valid)
    if mode == "top_p":
        if not 0 < p <= 100:
            raise ConfigError(f"top_p_percent must lie in (0, 100], got {p}")
        return np.maximum(1, np.floor(p * n_valid / 100.0 + 1e-9).astype(np.int64))
    if mode == "top_k":
        if top_k is None or top_k < 1:
            raise ConfigError(f"top_k_count must be a positive integer, got {top_k}")
        return np.minimum(int(top_k), np.maximum(n_valid, 1))
    raise ConfigError(f"unknown filter_mode {mode!r}")


def _descending_ranks(values, valid, axis):
    # rank 0 = largest; ties go to the smaller row index; invalid rows last
    key = np.where(valid, values, -np.inf)
    order = np.argsort(-key, axis=axis, kind="stable")
    ranks = np.empty_like(order)
    shape = [1] * order.ndim
    shape[axis] = order.shape[axis]
    np.put_along_axis(ranks, order, np.arange(order.shape[axis]).reshape(shape), axis=axis)
    return ranks


def filter_channels(A, phi, p, mask, mode="top_p", top_k=None):
    """Γ: routed behaviors that rank within the top of their channel column.

    The ranking population of each column is the non-padded behaviors;
    ``m = max(1, floor(p/100 · n))`` of them survive (``top_k`` mode keeps
    a fixed count instead).
    """
    A = np.asarray(A.data if isinstance(A, nx.Tensor) else A)
    mask = np.asarray(mask, dtype=bool)
    m = keep_count(mask.sum(axis=-1), p, mode, top_k)
    ranks = _descending_ranks(A, mask[..., None], axis=-2)
    return phi & (ranks < m[..., None, None]) & mask[..., None]


def aggregate(E, gamma):
    """Mean of the selected behavior rows per channel (zero when empty)."""
    gamma = np.asarray(gamma, dtype=float)
    counts = gamma.sum(axis=-2)
    weights = np.swapaxes(gamma, -1, -2) / np.maximum(counts, 1.0)[..., None]
    return nx.matmul(nx.freeze(weights), E)


def similarity_filter(E, e_s, p, mask):
    """Single-interest baseline: mean of the top-p% behaviors by ⟨e_i, e_s⟩.

    Returns ``(r, selected)`` with ``r`` shaped (..., 1, d).
    """
    mask = np.asarray(mask, dtype=bool)
    sim = np.einsum("...ld,...d->...l", E.data, nx.as_tensor(e_s).data)
    m = keep_count(mask.sum(axis=-1), p)
    ranks = _descending_ranks(sim, mask, axis=-1)
    selected = nx.freeze((ranks < m[..., None]) & mask)
    return aggregate(E, selected[..., None]), selected


@dataclass
class OmieOutput:
    O: nx.Tensor  # (..., c, d)
    A: nx.Tensor  # (..., l, c)
    phi: np.ndarray
    gamma: np.ndarray
    r: nx.Tensor  # (..., c, d)


class OMIE(nx.Module):
    def __init__(self, d, c, rng, top_p_percent=20.0, filter_mode="top_p", top_k_count=None):
        if c > d:
            raise ConfigError(f"channels c={c} exceed embedding dimension d={d}")
        keep_count(np.array([1]), top_p_percent, filter_mode, top_k_count)
        self.c = c
        self.top_p = top_p_percent
        self.filter_mode = filter_mode
        self.top_k = top_k_count
        self.W = nx.Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (d, c * d)), name="omie.W")

    def channels(self, e_s):
        return orthogonalize(project_target(e_s, self.W, self.c))

    def __call__(self, E, e_s, mask):
        O = self.channels(e_s)
        A = score(E, O)
        phi = nx.freeze(route(A, mask))
        gamma = nx.freeze(filter_channels(A, phi, self.top_p, mask, self.filter_mode, self.top_k))
        return OmieOutput(O, A, phi, gamma, aggregate(E, gamma))
