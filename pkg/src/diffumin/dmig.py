"""Conditional diffusion over aggregated interests.

A small Transformer-style noise predictor sees the noisy interest next to
the user's other aggregated interests (self-attention) and the matching
interest channel (cross-attention). Training draws one noise level per
(example, interest); sampling starts from a perturbed copy of the real
interest and runs ``T'`` reverse steps.

Batched layout: interests ``r`` and channels ``O`` are ``(B, c, d)`` numpy
arrays that have already been cut off from the tape; each method takes one
``Rng`` per example so results do not depend on batch composition.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # beta[t - 1] is β_t
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_step(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ConfigError(f"diffusion step out of range 1..{self.T}: {t.min()}..{t.max()}")


def build_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Linear variance schedule from ``beta_start`` to ``beta_end``."""
    if T < 2:
        raise ConfigError(f"diffusion needs T >= 2, got {T}")
    beta = beta_start + np.arange(T) / (T - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha), np.sqrt(beta))


def q_sample(r0, t, eps, schedule):
    """Closed-form forward noising: √ᾱ_t r0 + √(1 − ᾱ_t) ε.

    ``t`` may be an array broadcasting against the leading axes of ``r0``.
    """
    schedule.check_step(t)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    ab = np.asarray(ab)[..., None]
    return np.sqrt(ab) * np.asarray(r0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def timestep_features(t, d):
    t = np.asarray(t, dtype=float)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[..., None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if d % 2:
        feats = np.concatenate([feats, np.zeros(t.shape + (1,))], axis=-1)
    return feats


class DenoiserLayer(nx.Module):
    def __init__(self, d, d_f, rng):
        s = 1.0 / math.sqrt(d)
        self.ln_self = nx.LayerNorm(d)
        self.q_self = nx.Linear(d, d, rng, bias=False, scale=s)
        self.k_self = nx.Linear(d, d, rng, bias=False, scale=s)
        self.v_self = nx.Linear(d, d, rng, bias=False, scale=s)
        self.o_self = nx.Linear(d, d, rng, bias=False, scale=s)
        self.ln_cross = nx.LayerNorm(d)
        self.q_cross = nx.Linear(d, d, rng, bias=False, scale=s)
        self.k_cross = nx.Linear(d, d, rng, bias=False, scale=s)
        self.v_cross = nx.Linear(d, d, rng, bias=False, scale=s)
        self.o_cross = nx.Linear(d, d, rng, bias=False, scale=s)
        self.ln_ffn = nx.LayerNorm(d)
        self.ffn_in = nx.Linear(d, d_f, rng)
        self.ffn_out = nx.Linear(d_f, d, rng)

    def __call__(self, h, temb, g2):
        h = h + nx.reshape(temb, temb.shape[:-1] + (1, temb.shape[-1]))
        a = self.ln_self(h)
        h = h + self.o_self(nx.scaled_dot_attention(self.q_self(a), self.k_self(a), self.v_self(a)))
        if g2 is not None:
            a = self.ln_cross(h)
            kv = nx.reshape(g2, g2.shape[:-1] + (1, g2.shape[-1]))
            h = h + self.o_cross(
                nx.scaled_dot_attention(self.q_cross(a), self.k_cross(kv), self.v_cross(kv)))
        a = self.ln_ffn(h)
        return h + self.ffn_out(nx.gelu(self.ffn_in(a)))


class Denoiser(nx.Module):
    """ε_θ(R, t, g₂): predicted noise for one designated row of ``R``."""

    def __init__(self, d, rng, layers=1, ffn_width=32):
        self.d = d
        self.time = nx.Linear(d, d, rng)
        self.layers = [DenoiserLayer(d, ffn_width, rng) for _ in range(layers)]
        self.out = nx.Linear(d, d, rng)

    def __call__(self, R, t, g2, row):
        """R: (N, rows, d); t: (N,); g2: (N, d) or None; row: (N,) index."""
        R = nx.as_tensor(R)
        if R.shape[-1] != self.d:
            raise DimensionError(f"denoiser expects width {self.d}, got input {R.shape}")
        temb = self.time(timestep_features(t, self.d))
        h = R
        for layer in self.layers:
            h = layer(h, temb, g2)
        h = self.out(h)
        return nx.index(h, (np.arange(R.shape[0]), np.asarray(row)))


def guidance_rows(r, noisy, use_context):
    """Stack one denoiser input per (example, interest).

    With context, row i of ``r`` is swapped for ``noisy[:, i]`` and the
    other rows are g₁; without it the input is the noisy row alone.
    Returns ``(R, row)`` with R shaped (B·c, rows, d).
    """
    B, c, d = r.shape
    if not use_context:
        return noisy.reshape(B * c, 1, d), np.zeros(B * c, dtype=np.int64)
    R = np.repeat(r[:, None], c, axis=1)
    ar = np.arange(c)
    R[:, ar, ar, :] = noisy
    return R.reshape(B * c, c, d), np.tile(ar, B)


PURPOSE_LOSS = 1
PURPOSE_SAMPLE = 2


class DMIG(nx.Module):
    def __init__(self, d, rng, T=1000, T_prime=20, denoiser_layers=1, ffn_width=32,
                 beta_start=1e-4, beta_end=0.02, use_context=True, use_channel=True,
                 start_from_noise=False):
        self.schedule = build_schedule(T, beta_start, beta_end)
        if not 1 <= T_prime <= T:
            raise ConfigError(f"T_prime must lie in 1..{T}, got {T_prime}")
        self.T_prime = T_prime
        self.use_context = use_context
        self.use_channel = use_channel
        self.start_from_noise = start_from_noise
        self.denoiser = Denoiser(d, rng, denoiser_layers, ffn_width)
        self.loss_calls = 0
        self.sample_calls = 0

    def predict_noise(self, r, noisy, O, t):
        """ε̂ for every (example, interest): noisy (B, c, d), t (B, c)."""
        B, c, d = r.shape
        R, row = guidance_rows(r, noisy, self.use_context)
        g2 = O.reshape(B * c, d) if self.use_channel else None
        eps = self.denoiser(R, np.asarray(t).reshape(-1), g2, row)
        return nx.reshape(eps, (B, c, d))

    def diffusion_loss(self, r, O, rngs):
        """Mean over examples of (1/c) Σ_i ‖ε − ε̂‖²."""
        self.loss_calls += 1
        r, O, rngs = _batched(r, O, rngs)
        B, c, d = r.shape
        T = self.schedule.T
        t = np.empty((B, c), dtype=np.int64)
        eps = np.empty((B, c, d))
        for b, rng in enumerate(rngs):
            t[b] = rng.integers(1, T + 1, size=c)
            eps[b] = rng.standard_normal((c, d))
        t = nx.freeze(t)
        eps = nx.freeze(eps)
        noisy = q_sample(r, t, eps, self.schedule)
        eps_hat = self.predict_noise(r, noisy, O, t)
        err = nx.sub(eps, eps_hat)
        return nx.sum_(err * err) * (1.0 / (B * c))

    def reverse(self, start, r, O, T_prime, noise=None):
        """Run reverse updates t = T'..1 from ``start`` (B, c, d).

        ``noise[t - 1]`` supplies z at step t (ignored at t = 1); None means
        z = 0 throughout.
        """
        s = self.schedule
        x = np.array(start, dtype=float)
        B, c, _ = x.shape
        with nx.no_grad():
            for t in range(T_prime, 0, -1):
                eps_hat = self.predict_noise(r, x, O, np.full((B, c), t)).data
                x = (x - s.beta[t - 1] / math.sqrt(1.0 - s.alpha_bar[t - 1]) * eps_hat) \
                    / math.sqrt(s.alpha[t - 1])
                if t > 1 and noise is not None:
                    x = x + s.sigma[t - 1] * noise[t - 1]
        return x

    def sample(self, r, O, rngs, eval_mode, T_prime=None):
        """Augmented interests r* (B, c, d), detached from the tape.

        Training draws the perturbation level uniformly from 1..T;
        evaluation pins it to T' so scoring is reproducible.
        """
        self.sample_calls += 1
        T_prime = self.T_prime if T_prime is None else T_prime
        if not 1 <= T_prime <= self.schedule.T:
            raise ConfigError(f"T_prime must lie in 1..{self.schedule.T}, got {T_prime}")
        r, O, rngs = _batched(r, O, rngs)
        B, c, d = r.shape
        level = np.empty((B, c), dtype=np.int64)
        eps = np.empty((B, c, d))
        z = np.empty((T_prime, B, c, d))
        for b, rng in enumerate(rngs):
            level[b] = T_prime if eval_mode else rng.integers(1, self.schedule.T + 1, size=c)
            eps[b] = rng.standard_normal((c, d))
            z[:, b] = rng.standard_normal((T_prime, c, d))
        start = eps if self.start_from_noise else q_sample(r, level, eps, self.schedule)
        return nx.freeze(self.reverse(start, r, O, T_prime, z))


def _batched(r, O, rngs):
    r = np.asarray(r.data if isinstance(r, nx.Tensor) else r, dtype=float)
    O = np.asarray(O.data if isinstance(O, nx.Tensor) else O, dtype=float)
    if r.ndim == 2:
        r, O = r[None], O[None]
    if isinstance(rngs, nx.Rng):
        rngs = [rngs]
    if len(rngs) != r.shape[0]:
        raise DimensionError(f"need one rng per example: {len(rngs)} for batch {r.shape[0]}")
    if r.shape != O.shape:
        raise DimensionError(f"interests {r.shape} and channels {O.shape} differ in shape")
    return r, O, rngs
