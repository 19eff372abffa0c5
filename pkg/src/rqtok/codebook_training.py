"""Codebook lifecycle: initialization, EMA updates, dead-code reset.

Two EMA recurrences live here.  :func:`ema_step` is the one used for
training.  :func:`ema_step_proof_form` folds ``eps`` into the running count
itself; its fixed point is available in closed form through
:func:`closed_form_limit`, which is what the convergence check compares
against.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .quantizer import Codebook, QuantizerError, ResidualQuantizer, l2_normalize, quantize


class InsufficientDataError(ValueError):
    pass


class BoundViolation(AssertionError):
    """An EMA iterate left its proven bound."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class DegenerateWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# initialization


def init_uniform(K: int, D: int, seed) -> Codebook:
    """Codes drawn i.i.d. from U[-1, 1]."""
    if K < 1 or D < 1:
        raise ValueError(f"codebook size must be positive, got K={K}, D={D}")
    rng = np.random.default_rng(seed)
    return Codebook(rng.uniform(-1.0, 1.0, size=(K, D)))


def _kmeans_pp_seeds(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # fewer distinct points than K: fall back to any unused index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return np.asarray(chosen)


def init_kmeans(batch, K: int, steps: int = 10, seed=None) -> Codebook:
    """Lloyd's algorithm on one batch.

    Seeds are ``K`` distinct batch points picked by D^2 sampling.  A cluster
    that goes empty is re-seeded with the point farthest from its current
    centroid.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be S x D, got shape {x.shape}")
    if x.shape[0] < K:
        raise InsufficientDataError(f"k-means needs at least K={K} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = x[_kmeans_pp_seeds(x, K, rng)].copy()
    for _ in range(steps):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            own = d2[np.arange(x.shape[0]), assign]
            order = np.argsort(-own, kind="stable")
            for k, p in zip(np.flatnonzero(~nonempty), order):
                centers[k] = x[p]
    return Codebook(centers)


def fit_rq_init(
    batch,
    sizes: Sequence[int],
    mode: str = "kmeans",
    seed=None,
    normalization: str = "input_only",
    kmeans_steps: int = 10,
) -> ResidualQuantizer:
    """Initialize every stage of a residual quantizer from one batch.

    Stage ``m`` is fit on the residuals left by stages ``1 .. m-1``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("fit_rq_init needs a non-empty S x D batch")
    if mode not in ("kmeans", "uniform"):
        raise ValueError(f"unknown init mode {mode!r}")
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    e = l2_normalize(x) if normalization == "input_only" else x.copy()
    stages = []
    for m, K in enumerate(sizes):
        if normalization == "per_stage":
            e = l2_normalize(e)
        if mode == "uniform":
            cb = init_uniform(K, x.shape[1], seeds[m])
        else:
            cb = init_kmeans(e, K, kmeans_steps, seeds[m])
        cb.stage_index = m + 1
        stages.append(cb)
        single = ResidualQuantizer([cb], normalization="none")
        e = e - quantize(e, single).quantized
    return ResidualQuantizer(stages, normalization=normalization)


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EmaState:
    counts: np.ndarray        # N_i, shape (K,)
    embed_sum: np.ndarray     # m_i, shape (K, D)
    gamma: float = 0.99
    eps: float = 1e-5
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        self.counts = np.asarray(self.counts, dtype=np.float64)
        self.embed_sum = np.asarray(self.embed_sum, dtype=np.float64)

    @classmethod
    def initial(cls, cb: Codebook, gamma: float = 0.99, eps: float = 1e-5,
                prior_count: float = 0.0) -> "EmaState":
        """Fresh accumulators: ``N = 0`` and ``m = c_0``.

        A positive ``prior_count`` warm-starts instead with ``N = prior_count``
        and ``m = prior_count * c_0``, so the first ratio ``m / N`` is ``c_0``.
        """
        K = cb.size
        if prior_count > 0:
            return cls(np.full(K, float(prior_count)), prior_count * cb.vectors, gamma, eps)
        return cls(np.zeros(K), cb.vectors.copy(), gamma, eps)

    def copy(self) -> "EmaState":
        return EmaState(self.counts.copy(), self.embed_sum.copy(), self.gamma, self.eps, self.step)


@dataclass
class BatchAssignment:
    latents: np.ndarray   # (S, D)
    codes: np.ndarray     # (S,)

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.latents.ndim != 2 or self.codes.shape != (self.latents.shape[0],):
            raise ValueError("latents must be S x D with one code per row")

    def statistics(self, K: int) -> tuple:
        """Per-code assignment counts ``n`` and latent sums ``l``."""
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= K):
            raise QuantizerError(f"assigned code outside [0, {K})")
        n = np.bincount(self.codes, minlength=K).astype(np.float64)
        ell = np.zeros((K, self.latents.shape[1]))
        np.add.at(ell, self.codes, self.latents)
        return n, ell


def laplace_smooth(N, eps: float) -> np.ndarray:
    """``(N_i + eps) * sum(N) / (sum(N) + K * eps)``; preserves the total."""
    N = np.asarray(N, dtype=np.float64)
    if np.any(N < 0):
        raise ValueError("counts must be non-negative")
    total = N.sum()
    if total == 0:
        warnings.warn("all EMA counts are zero; smoothing is degenerate", DegenerateWarning)
        return np.zeros_like(N)
    return (N + eps) * total / (total + N.shape[0] * eps)


def _check_batch(state: EmaState, cb: Codebook, batch: BatchAssignment):
    if batch.latents.shape[1] != cb.dim or state.embed_sum.shape != cb.vectors.shape:
        raise QuantizerError("EMA state, codebook and batch disagree on shape")


def ema_step(state: EmaState, cb: Codebook, batch: BatchAssignment) -> tuple:
    """One training-form EMA update; returns the new ``(state, codebook)``."""
    _check_batch(state, cb, batch)
    g = state.gamma
    n, ell = batch.statistics(cb.size)
    N = g * state.counts + (1 - g) * n
    N_hat = laplace_smooth(N, state.eps)
    if not np.all(N_hat > 0):
        raise FloatingPointError("smoothed cluster size is not positive")
    m = g * state.embed_sum + (1 - g) * ell
    new_cb = Codebook(m / N_hat[:, None], cb.stage_index)
    return EmaState(N, m, g, state.eps, state.step + 1), new_cb


def ema_step_proof_form(state: EmaState, cb: Codebook, batch: BatchAssignment) -> tuple:
    """EMA update with ``eps`` folded into the count and a ratio correction on ``c``."""
    _check_batch(state, cb, batch)
    g, eps = state.gamma, state.eps
    n, ell = batch.statistics(cb.size)
    base = g * state.counts + (1 - g) * n
    N = base + eps
    m = g * state.embed_sum + (1 - g) * ell
    total = base.sum()
    if total <= 0:
        raise FloatingPointError("EMA count total is zero; the ratio correction is undefined")
    ratio = (total + cb.size * eps) / total
    new_cb = Codebook(m / N[:, None] * ratio, cb.stage_index)
    return EmaState(N, m, g, eps, state.step + 1), new_cb


@dataclass
class ClosedFormLimit:
    N_inf: np.ndarray
    c_inf: np.ndarray
    n_inf: np.ndarray
    l_inf: np.ndarray

    @property
    def m_inf(self) -> np.ndarray:
        return self.l_inf


def closed_form_limit(n_inf, l_inf, gamma: float, eps: float) -> ClosedFormLimit:
    """Fixed point of :func:`ema_step_proof_form` under a constant stream."""
    n = np.asarray(n_inf, dtype=np.float64)
    ell = np.asarray(l_inf, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("n_inf must be non-negative")
    if eps == 0 and not np.any(n > 0):
        raise ValueError("limit undefined: no assignments and eps == 0")
    shifted = n + gamma * eps / (1 - gamma)
    N = shifted + eps
    c = ell / N[:, None] * (N.sum() / shifted.sum())
    return ClosedFormLimit(N_inf=n + eps / (1 - gamma), c_inf=c, n_inf=n, l_inf=ell)


class EmaBoundTracker:
    """Per-step checks that the EMA iterates stay inside their uniform bounds.

    The embedding bound uses the running supremum of each batch slot's norm,
    which only grows, so checking it online is sound.
    """

    def __init__(self, initial: Codebook, batch_size: int, gamma: float, eps: float,
                 proof_form: bool = True, rtol: float = 1e-12):
        self.c0_norm = np.linalg.norm(initial.vectors, axis=1)
        self.sup_z = np.zeros(batch_size)
        self.count_bound = batch_size + (eps / (1 - gamma) if proof_form else 0.0)
        self.rtol = rtol

    def observe(self, batch: BatchAssignment):
        self.sup_z = np.maximum(self.sup_z, np.linalg.norm(batch.latents, axis=1))

    def check(self, state: EmaState):
        m_bound = self.c0_norm + self.sup_z.sum()
        m_norm = np.linalg.norm(state.embed_sum, axis=1)
        bad = np.flatnonzero(m_norm > m_bound * (1 + self.rtol))
        if bad.size:
            i = int(bad[0])
            raise BoundViolation(f"|m_{i}| = {m_norm[i]!r} exceeds {m_bound[i]!r}", state.step)
        if np.any(state.counts < 0) or np.any(state.counts > self.count_bound * (1 + self.rtol)):
            raise BoundViolation(
                f"count {state.counts.max()!r} outside [0, {self.count_bound!r}]", state.step
            )


# ---------------------------------------------------------------------------
# dead-code reset


def reset_unused(cb: Codebook, usage_counts, latents, threshold: float = 1, seed=None,
                 state: Optional[EmaState] = None, prior_count: float = 0.0):
    """Replace every code used fewer than ``threshold`` times with a batch latent.

    Replacement latents are sampled uniformly, without replacement while the
    batch has enough rows.  Returns ``(codebook, mask)``, or
    ``(codebook, mask, state)`` when an EMA state is given; reset entries of
    the state restart from ``N = prior_count`` and the new code.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("reset_unused needs a non-empty S x D latent batch")
    counts = np.asarray(usage_counts, dtype=np.float64)
    mask = counts < threshold
    new = cb.copy()
    k = int(mask.sum())
    if k:
        rng = np.random.default_rng(seed)
        rows = rng.choice(z.shape[0], size=k, replace=k > z.shape[0])
        new.vectors[mask] = z[rows]
    if state is None:
        return new, mask
    st = state.copy()
    if k:
        if prior_count > 0:
            st.counts[mask] = prior_count
            st.embed_sum[mask] = prior_count * new.vectors[mask]
        else:
            st.counts[mask] = 0.0
            st.embed_sum[mask] = new.vectors[mask]
    return new, mask, st
