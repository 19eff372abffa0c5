"""Training objectives with hand-derived gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class LossError(ValueError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


class CrossEntropyResult(NamedTuple):
    loss: float
    grad_logits: list
    clamped: bool


def masked_cross_entropy(tokens, mask, probs: Sequence[np.ndarray],
                         all_positions: bool = False) -> CrossEntropyResult:
    """Masked token cross-entropy summed over stages, averaged over positions.

    ``tokens`` is ``(..., T, M)``, ``mask`` is ``(..., T)`` and ``probs[m]``
    is ``(..., T, K_m)``.  Leading batch axes are flattened into positions.
    The gradient is with respect to the pre-softmax logits.  With
    ``all_positions`` the mask is ignored and every position counts.
    """
    y = np.asarray(tokens)
    msk = np.asarray(mask, dtype=bool)
    if y.shape[:-1] != msk.shape or y.shape[-1] != len(probs):
        raise LossError(f"tokens {y.shape}, mask {msk.shape} and {len(probs)} prob blocks disagree")
    if all_positions:
        msk = np.ones_like(msk)
    y = y.reshape(-1, y.shape[-1])
    msk = msk.reshape(-1)
    n_pos = int(msk.sum())
    if n_pos == 0:
        raise LossError("cross-entropy over an empty mask is undefined")

    loss = 0.0
    clamped = False
    grads = []
    for m, p in enumerate(probs):
        p = np.asarray(p, dtype=np.float64)
        shape = p.shape
        p = p.reshape(-1, shape[-1])
        if p.shape[0] != y.shape[0]:
            raise LossError(f"stage {m + 1} predictions have {p.shape[0]} positions, expected {y.shape[0]}")
        col = y[:, m]
        if np.any(col < 0) or np.any(col >= p.shape[1]):
            raise LossError(f"target token out of range for stage {m + 1}")
        rows = np.flatnonzero(msk)
        picked = p[rows, col[rows]]
        if np.any(picked < PROB_FLOOR):
            clamped = True
        loss -= np.log(np.maximum(picked, PROB_FLOOR)).sum()
        g = np.zeros_like(p)
        g[rows] = p[rows]
        g[rows, col[rows]] -= 1.0
        grads.append((g / n_pos).reshape(shape))
    return CrossEntropyResult(loss / n_pos, grads, clamped)


def codebook_loss(z, q, beta: float = 0.25) -> tuple:
    """Codebook plus commitment loss with stop-gradient semantics.

    Returns ``(loss, dz, dq)``: ``dz`` only carries the commitment term and
    ``dq`` only the codebook term.
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if z.shape != q.shape:
        raise LossError(f"shape mismatch {z.shape} vs {q.shape}")
    if beta < 0:
        raise LossError("beta must be non-negative")
    diff = z - q
    n = diff.reshape(-1, diff.shape[-1]).shape[0]
    sq = float((diff * diff).sum())
    loss = (1.0 + beta) * sq / n
    return loss, (2.0 * beta / n) * diff, (-2.0 / n) * diff


def cosine_alignment_loss(estimates, z) -> tuple:
    """``1 - sum(est_t . z_t) / sum(|est_t| |z_t|)`` over one sequence.

    Returns ``(loss, d_estimates, d_z)``.
    """
    a = np.asarray(estimates, dtype=np.float64)
    b = np.asarray(z, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise LossError(f"expected matching T x D arrays, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise LossError("cosine alignment is undefined for zero vectors")
    num = float((a * b).sum())
    den = float((na * nb).sum())
    loss = 1.0 - num / den
    da = -(b * den - num * (nb / na)[:, None] * a) / den ** 2
    db = -(a * den - num * (na / nb)[:, None] * b) / den ** 2
    return loss, da, db


def tokenizer_loss(cb_loss: float, cos_loss: float, lambda_cos: float = 1.0) -> float:
    if lambda_cos < 0:
        raise LossError("lambda_cos must be non-negative")
    return cb_loss + lambda_cos * cos_loss


def joint_loss(encoder_loss: float, tok_loss: float, alpha: float = 0.5) -> float:
    if alpha < 0:
        raise LossError("alpha must be non-negative")
    return encoder_loss + alpha * tok_loss


def straight_through(z, q) -> np.ndarray:
    """Forward value of the straight-through estimator: ``q``."""
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if z.shape != q.shape:
        raise LossError(f"shape mismatch {z.shape} vs {q.shape}")
    return q.copy()


def straight_through_backward(grad) -> tuple:
    """Split a downstream gradient into ``(grad_z, grad_q)``: all of it goes to ``z``."""
    g = np.asarray(grad, dtype=np.float64)
    return g.copy(), np.zeros_like(g)


@dataclass
class LossReport:
    encoder_loss: float = 0.0
    cb_loss: float = 0.0
    cos_loss: float = 0.0
    beta: float = 0.25
    lambda_cos: float = 1.0
    alpha: float = 0.5

    @property
    def tokenizer_loss(self) -> float:
        return tokenizer_loss(self.cb_loss, self.cos_loss, self.lambda_cos)

    @property
    def joint_loss(self) -> float:
        return joint_loss(self.encoder_loss, self.tokenizer_loss, self.alpha)

    def as_dict(self) -> dict:
        return {
            "encoder_loss": self.encoder_loss,
            "cb_loss": self.cb_loss,
            "cos_loss": self.cos_loss,
            "tokenizer_loss": self.tokenizer_loss,
            "joint_loss": self.joint_loss,
            "beta": self.beta,
            "lambda_cos": self.lambda_cos,
            "alpha": self.alpha,
        }
