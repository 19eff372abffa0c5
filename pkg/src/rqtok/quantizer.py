"""Nearest-code search and staged residual quantization.

Everything here is pure: a quantizer is treated as immutable while it is
being applied, and results depend only on the inputs.  Distances are
squared Euclidean and ties always resolve to the lowest code index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NORMALIZATION_MODES = ("none", "input_only", "per_stage")

# chunk rows so the (rows, K, D) difference tensor stays small
_CHUNK_ELEMS = 1 << 22


class QuantizerError(ValueError):
    """Invalid input to a quantization routine."""


@dataclass
class Codebook:
    """One stage's ``K x D`` matrix of code vectors."""

    vectors: np.ndarray
    stage_index: int = 1

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise QuantizerError(f"codebook must be a non-empty K x D matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise QuantizerError("codebook contains non-finite values")
        self.vectors = v

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.vectors.copy(), self.stage_index)


@dataclass
class ResidualQuantizer:
    """Ordered stack of codebooks sharing one dimension; ``M == 1`` is plain VQ."""

    stages: list
    normalization: str = "input_only"
    soft_k: int = 1

    def __post_init__(self):
        if len(self.stages) < 1:
            raise QuantizerError("a quantizer needs at least one stage")
        dims = {cb.dim for cb in self.stages}
        if len(dims) != 1:
            raise QuantizerError(f"stages disagree on dimension: {sorted(dims)}")
        idx = [cb.stage_index for cb in self.stages]
        if len(set(idx)) != len(idx):
            raise QuantizerError(f"duplicate stage indices {idx}")
        if self.normalization not in NORMALIZATION_MODES:
            raise QuantizerError(f"unknown normalization mode {self.normalization!r}")
        if not 1 <= self.soft_k <= min(self.sizes):
            raise QuantizerError(f"soft_k={self.soft_k} outside [1, {min(self.sizes)}]")

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], **kwargs) -> "ResidualQuantizer":
        return cls([Codebook(a, m + 1) for m, a in enumerate(arrays)], **kwargs)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def sizes(self) -> list:
        return [cb.size for cb in self.stages]

    def copy(self) -> "ResidualQuantizer":
        return ResidualQuantizer([cb.copy() for cb in self.stages], self.normalization, self.soft_k)

    def quantize(self, z) -> "QuantizationResult":
        return quantize(z, self)


@dataclass
class QuantizationResult:
    """Output of :func:`quantize` for a ``T x D`` latent sequence.

    ``residuals[m]`` is the vector fed to stage ``m + 1`` (after any
    normalization) and ``residuals[M]`` is what remains after the last stage.
    """

    tokens: np.ndarray
    quantized: np.ndarray
    residuals: np.ndarray
    soft_indices: Optional[np.ndarray] = None
    soft_weights: Optional[np.ndarray] = None
    stage_codes: np.ndarray = field(default=None, repr=False)

    @property
    def final_residual(self) -> np.ndarray:
        return self.residuals[-1]


def _as_vector(e, dim: int) -> np.ndarray:
    v = np.asarray(e, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != dim:
        raise QuantizerError(f"expected a vector of length {dim}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise QuantizerError("input vector contains non-finite values")
    return v


def squared_distances(points: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """``(N, K)`` matrix of ``||points[n] - codes[k]||^2`` computed by explicit differences."""
    n, d = points.shape
    rows = max(1, _CHUNK_ELEMS // max(1, codes.shape[0] * d))
    out = np.empty((n, codes.shape[0]))
    for start in range(0, n, rows):
        diff = points[start:start + rows, None, :] - codes[None, :, :]
        out[start:start + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest_code(e, cb: Codebook) -> tuple:
    """Index of the closest code to ``e`` and the squared distance achieved."""
    v = _as_vector(e, cb.dim)
    d2 = squared_distances(v[None, :], cb.vectors)[0]
    i = int(np.argmin(d2))
    return i, float(d2[i])


def quantize_stage(e, cb: Codebook) -> tuple:
    """Quantize one residual: returns ``(index, code, e - code)``."""
    v = _as_vector(e, cb.dim)
    i, _ = nearest_code(v, cb)
    code = cb.vectors[i].copy()
    return i, code, v - code


def _top_k(d2: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps lower indices first among equal distances
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


def soft_assign(e, cb: Codebook, k: int) -> tuple:
    """The ``k`` closest codes with uniform weights ``1/k``.

    The effective code is ``weights @ cb.vectors[indices]``.  ``k = 1``
    reproduces :func:`nearest_code`.
    """
    if not 1 <= k <= cb.size:
        raise QuantizerError(f"k={k} outside [1, {cb.size}]")
    v = _as_vector(e, cb.dim)
    d2 = squared_distances(v[None, :], cb.vectors)[0]
    idx = _top_k(d2, k)
    return idx, np.full(k, 1.0 / k)


def l2_normalize(x: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, floor)


def quantize(z, rq: ResidualQuantizer) -> QuantizationResult:
    """Run every stage of ``rq`` over the rows of ``z``.

    With ``soft_k == 1`` this is exactly the chain of :func:`quantize_stage`
    calls; the quantized vector is the sum of the selected codes.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != rq.dim:
        raise QuantizerError(f"latents of shape {z.shape} do not match quantizer dim {rq.dim}")
    if not np.all(np.isfinite(z)):
        raise QuantizerError("latents contain non-finite values")

    T, M, k = z.shape[0], rq.num_stages, rq.soft_k
    tokens = np.empty((T, M), dtype=np.int64)
    residuals = np.empty((M + 1, T, rq.dim))
    stage_codes = np.empty((M, T, rq.dim))
    soft_idx = np.empty((T, M, k), dtype=np.int64) if k > 1 else None

    q = np.zeros((T, rq.dim))
    e = l2_normalize(z) if rq.normalization == "input_only" else z.copy()
    for m, cb in enumerate(rq.stages):
        if rq.normalization == "per_stage":
            e = l2_normalize(e)
        residuals[m] = e
        d2 = squared_distances(e, cb.vectors)
        if k == 1:
            sel = np.argmin(d2, axis=1)
            code = cb.vectors[sel]
        else:
            top = _top_k(d2, k)
            soft_idx[:, m, :] = top
            sel = top[:, 0]
            code = cb.vectors[top].mean(axis=1)
        tokens[:, m] = sel
        stage_codes[m] = code
        q += code
        e = e - code
    residuals[M] = e

    soft_w = np.full((T, M, k), 1.0 / k) if k > 1 else None
    return QuantizationResult(
        tokens=tokens,
        quantized=q,
        residuals=residuals,
        soft_indices=soft_idx,
        soft_weights=soft_w,
        stage_codes=stage_codes,
    )


def reconstruct(tokens, rq: ResidualQuantizer) -> np.ndarray:
    """Sum of the selected codes for one token row (``M``) or a grid (``T x M``)."""
    t = np.asarray(tokens)
    single = t.ndim == 1
    t = np.atleast_2d(t)
    if t.shape[1] != rq.num_stages:
        raise QuantizerError(f"token rows need {rq.num_stages} entries, got {t.shape[1]}")
    out = np.zeros((t.shape[0], rq.dim))
    for m, cb in enumerate(rq.stages):
        col = t[:, m]
        if np.any(col < 0) or np.any(col >= cb.size):
            raise QuantizerError(f"token out of range for stage {m + 1} (K={cb.size})")
        out += cb.vectors[col]
    return out[0] if single else out
