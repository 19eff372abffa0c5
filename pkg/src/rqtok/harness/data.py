"""Synthetic hierarchical sequences and masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_samples: int = 256
    T: int = 32
    F: int = 16
    n_coarse: int = 4
    n_fine: int = 4
    coarse_scale: float = 1.0
    fine_scale: float = 1.0
    noise: float = 0.05
    # chance that a frame keeps its sequence's dominant coarse class
    stay_prob: float = 0.75
    seed: int = 0

    def __post_init__(self):
        for k in ("n_samples", "T", "F", "n_coarse", "n_fine"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.noise < 0 or not 0 <= self.stay_prob <= 1:
            raise ValueError("noise must be >= 0 and stay_prob in [0, 1]")


@dataclass
class SyntheticDataset:
    x: np.ndarray              # (N, T, F)
    coarse: np.ndarray         # (N, T) generative coarse labels
    fine: np.ndarray           # (N, T) generative fine labels
    coarse_centers: np.ndarray
    fine_offsets: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.x[idx], self.coarse[idx], self.fine[idx],
                                self.coarse_centers, self.fine_offsets)


def gen_synthetic(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Frames are ``coarse center + fine offset + noise``.

    Each sequence has a dominant coarse class that most of its frames share,
    which is what makes masked frames predictable from their context.  Fine
    offsets are centered so the coarse class means sit on the centers.
    """
    rng = np.random.default_rng(spec.seed)
    centers = spec.coarse_scale * rng.normal(size=(spec.n_coarse, spec.F))
    offsets = spec.fine_scale * rng.normal(size=(spec.n_fine, spec.F))
    offsets -= offsets.mean(axis=0)

    N, T = spec.n_samples, spec.T
    dominant = rng.integers(spec.n_coarse, size=(N, 1))
    stray = rng.integers(spec.n_coarse, size=(N, T))
    keep = rng.random((N, T)) < spec.stay_prob
    coarse = np.where(keep, dominant, stray)
    fine = rng.integers(spec.n_fine, size=(N, T))
    noise = rng.normal(size=(N, T, spec.F))
    x = centers[coarse] + offsets[fine]
    if spec.noise > 0:
        x = x + spec.noise * noise
    return SyntheticDataset(x, coarse, fine, centers, offsets)


def sample_mask(T: int, ratio: float, seed) -> np.ndarray:
    """Boolean mask with exactly ``round(ratio * T)`` masked positions, clipped to ``[1, T-1]``."""
    if T < 2:
        raise ValueError("masking needs T >= 2")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = min(max(int(round(ratio * T)), 1), T - 1)
    mask = np.zeros(T, dtype=bool)
    mask[rng.choice(T, size=n, replace=False)] = True
    return mask


def sample_masks(B: int, T: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(T, ratio, rng) for _ in range(B)])
