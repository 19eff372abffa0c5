"""Code usage statistics: usage rate, usage entropy, effective code usage."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class UsageStats:
    stage_index: int
    counts: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 1 or self.counts.size < 1:
            raise MetricsError("counts must be a non-empty vector")
        if np.any(self.counts < 0):
            raise MetricsError("counts must be non-negative")

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self):
        return self.counts.sum()


def usage_histogram(tokens, sizes: Sequence[int]) -> list:
    """Per-stage occurrence counts of each code index in a ``(..., M)`` token grid."""
    t = np.asarray(tokens, dtype=np.int64)
    if t.size == 0:
        t = t.reshape(0, len(sizes))
    t = t.reshape(-1, t.shape[-1])
    if t.shape[1] != len(sizes):
        raise MetricsError(f"grid has {t.shape[1]} stages, expected {len(sizes)}")
    out = []
    for m, K in enumerate(sizes):
        col = t[:, m]
        if col.size and (col.min() < 0 or col.max() >= K):
            raise MetricsError(f"token out of range for stage {m + 1} (K={K})")
        out.append(UsageStats(m + 1, np.bincount(col, minlength=K), degenerate=col.size == 0))
    return out


def cur(stats: UsageStats) -> float:
    return int(np.count_nonzero(stats.counts > 0)) / stats.size


def usage_entropy(stats: UsageStats) -> float:
    """Shannon entropy (nats) of the usage distribution.

    Codes sharing a count are grouped, so the value depends only on the
    multiset of counts and a uniform histogram yields ``log(K)`` exactly.
    """
    total = float(stats.total)
    if total <= 0:
        raise MetricsError("usage entropy is undefined for an empty histogram")
    values, mult = np.unique(stats.counts[stats.counts > 0], return_counts=True)
    ue = 0.0
    for v, k in zip(values.tolist(), mult.tolist()):
        ue += (k * v / total) * math.log(total / v)
    return ue


def ecu(cur_val: float, ue_val: float, K: int) -> float:
    if K < 2:
        raise MetricsError("ECU needs K >= 2")
    return float(cur_val * ue_val / math.log(K))


@dataclass
class StageMetrics:
    stage: int
    cur: float
    ue: float
    ecu: float


def stage_metrics(stats: UsageStats) -> StageMetrics:
    c = cur(stats)
    if stats.total <= 0:
        warnings.warn(f"stage {stats.stage_index} has no usage", RuntimeWarning)
        return StageMetrics(stats.stage_index, c, 0.0, 0.0)
    u = usage_entropy(stats)
    return StageMetrics(stats.stage_index, c, u, ecu(c, u, stats.size))


def metrics_report(tokens, sizes: Sequence[int], provenance: str = "post_training") -> dict:
    """Serializable per-stage CUR/UE/ECU for a token grid."""
    stages = [asdict(stage_metrics(s)) for s in usage_histogram(tokens, sizes)]
    return {"provenance": provenance, "stages": stages}


def usage_from_ema(state, stage_index: int = 1) -> UsageStats:
    """Usage profile taken from smoothed EMA cluster sizes instead of raw counts."""
    from .codebook_training import laplace_smooth

    return UsageStats(stage_index, laplace_smooth(state.counts, state.eps))
