"""Instance-wise adversarial vulnerability and rank-based weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .awp import WeightPerturbation, apply
from .model import ModelParams, loss

WEIGHT_SCHEMES = ("linear", "unweighted", "top10")
AV_FIELDS = ("av_sd", "av_top10", "av_bot10", "frac_ge_1", "frac_le_0")


def av(params: ModelParams, x, y, delta) -> np.ndarray:
    """Loss increase caused by ``delta``: L(x + delta) - L(x)."""
    x = np.asarray(x, dtype=params.dtype)
    return loss(params, x + delta, y) - loss(params, x, y)


def av_joint(params: ModelParams, x, y, delta, v: WeightPerturbation) -> np.ndarray:
    """L(x + delta; theta + v) - L(x; theta)."""
    x = np.asarray(x, dtype=params.dtype)
    return loss(apply(params, v), x + delta, y) - loss(params, x, y)


@dataclass
class AVStats:
    sd: float
    top10_mean: float
    bot10_mean: float
    frac_ge_1: float
    frac_le_0: float

    def as_row(self) -> dict[str, float]:
        return dict(zip(AV_FIELDS, (self.sd, self.top10_mean, self.bot10_mean, self.frac_ge_1, self.frac_le_0)))


def tail_count(n: int) -> int:
    """ceil(10% of n), computed in integers."""
    return max(1, (n + 9) // 10)


def av_stats(avs) -> AVStats:
    a = np.asarray(avs, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("need at least one vulnerability value")
    k = tail_count(a.size)
    s = np.sort(a)
    return AVStats(
        sd=float(np.std(a)),
        top10_mean=float(s[-k:].mean()),
        bot10_mean=float(s[:k].mean()),
        frac_ge_1=float(np.mean(a >= 1)),
        frac_le_0=float(np.mean(a <= 0)),
    )


@dataclass
class BatchVulnerability:
    av: np.ndarray
    ranks: np.ndarray
    weights: np.ndarray


def vulnerability_ranks(avs) -> np.ndarray:
    """Rank 0 for the largest value; ties go to the lower batch index."""
    a = np.asarray(avs, dtype=np.float64)
    order = np.argsort(-a, kind="stable")
    ranks = np.empty(a.size, dtype=np.int64)
    ranks[order] = np.arange(a.size)
    return ranks


def linear_weights(avs, scheme: str = "linear") -> BatchVulnerability:
    a = np.asarray(avs, dtype=np.float64).ravel()
    m = a.size
    if m < 1:
        raise ValueError("need at least one vulnerability value")
    if not np.all(np.isfinite(a)):
        raise ValueError("vulnerability values must be finite")
    ranks = vulnerability_ranks(a)
    if scheme == "linear":
        # 1 - r/m, written so the extremes are exactly 1 and 1/m
        w = (m - ranks) / m
    elif scheme == "unweighted":
        w = np.ones(m)
    elif scheme == "top10":
        w = (ranks < tail_count(m)).astype(np.float64)
    else:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    return BatchVulnerability(a, ranks, w)
