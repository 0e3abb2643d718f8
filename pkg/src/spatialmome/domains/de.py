"""Differential expression between two spot groups, BH correction, and the ORA primitive."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc
from scipy.stats import rankdata

from ..fileio import csv_text

EXACT_MAX = 8  # exact null distribution when the smaller group is at most this size


@dataclass
class DEResult:
    genes: list[str]
    stat: np.ndarray  # Mann-Whitney U of group A
    p: np.ndarray
    q: np.ndarray
    direction: list[str]  # "up" when A tends higher, "down" when lower, "none" at the null centre

    def to_csv(self) -> str:
        rows = zip(self.genes, self.stat, self.p, self.q, self.direction)
        return csv_text(["gene", "stat", "p", "q", "direction"], rows)


def _exact_two_sided(ranks2: np.ndarray, m: int, observed2: int) -> float:
    """Two-sided permutation p for the sum of ``m`` of the doubled midranks ``ranks2``."""
    top = int(np.sort(ranks2)[-m:].sum())
    # dp[j, s]: number of size-j subsets with doubled rank sum s
    dp = np.zeros((m + 1, top + 1))
    dp[0, 0] = 1.0
    for r in ranks2.astype(np.int64):
        if r <= top:
            dp[1:, r:] += dp[:-1, :top + 1 - r].copy()
    dist = dp[m]
    dist = dist / dist.sum()
    lower = dist[:observed2 + 1].sum()
    upper = dist[observed2:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def rank_sum_test(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(U of ``a``, two-sided p) with midranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both groups need at least one value")
    allv = np.concatenate([a, b])
    ranks = rankdata(allv)  # midranks
    ra = ranks[:na].sum()
    u = ra - na * (na + 1) / 2.0
    if min(na, nb) <= EXACT_MAX:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        if na <= nb:
            return float(u), _exact_two_sided(ranks2, na, int(ranks2[:na].sum()))
        return float(u), _exact_two_sided(ranks2, nb, int(ranks2[na:].sum()))
    n = na + nb
    _, tcounts = np.unique(allv, return_counts=True)
    tie = (tcounts ** 3 - tcounts).sum() / (n * (n - 1))
    var = na * nb / 12.0 * ((n + 1) - tie)
    if var <= 0:
        return float(u), 1.0
    z = max(abs(u - na * nb / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return float(u), float(min(1.0, erfc(z / math.sqrt(2.0))))


def bh_adjust(p: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up q-values, in the input order."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    # p * m / rank can round one ulp below p when rank == m
    q[order] = np.clip(np.maximum(q_sorted, p[order]), None, 1.0)
    return q


def wilcoxon_de(A: np.ndarray, B: np.ndarray, genes: Sequence[str] | None = None) -> DEResult:
    """Per-gene rank-sum test of spots in ``A`` (n_a x genes) against ``B`` (n_b x genes)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("a group is empty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"gene count mismatch: {A.shape[1]} vs {B.shape[1]}")
    G = A.shape[1]
    genes = list(genes) if genes is not None else [str(g) for g in range(G)]
    if len(genes) != G:
        raise ValueError("gene names do not match matrix width")
    stat, p, direction = np.empty(G), np.empty(G), []
    centre = A.shape[0] * B.shape[0] / 2.0
    for g in range(G):
        stat[g], p[g] = rank_sum_test(A[:, g], B[:, g])
        direction.append("up" if stat[g] > centre else "down" if stat[g] < centre else "none")
    return DEResult(genes, stat, p, bh_adjust(p), direction)


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def ora_hypergeom(hits: int, set_size: int, draw_size: int, universe: int) -> float:
    """P[X >= hits] for X ~ Hypergeometric(universe, set_size, draw_size)."""
    for name, v in (("hits", hits), ("set_size", set_size), ("draw_size", draw_size), ("universe", universe)):
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a non-negative integer")
    if set_size > universe or draw_size > universe or hits > min(set_size, draw_size):
        raise ValueError("inconsistent counts")
    lo = max(hits, draw_size - (universe - set_size))
    hi = min(set_size, draw_size)
    if hits <= max(0, draw_size - (universe - set_size)):
        return 1.0
    denom = _log_comb(universe, draw_size)
    terms = np.array([_log_comb(set_size, x) + _log_comb(universe - set_size, draw_size - x) - denom
                      for x in range(lo, hi + 1)])
    mx = terms.max()
    return float(min(1.0, math.exp(mx) * np.exp(terms - mx).sum()))
