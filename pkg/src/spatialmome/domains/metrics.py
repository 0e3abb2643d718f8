"""Label-agreement and spatial-coherence scores for a clustering.

Degenerate conventions: NMI and homogeneity are 0 when their denominator
entropy is 0; completeness is 1 when the prediction has a single cluster;
ARI is 1 when both labelings are identical partitions with no pair
variation; FMI is 0 when no pair is co-clustered.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class Contingency:
    table: np.ndarray  # rows: predicted clusters, cols: truth classes
    pred_sizes: np.ndarray
    truth_sizes: np.ndarray
    n: int
    same_same: int
    same_diff: int  # same predicted cluster, different truth class
    diff_same: int
    diff_diff: int

    @property
    def n_pairs(self) -> int:
        return self.n * (self.n - 1) // 2


def _comb2(x: np.ndarray) -> int:
    x = np.asarray(x, dtype=np.int64)
    return int((x * (x - 1) // 2).sum())


def contingency(pred, truth) -> Contingency:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label length mismatch: {pred.shape} vs {truth.shape}")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max(initial=-1) + 1, ti.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    a, b = table.sum(1), table.sum(0)
    n = int(table.sum())
    tp = _comb2(table)
    sp, st = _comb2(a), _comb2(b)
    total = n * (n - 1) // 2
    return Contingency(table, a, b, n, tp, sp - tp, st - tp, total - sp - st + tp)


def _entropy(sizes: np.ndarray, n: int) -> float:
    p = sizes[sizes > 0] / n
    return float(-(p * np.log(p)).sum())


def external_metrics(pred, truth) -> dict[str, float]:
    """NMI (arithmetic), ARI, FMI, homogeneity and completeness."""
    c = contingency(pred, truth)
    if c.n < 2:
        raise ValueError("need at least two labelled points")
    n = c.n
    h_pred = _entropy(c.pred_sizes, n)
    h_truth = _entropy(c.truth_sizes, n)
    nz = c.table > 0
    nij = c.table[nz].astype(np.float64)
    outer = np.outer(c.pred_sizes, c.truth_sizes)[nz].astype(np.float64)
    mi = float((nij / n * (np.log(nij * n) - np.log(outer))).sum())
    mi = max(mi, 0.0)
    h_truth_given_pred = max(h_truth - mi, 0.0)
    h_pred_given_truth = max(h_pred - mi, 0.0)

    mean_h = 0.5 * (h_pred + h_truth)
    nmi = mi / mean_h if mean_h > 0 else 0.0
    hom = 1.0 - h_truth_given_pred / h_truth if h_truth > 0 else 0.0
    com = 1.0 - h_pred_given_truth / h_pred if h_pred > 0 else 1.0

    tp = c.same_same
    sp, st = tp + c.same_diff, tp + c.diff_same
    # ARI scaled by 2 * n_pairs so numerator and denominator stay exact integers
    num = 2 * (tp * c.n_pairs - sp * st)
    den = (sp + st) * c.n_pairs - 2 * sp * st
    ari = num / den if den != 0 else 1.0
    fmi = tp / np.sqrt(sp * st) if tp > 0 else 0.0
    return {"NMI": float(min(nmi, 1.0)), "ARI": float(ari), "FMI": float(fmi),
            "HOM": float(min(hom, 1.0)), "COM": float(min(com, 1.0))}


def _drop_singletons(labels: np.ndarray, coords: np.ndarray, what: str):
    uniq, counts = np.unique(labels, return_counts=True)
    single = uniq[counts < 2]
    if len(single):
        warnings.warn(f"{what}: excluding {len(single)} singleton cluster(s)", stacklevel=3)
        keep = ~np.isin(labels, single)
        return labels[keep], coords[keep]
    return labels, coords


def chaos(labels, coords) -> float:
    """Mean distance to the nearest same-cluster spot, in units of the global mean NN distance."""
    labels = np.asarray(labels)
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    d_all, _ = cKDTree(coords).query(coords, k=2)
    unit = d_all[:, 1].mean()
    if unit <= 0:
        raise ValueError("all spots coincide")
    lab, xy = _drop_singletons(labels, coords, "CHAOS")
    if len(lab) == 0:
        raise ValueError("no cluster has two or more members")
    d_same = np.empty(len(lab))
    for c in np.unique(lab):
        sel = np.flatnonzero(lab == c)
        d, _ = cKDTree(xy[sel]).query(xy[sel], k=2)
        d_same[sel] = d[:, 1]
    return float(d_same.mean() / unit)


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """k nearest other spots for every spot; distance ties go to the lower index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    out = np.empty((n, k), dtype=np.int64)
    tree = cKDTree(coords)
    for i in range(n):
        q = min(n, k + 8)
        while True:
            _, j = tree.query(coords[i], k=q)
            j = np.atleast_1d(j)
            dist = np.sqrt(((coords[j] - coords[i]) ** 2).sum(1))
            keep = j != i
            j, dist = j[keep], dist[keep]
            if q == n or (len(dist) > k and dist[-1] > np.sort(dist)[k - 1]):
                break
            q = min(n, 2 * q)
        order = np.lexsort((j, dist))
        out[i] = j[order][:k]
    return out


def pas(labels, coords, k: int = 10, threshold: int = 6) -> float:
    """Fraction of spots with at least ``threshold`` of their ``k`` nearest neighbours labelled differently."""
    labels = np.asarray(labels)
    n = len(labels)
    if n <= k:
        raise ValueError(f"need more than k={k} spots, got {n}")
    nn = knn_indices(coords, k)
    differ = (labels[nn] != labels[:, None]).sum(1)
    return float((differ >= threshold).mean())


def asw(labels, X, chunk: int = 2048) -> float:
    """Mean silhouette width with Euclidean distance; singleton members score 0."""
    labels = np.asarray(labels)
    X = np.asarray(X, dtype=np.float64)
    uniq, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    n = len(X)
    sq = (X * X).sum(1)
    s = np.zeros(n)
    onehot = np.zeros((n, len(uniq)))
    onehot[np.arange(n), inv] = 1.0
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        d = np.sqrt(np.maximum(sq[sl, None] - 2.0 * X[sl] @ X.T + sq[None, :], 0.0))
        d[np.arange(sl.stop - sl.start), np.arange(sl.start, sl.stop)] = 0.0
        sums = d @ onehot  # (rows, clusters)
        own = inv[sl]
        rows = np.arange(len(own))
        size_own = counts[own]
        a = np.where(size_own > 1, sums[rows, own] / np.maximum(size_own - 1, 1), 0.0)
        other = sums / counts[None, :]
        other[rows, own] = np.inf
        b = other.min(1)
        denom = np.maximum(a, b)
        val = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        s[sl] = np.where(size_own > 1, val, 0.0)
    return float(s.mean())


def spatial_metrics(labels, coords, X, pas_k: int = 10, pas_threshold: int = 6) -> dict[str, float]:
    return {"CHAOS": chaos(labels, coords), "PAS": pas(labels, coords, pas_k, pas_threshold), "ASW": asw(labels, X)}
