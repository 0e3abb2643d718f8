from __future__ import annotations

import warnings

import numpy as np

from .types import GenePanel, PanelRegistry, SlideDataset


def normalize_expression(counts: np.ndarray, scale: float = 1e4, return_kept: bool = False):
    """ln(1 + scale * count / library_size) per spot.

    Spots with an empty library are dropped with a warning; pass
    ``return_kept=True`` to also get the surviving row indices.
    """
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    lib = counts.sum(axis=1, dtype=np.float64)
    kept = np.flatnonzero(lib > 0)
    if len(kept) < len(lib):
        warnings.warn(f"dropping {len(lib) - len(kept)} spot(s) with zero library size", stacklevel=2)
    out = np.log1p(scale * counts[kept].astype(np.float64) / lib[kept, None])
    return (out, kept) if return_kept else out


def select_hvg(normalized: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-variance genes, descending; ties go to the lower index."""
    x = np.asarray(normalized, dtype=np.float64)
    nonconstant = x.max(axis=0) > x.min(axis=0)
    available = int(nonconstant.sum())
    if not 1 <= k <= available:
        raise ValueError(f"k={k} but only {available} non-constant genes are available")
    var = x.var(axis=0)
    idx = np.flatnonzero(nonconstant)
    order = np.lexsort((idx, -var[idx]))
    return idx[order[:k]]


def panel_union(registry: PanelRegistry) -> tuple[GenePanel, dict[str, np.ndarray]]:
    """Lexicographic union of all panels plus a presence mask per panel."""
    if not registry.panels:
        raise ValueError("panel registry is empty")
    genes = sorted({g for p in registry.panels for g in p.genes})
    union = GenePanel("union", tuple(genes))
    masks = {}
    for p in registry.panels:
        have = set(p.genes)
        masks[p.panel_id] = np.array([g in have for g in genes], dtype=bool)
    return union, masks


def union_expression(dataset: SlideDataset, union: GenePanel, scale: float = 1e4):
    """Normalised expression of ``dataset`` laid out over ``union``.

    Returns ``(matrix, mask, kept)``: absent genes are zero in ``matrix`` and
    False in the presence ``mask``; ``kept`` are the surviving spot indices.
    """
    norm, kept = normalize_expression(dataset.counts(), scale=scale, return_kept=True)
    where = union.index()
    cols = np.array([where[g] for g in dataset.panel.genes], dtype=np.int64)
    out = np.zeros((norm.shape[0], len(union)))
    out[:, cols] = norm
    mask = np.zeros(len(union), dtype=bool)
    mask[cols] = True
    return out, mask, kept
