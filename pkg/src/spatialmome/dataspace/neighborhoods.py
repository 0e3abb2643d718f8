from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .types import Neighborhood, SlideDataset


def median_nn_distance(coords: np.ndarray) -> float:
    """Median distance from each point to its nearest other point."""
    if len(coords) < 2:
        return 1.0
    d, _ = cKDTree(coords).query(coords, k=2)
    med = float(np.median(d[:, 1]))
    return med if med > 0 else 1.0


def build_neighborhoods(slide: SlideDataset, mode: str = "grid", grid_size: int = 5,
                        k: int = 9) -> list[Neighborhood]:
    """One neighbourhood per spot, each spot the anchor of exactly one.

    ``grid``: members inside the ``grid_size`` x ``grid_size`` window around the
    anchor, truncated at tissue borders, ordered row-major by offset.
    ``knn``: the ``k`` nearest spots (anchor included) by Euclidean distance,
    ties by spot_id; relative coordinates are divided by the slide's median
    nearest-neighbour distance.
    """
    ids = slide.spot_ids
    coords = slide.coords()
    if mode == "grid":
        if slide.coordinate_mode != "grid":
            raise ValueError("grid neighbourhoods need grid coordinates")
        if grid_size < 1 or grid_size % 2 == 0:
            raise ValueError("grid_size must be a positive odd number")
        r = grid_size // 2
        where = {(int(c[0]), int(c[1])): i for i, c in enumerate(coords)}
        out = []
        for i, (row, col) in enumerate(coords.astype(np.int64)):
            members, rel = [], []
            for dr in range(-r, r + 1):
                for dc in range(-r, r + 1):
                    j = where.get((row + dr, col + dc))
                    if j is not None:
                        members.append(j)
                        rel.append((dr, dc))
            m = np.array(members, dtype=np.int64)
            out.append(Neighborhood(i, m, np.array(rel, dtype=np.float64), ids[i], tuple(ids[j] for j in m)))
        return out
    if mode == "knn":
        if slide.coordinate_mode != "continuous":
            raise ValueError("k-NN neighbourhoods need continuous coordinates")
        n = len(ids)
        if k > n:
            raise ValueError(f"k={k} exceeds spot count {n}")
        scale = median_nn_distance(coords)
        id_rank = np.empty(n, dtype=np.int64)
        id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(n)
        tree = cKDTree(coords)
        out = []
        for i in range(n):
            # over-fetch so that ties at the k-th distance are resolved by id
            q = min(n, k + 16)
            while True:
                d, j = tree.query(coords[i], k=q)
                d, j = np.atleast_1d(d), np.atleast_1d(j)
                if q == n or d[-1] > d[k - 1]:
                    break
                q = min(n, 2 * q)
            exact = np.sqrt(((coords[j] - coords[i]) ** 2).sum(axis=1))
            order = np.lexsort((id_rank[j], exact))
            j = j[order][:k]
            if j[0] != i:  # coincident spots: anchor still goes first
                j = np.concatenate([[i], j[j != i][: k - 1]])
            rel = (coords[j] - coords[i]) / scale
            out.append(Neighborhood(i, j.astype(np.int64), rel, ids[i], tuple(ids[t] for t in j)))
        return out
    raise ValueError(f"unknown neighbourhood mode {mode!r}")
