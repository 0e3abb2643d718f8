"""Synthetic tissue with planted spatial domains.

Domains are Voronoi cells of random seed points on the grid. Each spot
draws a latent cell-state vector ``z``; morphology is the domain's mean plus
a linear image of ``z`` plus noise, and a fraction of genes ("joint" genes)
has a log-mean shifted by another linear image of ``z``. Those genes are
therefore only explained by expression *together with* morphology.

With ``morph_levels`` / ``expr_levels`` set, domains share morphology means
and expression programs in a factorial layout, so each modality on its own
separates only a coarser partition of the domains.

``layout_seed`` keeps the generating parameters of ``seed`` but redraws
the domain layout and every spot, which yields several slides of one tissue.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import GenePanel, SlideDataset, SpotRecord


@dataclass
class SynthConfig:
    rows: int = 32
    cols: int = 32
    n_domains: int = 4
    n_genes: int = 100
    feature_dim: int = 32
    markers_per_domain: int = 8
    marker_fold: float = 3.0
    base_mean: float = 4.0
    programs: list[list[float]] | None = None  # domains x genes, expected counts
    morph_means: list[list[float]] | None = None  # domains x feature_dim
    morph_separation: float = 1.0
    morph_noise: float = 1.0
    latent_dim: int = 4
    latent_scale: float = 1.0
    joint_fraction: float = 0.3
    joint_strength: float = 0.8
    morph_levels: int = 0  # > 0: domain d uses morphology mean d % morph_levels
    expr_levels: int = 0  # > 0: domain d uses expression program d // (n_domains // expr_levels)
    count_noise: float = 1.0  # > 0: Poisson counts; 0: counts are the rounded means
    coordinate_mode: str = "grid"
    spacing_um: float = 55.0
    jitter_um: float = 0.0
    seed: int = 0
    layout_seed: int | None = None  # spot-level draws; defaults to ``seed``
    slide_id: str = "synth"
    panel_id: str = "synth_panel"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rows < 8 or self.cols < 8:
            raise ValueError("grid extents must be at least 8x8")
        if self.n_domains < 2:
            raise ValueError("need at least two domains")
        if self.n_domains > self.rows * self.cols:
            raise ValueError("more domains than spots")
        if not 0 <= self.joint_fraction <= 1:
            raise ValueError("joint_fraction must lie in [0, 1]")
        for name in ("morph_noise", "latent_scale", "count_noise", "base_mean", "jitter_um"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.coordinate_mode not in ("grid", "continuous"):
            raise ValueError("coordinate_mode must be 'grid' or 'continuous'")
        for name in ("morph_levels", "expr_levels"):
            lv = getattr(self, name)
            if lv < 0 or lv > self.n_domains or (lv and self.n_domains % lv):
                raise ValueError(f"{name} must divide n_domains")
        if self.programs is not None:
            p = np.asarray(self.programs, dtype=float)
            if p.shape != (self.n_domains, self.n_genes) or np.any(p < 0):
                raise ValueError("programs must be a non-negative domains x genes array")
        if self.morph_means is not None:
            m = np.asarray(self.morph_means, dtype=float)
            if m.shape != (self.n_domains, self.feature_dim):
                raise ValueError("morph_means must be domains x feature_dim")


@dataclass
class SynthTruth:
    programs: np.ndarray
    morph_means: np.ndarray
    joint_genes: np.ndarray
    labels: np.ndarray
    latent: np.ndarray


def _generate(cfg: SynthConfig) -> tuple[SlideDataset, SynthTruth]:
    rng = np.random.default_rng(cfg.seed)
    G, C, K, q = cfg.n_genes, cfg.feature_dim, cfg.n_domains, cfg.latent_dim

    # draws happen in a fixed order so supplied arrays do not shift later streams
    base = cfg.base_mean * rng.lognormal(0.0, 0.5, size=G)
    marker_sets = [rng.choice(G, size=min(cfg.markers_per_domain, G), replace=False) for _ in range(K)]
    expr_of = np.arange(K) // (K // cfg.expr_levels) if cfg.expr_levels else np.arange(K)
    morph_of = np.arange(K) % cfg.morph_levels if cfg.morph_levels else np.arange(K)
    programs = np.tile(base, (K, 1))
    for d in range(K):
        programs[d, marker_sets[expr_of[d]]] *= cfg.marker_fold
    drawn_morph = (cfg.morph_separation * rng.standard_normal((K, C)))[morph_of]
    if cfg.programs is not None:
        programs = np.asarray(cfg.programs, dtype=float)
    morph_means = drawn_morph if cfg.morph_means is None else np.asarray(cfg.morph_means, dtype=float)
    n_joint = int(round(cfg.joint_fraction * G))
    joint = np.sort(rng.choice(G, size=n_joint, replace=False))
    A = rng.standard_normal((C, q)) / np.sqrt(q)
    B = rng.standard_normal((G, q)) / np.sqrt(q)

    if cfg.layout_seed is not None:
        rng = np.random.default_rng([cfg.seed, cfg.layout_seed])
    cells = np.array([(r, c) for r in range(cfg.rows) for c in range(cfg.cols)], dtype=np.float64)
    seeds = cells[rng.choice(len(cells), size=K, replace=False)]
    d2 = ((cells[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)

    n = len(cells)
    z = cfg.latent_scale * rng.standard_normal((n, q))
    morph = morph_means[labels] + z @ A.T + cfg.morph_noise * rng.standard_normal((n, C))
    log_shift = np.zeros((n, G))
    log_shift[:, joint] = cfg.joint_strength * (z @ B[joint].T)
    means = programs[labels] * np.exp(log_shift)
    if cfg.count_noise > 0:
        counts = rng.poisson(means)
    else:
        counts = np.rint(means).astype(np.int64)
    jitter = cfg.jitter_um * rng.standard_normal((n, 2))

    panel = GenePanel(cfg.panel_id, tuple(f"g{g:04d}" for g in range(G)))
    feats = morph.astype(np.float32)
    spots = []
    for i, (r, c) in enumerate(cells.astype(int)):
        if cfg.coordinate_mode == "grid":
            coord = (int(r), int(c))
        else:
            coord = (float(c * cfg.spacing_um + jitter[i, 0]), float(r * cfg.spacing_um + jitter[i, 1]))
        expr = {int(g): int(counts[i, g]) for g in np.flatnonzero(counts[i])}
        spots.append(SpotRecord(f"s{i:05d}", coord, expr, feats[i].copy(), f"D{labels[i]}"))
    ds = SlideDataset(cfg.slide_id, panel, spots, cfg.coordinate_mode, C)
    return ds, SynthTruth(programs, morph_means, joint, labels, z)


def synth_tissue(cfg: SynthConfig) -> SlideDataset:
    return _generate(cfg)[0]


def synth_truth(cfg: SynthConfig) -> SynthTruth:
    """The generating parameters and latent draws behind ``synth_tissue(cfg)``."""
    return _generate(cfg)[1]
