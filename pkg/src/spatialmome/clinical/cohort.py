"""Cohort tables and a synthetic cohort with a planted patch-level risk signal."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataspace import FormatError
from ..fileio import csv_text, read_csv
from ..seeding import rng_for
from .model import SlideBag
from .survival import SurvivalRecord

REQUIRED = ("subject_id", "slide_id", "time", "event")


def read_cohort(path) -> list[SurvivalRecord]:
    """CSV with subject_id,slide_id,time,event and optional numeric covariate columns."""
    header, rows = read_csv(path)
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
    col = {c: header.index(c) for c in header}
    extra = [c for c in header if c not in REQUIRED]
    out = []
    for ln, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{ln}: expected {len(header)} fields, got {len(row)}")
        try:
            rec = SurvivalRecord(row[col["subject_id"]], float(row[col["time"]]), int(row[col["event"]]),
                                 row[col["slide_id"]], None, {c: float(row[col[c]]) for c in extra})
        except ValueError as err:
            raise FormatError(f"{path}:{ln}: {err}") from err
        out.append(rec)
    ids = [r.subject_id for r in out]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate subject_id")
    return out


def cohort_csv(records: list[SurvivalRecord]) -> str:
    cov = sorted({k for r in records for k in r.covariates})
    rows = ([r.subject_id, r.slide_id, r.time, r.event, *(r.covariates.get(c, "") for c in cov)] for r in records)
    return csv_text([*REQUIRED, *cov], rows)


@dataclass
class CohortConfig:
    n_subjects: int = 120
    n_patches: int = 40
    he_dim: int = 16
    st_dim: int = 16
    beta: float = 1.0  # log hazard ratio per unit latent risk
    base_hazard: float = 0.02  # events per month at zero risk
    max_followup: float = 120.0
    signal: float = 1.5  # mean shift of aggressive patches along the planted direction
    seed: int = 0


@dataclass
class SynthCohort:
    bags: list[SlideBag]
    records: list[SurvivalRecord]
    latent_risk: np.ndarray
    aggressive: list[np.ndarray]  # per bag, boolean mask of planted high-risk patches


def synth_cohort(cfg: CohortConfig) -> SynthCohort:
    """Each subject's latent risk sets the share of aggressive patches and the hazard.

    Aggressive patches move along one fixed direction in both modalities, so
    the risk signal is present in H&E and ST tokens and in their pairing.
    """
    rng = rng_for(cfg.seed, "survival", 10_000)
    u_he = rng.standard_normal(cfg.he_dim)
    u_he /= np.linalg.norm(u_he)
    u_st = rng.standard_normal(cfg.st_dim)
    u_st /= np.linalg.norm(u_st)
    r = rng.standard_normal(cfg.n_subjects)
    frac = 1.0 / (1.0 + np.exp(-1.5 * r))
    bags, recs, masks = [], [], []
    t_event = rng.exponential(1.0 / (cfg.base_hazard * np.exp(cfg.beta * r)))
    t_cens = rng.uniform(0.3 * cfg.max_followup, cfg.max_followup, cfg.n_subjects)
    for i in range(cfg.n_subjects):
        agg = rng.random(cfg.n_patches) < frac[i]
        he = rng.standard_normal((cfg.n_patches, cfg.he_dim)) + cfg.signal * agg[:, None] * u_he
        st = rng.standard_normal((cfg.n_patches, cfg.st_dim)) + cfg.signal * agg[:, None] * u_st
        coords = np.stack(np.divmod(np.arange(cfg.n_patches), int(np.ceil(np.sqrt(cfg.n_patches)))), 1)
        sid = f"slide{i:04d}"
        bags.append(SlideBag(sid, he, st, coords.astype(np.float64)))
        t = float(min(t_event[i], t_cens[i]))
        recs.append(SurvivalRecord(f"subj{i:04d}", max(t, 1e-3), int(t_event[i] <= t_cens[i]), sid))
        masks.append(agg)
    return SynthCohort(bags, recs, r, masks)
