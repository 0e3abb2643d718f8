"""Survival statistics: concordance, product-limit curves, log-rank, Cox regression, bootstrap."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from ..fileio import csv_text
from ..numerics import Tensor, ag
from ..seeding import rng_for


@dataclass
class SurvivalRecord:
    subject_id: str
    time: float
    event: int
    slide_id: str = ""
    risk: float | None = None
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError(f"{self.subject_id}: time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"{self.subject_id}: event must be 0 or 1, got {self.event}")


def _check(times, events) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events)
    if t.shape != e.shape or t.ndim != 1:
        raise ValueError("times and events must be 1-D arrays of equal length")
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("times must be finite and positive")
    if not np.all(np.isin(e, (0, 1))):
        raise ValueError("events must be 0 or 1")
    return t, e.astype(np.int64)


# ---------------------------------------------------------------- chi-square tail

def gammaincc(a: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    """Regularised upper incomplete gamma Q(a, x): series below a+1, continued fraction above."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    log_pre = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(max_iter):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * tol:
                break
        return max(0.0, 1.0 - total * math.exp(log_pre))
    # modified Lentz evaluation of the continued fraction
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return min(1.0, math.exp(log_pre) * h)


def chi2_sf(x: float, df: int = 1) -> float:
    return gammaincc(df / 2.0, max(x, 0.0) / 2.0)


# ---------------------------------------------------------------- concordance

def c_index(scores, times, events) -> float:
    """Harrell's C: pair (i, j) is comparable when t_i < t_j and i had the event."""
    t, e = _check(times, events)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError("scores and times differ in length")
    num = 0.0
    den = 0
    for i in np.flatnonzero(e == 1):
        later = t > t[i]
        n = int(later.sum())
        if n == 0:
            continue
        den += n
        num += float((s[later] < s[i]).sum()) + 0.5 * float((s[later] == s[i]).sum())
    if den == 0:
        raise ValueError("no comparable pairs")
    return num / den


# ---------------------------------------------------------------- Kaplan-Meier

@dataclass
class KMCurve:
    times: np.ndarray  # step positions, starting at 0
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """Right-continuous S(t)."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.survival[max(i, 0)])

    def to_csv(self, group: str | None = None) -> str:
        if group is None:
            return csv_text(["time", "survival", "at_risk", "events"],
                            zip(self.times, self.survival, self.at_risk, self.events))
        return csv_text(["group", "time", "survival", "at_risk", "events"],
                        ((group, *r) for r in zip(self.times, self.survival, self.at_risk, self.events)))


def km_curve(times, events) -> KMCurve:
    """Product-limit estimate with a step at every distinct observed time."""
    t, e = _check(times, events)
    if len(t) == 0:
        raise ValueError("empty sample")
    uniq = np.unique(t)
    s = 1.0
    out_t, out_s, out_n, out_d = [0.0], [1.0], [len(t)], [0]
    for u in uniq:
        n = int((t >= u).sum())
        d = int(((t == u) & (e == 1)).sum())
        if d:
            s *= 1.0 - d / n
        out_t.append(float(u))
        out_s.append(s)
        out_n.append(n)
        out_d.append(d)
    return KMCurve(np.array(out_t), np.array(out_s), np.array(out_n), np.array(out_d))


# ---------------------------------------------------------------- log-rank

@dataclass
class LogRankResult:
    statistic: float
    p: float
    observed_a: float
    expected_a: float
    variance: float


def logrank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, ea = _check(times_a, events_a)
    tb, eb = _check(times_b, events_b)
    if len(ta) == 0 or len(tb) == 0:
        raise ValueError("both groups must be nonempty")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    in_a = np.r_[np.ones(len(ta), bool), np.zeros(len(tb), bool)]
    if e.sum() == 0:
        raise ValueError("no events")
    obs = exp = var = 0.0
    for u in np.unique(t[e == 1]):
        risk = t >= u
        n = int(risk.sum())
        na = int((risk & in_a).sum())
        hit = (t == u) & (e == 1)
        d = int(hit.sum())
        obs += int((hit & in_a).sum())
        exp += d * na / n
        if n > 1:
            var += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1)
    if var <= 0:
        return LogRankResult(0.0, 1.0, obs, exp, var)
    stat = (obs - exp) ** 2 / var
    return LogRankResult(stat, chi2_sf(stat, 1), obs, exp, var)


# ---------------------------------------------------------------- Cox model

def cox_nll_loss(scores, times, events, reduction: str = "sum") -> Tensor:
    """Negative Breslow partial log-likelihood of ``scores`` (differentiable)."""
    t, e = _check(times, events)
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    s = ag.reshape(s, (len(t),))
    ev = np.flatnonzero(e == 1)
    if len(ev) == 0:
        raise ValueError("no events: partial likelihood undefined")
    risk = (t[None, :] >= t[ev, None]).astype(np.float64)  # events x subjects
    c = float(np.max(s.data))  # constant shift for a stable log-sum-exp
    log_den = ag.log(Tensor(risk) @ ag.exp(s - c)) + c
    nll = ag.sum(log_den - ag.getitem(s, ev))
    if reduction == "mean":
        return nll * (1.0 / len(ev))
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return nll


class CoxFitError(RuntimeError):
    pass


@dataclass
class CoxResult:
    terms: list[str]
    beta: np.ndarray
    se: np.ndarray
    p: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    monotone: bool = False

    @property
    def hr(self) -> np.ndarray:
        return np.exp(self.beta)

    def to_csv(self) -> str:
        return csv_text(["term", "beta", "HR", "se", "p"], zip(self.terms, self.beta, self.hr, self.se, self.p))


def _cox_terms(X, t, e, beta):
    """Breslow log-likelihood, score and information at ``beta``."""
    order = np.argsort(-t, kind="stable")
    Xs, ts, es = X[order], t[order], e[order]
    eta = Xs @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    S0 = np.cumsum(w)
    S1 = np.cumsum(w[:, None] * Xs, axis=0)
    S2 = np.cumsum(w[:, None, None] * Xs[:, :, None] * Xs[:, None, :], axis=0)
    # risk set of subject i = every subject with time >= t_i, i.e. a prefix of the sorted order
    last = np.searchsorted(-ts, -ts, side="right") - 1
    idx = last[es == 1]
    xe = Xs[es == 1]
    s0, s1, s2 = S0[idx], S1[idx], S2[idx]
    mean = s1 / s0[:, None]
    ll = float((eta[es == 1] - shift - np.log(s0)).sum())
    score = (xe - mean).sum(0)
    info = (s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]).sum(0)
    return ll, score, info


def cox_fit(X, times, events, terms: Sequence[str] | None = None, tol: float = 1e-9,
            max_iter: int = 50, monotone_bound: float = 25.0) -> CoxResult:
    """Newton-Raphson with step halving on the Breslow partial likelihood."""
    t, e = _check(times, events)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if n != len(t):
        raise ValueError("covariates and times differ in length")
    if e.sum() == 0:
        raise CoxFitError("no events")
    terms = list(terms) if terms is not None else [f"x{j}" for j in range(k)]
    Xc = X - X.mean(axis=0)
    if np.linalg.matrix_rank(Xc) < k:
        raise CoxFitError(f"covariates are rank deficient after centring (rank {np.linalg.matrix_rank(Xc)} < {k})")
    beta = np.zeros(k)
    ll, score, info = _cox_terms(Xc, t, e, beta)
    converged = monotone = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            if np.abs(beta).max() > 0.5 * monotone_bound:
                monotone = True
                break
            raise CoxFitError(f"singular information matrix at iteration {it}, beta={beta.tolist()}")
        for _ in range(40):
            cand = beta + step
            ll_new, score_new, info_new = _cox_terms(Xc, t, e, cand)
            if ll_new >= ll - 1e-12:
                break
            step = step / 2.0
        beta, ll, score, info = cand, ll_new, score_new, info_new
        if np.abs(beta).max() > monotone_bound:
            monotone = True
            break
        if np.abs(step).max() < tol:
            converged = True
            break
    if not converged and not monotone:
        raise CoxFitError(f"no convergence in {max_iter} iterations: beta={beta.tolist()}, loglik={ll}, "
                          f"last step={np.abs(step).max():.3g}")
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se = np.full(k, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    p = np.array([float(erfc(abs(zi) / math.sqrt(2.0))) for zi in z])
    return CoxResult(terms, beta, se, p, ll, it, converged, monotone)


def cox_loglik(X, times, events, beta) -> float:
    t, e = _check(times, events)
    X = np.asarray(X, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else X
    return _cox_terms(X - X.mean(0), t, e, np.atleast_1d(np.asarray(beta, dtype=np.float64)))[0]


# ---------------------------------------------------------------- bootstrap

@dataclass
class BootstrapResult:
    mean: float
    sd: float
    lower: float
    upper: float
    values: np.ndarray
    redraws: int


def bootstrap_ci(metric: Callable, data, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> BootstrapResult:
    """Percentile interval of ``metric`` over subject-level resamples.

    ``data`` is an array (rows are subjects) or a tuple of equal-length arrays;
    ``metric`` receives the resample in the same shape. A resample on which the
    metric raises ``ValueError`` or returns a non-finite value is redrawn.
    """
    cols = data if isinstance(data, tuple) else (data,)
    cols = tuple(np.asarray(c) for c in cols)
    n = len(cols[0])
    if n < 2:
        raise ValueError("need at least two subjects")
    if any(len(c) != n for c in cols):
        raise ValueError("data columns differ in length")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    values = np.empty(n_boot)
    attempt = redraws = 0
    for b in range(n_boot):
        while True:
            if attempt >= 10 * n_boot:
                raise RuntimeError(f"metric undefined on too many resamples ({redraws} redraws)")
            idx = rng_for(seed, "bootstrap", attempt).integers(0, n, size=n)
            attempt += 1
            sample = tuple(c[idx] for c in cols)
            try:
                v = float(metric(*sample))
            except ValueError:
                v = float("nan")
            if math.isfinite(v):
                break
            redraws += 1
        values[b] = v
    alpha = 1.0 - level
    lo, hi = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    return BootstrapResult(float(values.mean()), float(values.std(ddof=1)) if n_boot > 1 else 0.0,
                           float(lo), float(hi), values, redraws)


# ---------------------------------------------------------------- risk groups

@dataclass
class Stratification:
    cutoff: float
    high: np.ndarray  # indices of test subjects above the cutoff
    low: np.ndarray
    km_high: KMCurve | None
    km_low: KMCurve | None
    logrank: LogRankResult | None
    flag: str = ""


def stratify_median(validation_scores, scores, times, events) -> Stratification:
    """Split test subjects at the validation-cohort median risk (high: strictly above)."""
    v = np.asarray(validation_scores, dtype=np.float64)
    if v.size == 0:
        raise ValueError("validation scores are empty")
    t, e = _check(times, events)
    s = np.asarray(scores, dtype=np.float64)
    cut = float(np.median(v))
    high = np.flatnonzero(s > cut)
    low = np.flatnonzero(s <= cut)
    km_h = km_curve(t[high], e[high]) if len(high) else None
    km_l = km_curve(t[low], e[low]) if len(low) else None
    if len(high) == 0 or len(low) == 0:
        return Stratification(cut, high, low, km_h, km_l, None, "empty_low_group" if len(low) == 0 else "empty_high_group")
    if e.sum() == 0:
        return Stratification(cut, high, low, km_h, km_l, None, "no_events")
    lr = logrank(t[high], e[high], t[low], e[low])
    return Stratification(cut, high, low, km_h, km_l, lr)
