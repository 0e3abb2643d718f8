"""Integrated Gradients from a zero baseline, with per-patch min-max scores."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from ..fileio import csv_text
from ..numerics import NumericError, Tape, Tensor, forward_backward
from .model import RiskModel, SlideBag, risk_forward


@dataclass
class AttributionMap:
    values: dict[str, np.ndarray]  # per input, same shape as the input
    f_x: float
    f_baseline: float
    residual: float  # |sum(attr) - (F(x) - F(0))|
    steps: int

    @property
    def relative_residual(self) -> float:
        return self.residual / max(abs(self.f_x - self.f_baseline), 1e-12)

    def patch_scores(self) -> np.ndarray:
        """Attribution summed over feature columns and over inputs, one value per row."""
        rows = [v.reshape(len(v), -1).sum(axis=1) if v.ndim > 1 else v for v in self.values.values()]
        if len({len(r) for r in rows}) != 1:
            raise ValueError("inputs have different row counts; score them separately")
        return np.sum(rows, axis=0)

    def normalized(self) -> np.ndarray:
        return minmax(self.patch_scores())

    def to_csv(self, ids=None) -> str:
        s = self.patch_scores()
        ids = list(ids) if ids is not None else list(range(len(s)))
        return csv_text(["patch", "attribution", "normalized"], zip(ids, s, minmax(s)))


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def integrated_gradients(fn: Callable[[dict[str, Tensor]], Tensor], inputs, steps: int = 128) -> AttributionMap:
    """Midpoint Riemann sum of dF/dx along the straight path from 0 to ``inputs``.

    ``fn`` maps a dict of input tensors to a scalar tensor. ``inputs`` is a
    dict of arrays or a single array (exposed to ``fn`` under the key "x").
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    xs = dict(inputs) if isinstance(inputs, Mapping) else {"x": inputs}
    xs = {k: np.asarray(v, dtype=np.float64) for k, v in xs.items()}
    total = {k: np.zeros_like(v) for k, v in xs.items()}
    for s in range(steps):
        alpha = (s + 0.5) / steps
        leaves = {k: Tensor(alpha * v, True) for k, v in xs.items()}
        with Tape() as tape:
            out = fn(leaves)
        if out.size != 1:
            raise ValueError("attribution target must be a scalar")
        try:
            forward_backward(tape, out, leaves.values())
        except NumericError as err:
            raise NumericError(f"IG step {s} (alpha={alpha:.6g}): {err}") from err
        for k, t in leaves.items():
            g = t.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for input {k!r} at IG step {s} (alpha={alpha:.6g})")
            total[k] += g
    attr = {k: xs[k] * total[k] / steps for k in xs}
    f_x = float(fn({k: Tensor(v) for k, v in xs.items()}).data)
    f_0 = float(fn({k: Tensor(np.zeros_like(v)) for k, v in xs.items()}).data)
    resid = abs(sum(float(a.sum()) for a in attr.values()) - (f_x - f_0))
    return AttributionMap(attr, f_x, f_0, resid, steps)


def attribute_bag(model: RiskModel, bag: SlideBag, steps: int = 128) -> AttributionMap:
    """IG of the risk score with respect to every token matrix the model consumes."""
    inputs = {m: bag.tokens(m) for m in model.config.modalities}
    return integrated_gradients(lambda d: risk_forward(model, bag, d), inputs, steps)
