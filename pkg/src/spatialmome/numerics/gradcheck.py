"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor, forward_backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    flagged: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[int, tuple[int, ...]] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _evaluate(fn, arrays) -> float:
    out = fn(*[Tensor(a) for a in arrays])
    return float(out.data)


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn`` with central differences.

    ``fn`` receives one Tensor per array in ``point``. A coordinate whose
    one-sided differences disagree by more than ``kink_tol`` (relative) is
    treated as sitting on a kink; it is flagged and left out of the error.
    """
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in point]

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*inputs)
    grads = forward_backward(tape, out, inputs)
    f0 = float(out.data)
    if _evaluate(fn, arrays) != f0:
        raise RuntimeError("function is not deterministic at the given point")

    worst_err, worst = 0.0, None
    flagged: list[tuple[int, tuple[int, ...]]] = []
    n = 0
    for k, arr in enumerate(arrays):
        analytic = grads[inputs[k]]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            fp = _evaluate(fn, arrays)
            arr[idx] = orig - epsilon
            fm = _evaluate(fn, arrays)
            arr[idx] = orig
            fwd = (fp - f0) / epsilon
            bwd = (f0 - fm) / epsilon
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
                flagged.append((k, idx))
                continue
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            n += 1
            if err > worst_err:
                worst_err, worst = err, (k, idx)
    return GradCheckReport(worst_err, n, flagged, worst)
