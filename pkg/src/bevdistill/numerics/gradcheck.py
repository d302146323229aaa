"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst_index: Optional[tuple] = None

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index, h: float) -> float:
    old = t.data[index]
    t.data[index] = old + h
    fp = fn().item()
    t.data[index] = old - h
    fm = fn().item()
    t.data[index] = old
    return (fp - fm) / (2.0 * h)


def _rel_error(a: float, n: float, floor: float) -> float:
    denom = abs(a) + abs(n)
    return 0.0 if denom <= floor else abs(a - n) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
    fallback_steps: Sequence[float] = (1e-3, 1e-4, 1e-6, 1e-7),
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    Relative error is ``|a - n| / (|a| + |n|)``, skipped where ``|a| + |n| <= floor``.
    A coordinate whose error at step ``h`` exceeds ``tol`` is re-probed at each
    of ``fallback_steps`` and scored by the best one: large steps beat round-off
    on tiny gradients, small steps avoid straddling a nearby relu/abs kink.
    With ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst, worst_idx, checked = 0.0, None, 0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        coords: List[tuple] = [tuple(c) for c in np.ndindex(p.shape)] if p.shape else [()]
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            a = ga[idx]
            checked += 1
            rel = _rel_error(a, numerical_grad(fn, p, idx, h), floor)
            for h_alt in fallback_steps:
                if rel <= tol:
                    break
                rel = min(rel, _rel_error(a, numerical_grad(fn, p, idx, h_alt), floor))
            if rel > worst:
                worst, worst_idx = rel, (pi,) + idx
    return GradCheckResult(worst, checked, worst_idx)
