"""Central finite-difference gradient checks for the autodiff engine (run in float64)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_STEP = 1e-5
# relative error is |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating
DEFAULT_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple  # (input index, flat position, analytic, numeric)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = DEFAULT_STEP,
                    floor: float = DEFAULT_FLOOR, samples: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    ``inputs`` are perturbed in place (and restored). With ``samples`` set, that
    many entries per input are drawn at random instead of checking every entry.
    """
    for x in inputs:
        x.grad = None
    loss = fn()
    T.backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = rng or np.random.default_rng(0)
    worst, checked = (None, None, 0.0, 0.0), 0
    max_err = 0.0
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        positions = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            positions = rng.choice(flat.size, samples, replace=False)
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + step
            with T.no_grad():
                up = fn().item()
            flat[pos] = orig - step
            with T.no_grad():
                down = fn().item()
            flat[pos] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[i].reshape(-1)[pos])
            err = rel_error(a, numeric, floor)
            checked += 1
            if err > max_err:
                max_err, worst = err, (i, int(pos), a, numeric)
    return GradCheckResult(max_err, checked, worst)
