"""Finite-difference verification of reverse-mode gradients.

The check runs the model twice: once under a tape to collect analytic
gradients, then coordinate-by-coordinate with central differences. Both
passes use float64 copies of the parameters (the shadow evaluation), so
disagreement means a wrong backward rule, not storage rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class FDReport:
    """Per-parameter-group relative errors from a finite-difference run.

    The error for a group is max_i |analytic_i - numeric_i| normalized by
    the largest gradient magnitude seen in that group, so a dead backward
    rule shows up as an O(1) error while benign truncation noise in tiny
    components stays small.
    """

    tolerance: float
    errors: dict = field(default_factory=dict)   # name -> max relative error
    checked: dict = field(default_factory=dict)  # name -> entries checked

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self) -> dict:
        return {k: v for k, v in self.errors.items() if v > self.tolerance}

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradient check {status}: {len(self.errors)} groups, "
                f"max rel err {self.max_error:.3e} (tol {self.tolerance:.1e})")


def finite_difference_check(
    model_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-3,
    h: float = 1e-3,
    samples_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> FDReport:
    """Compare analytic gradients of model_fn against central differences.

    model_fn must be deterministic in its parameters and return a scalar
    Tensor. With samples_per_param set, only that many randomly chosen
    coordinates per group are perturbed (the analytic side is always
    complete); otherwise every coordinate is checked.
    """
    report = FDReport(tolerance=tolerance)
    if not params:
        return report
    if rng is None:
        rng = np.random.default_rng(0)

    shadow = {
        name: Tensor(p.data.astype(np.float64), requires_grad=True)
        for name, p in params.items()
    }
    with Tape() as tape:
        loss = model_fn(shadow)
        tape.backward(loss)

    for name, p in shadow.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples_per_param, replace=False)
        numeric = np.empty(idx.size, dtype=np.float64)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = model_fn(shadow).item()
            flat[i] = orig - h
            down = model_fn(shadow).item()
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[idx]
        scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-8)
        report.errors[name] = float(np.abs(a - numeric).max() / scale)
        report.checked[name] = int(idx.size)
    return report
