"""Finite-difference gradient checking.

``grad_check`` takes a function of named tensors, runs it once in
float64 to collect analytic gradients, then compares them element by
element against central differences.  Non-scalar outputs are reduced by
a fixed random projection so the whole Jacobian is exercised, not just
its row sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..rng import make_rng
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: str = ""
    worst_index: tuple = ()
    per_input: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    inputs: dict[str, np.ndarray],
    eps: float = 1e-4,
    rel_floor: float = 1e-6,
    max_checks_per_input: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` receives float64 tensors keyed like ``inputs`` and must be
    deterministic (run dropout in eval mode).  ``max_checks_per_input``
    subsamples the checked elements for large parameter sets; by default
    every element is checked.
    """
    rng = make_rng(seed, 0xC0FFEE)
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}

    proj: dict[str, np.ndarray] = {}

    def scalar_fn(values: dict[str, np.ndarray]) -> float:
        tensors = {k: Tensor(v.copy(), requires_grad=False) for k, v in values.items()}
        out = fn(tensors)
        if "w" not in proj:
            proj["w"] = rng.standard_normal(out.data.shape)
        return float((out.data * proj["w"]).sum())

    # analytic pass
    tensors = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    out = fn(tensors)
    if "w" not in proj:
        proj["w"] = rng.standard_normal(out.data.shape)
    loss = (out * Tensor(proj["w"].astype(out.data.dtype))) if out.data.size > 1 else out
    if out.data.size > 1:
        from .ops import sum_axes

        loss = sum_axes(loss)
    loss.backward()
    analytic = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()
    }

    report = GradCheckReport(max_rel_error=0.0)
    for name in base:
        arr = base[name]
        flat_count = arr.size
        if max_checks_per_input is not None and flat_count > max_checks_per_input:
            idxs = rng.choice(flat_count, size=max_checks_per_input, replace=False)
        else:
            idxs = np.arange(flat_count)
        worst = 0.0
        for flat in idxs:
            idx = np.unravel_index(int(flat), arr.shape)
            saved = arr[idx]
            values = dict(base)
            pert = arr.copy()
            pert[idx] = saved + eps
            values[name] = pert
            f_plus = scalar_fn(values)
            pert2 = arr.copy()
            pert2[idx] = saved - eps
            values[name] = pert2
            f_minus = scalar_fn(values)
            numeric = (f_plus - f_minus) / (2 * eps)
            err = _rel_error(float(analytic[name][idx]), numeric, rel_floor)
            report.checked += 1
            if err > worst:
                worst = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_input = name
                report.worst_index = idx
        report.per_input[name] = worst
    return report
