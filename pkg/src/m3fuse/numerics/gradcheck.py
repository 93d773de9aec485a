"""Central finite-difference verification of backward rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .optim import ParamSet
from .tensor import Graph, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    worst: Optional[Tuple[str, int, float, float]] = None  # (name, flat idx, analytic, numeric)
    non_finite: List[Tuple[str, int]] = field(default_factory=list)
    per_param: Dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [f"grad check over {self.n_coords} coordinates: max rel err {self.max_rel_err:.3e}"]
        if self.worst is not None:
            name, idx, a, num = self.worst
            lines.append(f"  worst: {name}[{idx}] analytic={a:.9e} numeric={num:.9e}")
        for name, idx in self.non_finite:
            lines.append(f"  NON-FINITE comparison at {name}[{idx}]")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> GradCheckReport:
    """Compare the tape gradient of a scalar-valued closure to central differences.

    ``f`` rebuilds its computation from the current parameter values on
    every call and returns a scalar tensor.  ``params`` is a ParamSet or a
    name->Tensor mapping; every coordinate of every entry is perturbed.
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0.0:
        raise ValueError("finite-difference step must be positive")
    if isinstance(params, ParamSet):
        items = list(params.items())
    else:
        items = list(params.items()) if isinstance(params, dict) else list(params)

    for _, t in items:
        t.grad = None
    with Graph() as g:
        loss = f()
        g.backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in items}

    report = GradCheckReport(max_rel_err=0.0, n_coords=0)
    for name, t in items:
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = f().item()
            flat[i] = keep - h
            f_minus = f().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[i])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                report.non_finite.append((name, i))
                continue
            err = _rel_err(a, numeric)
            report.n_coords += 1
            worst_here = max(worst_here, err)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, i, a, numeric)
        report.per_param[name] = worst_here
    return report
