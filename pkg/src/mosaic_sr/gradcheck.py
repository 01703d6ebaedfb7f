"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, no_grad

__all__ = ["GradcheckReport", "gradcheck", "relative_error"]

# guards the all-zero-gradient case
TINY = 1e-12


@dataclass
class GradcheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)

    def __bool__(self) -> bool:
        return self.passed


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error max|a - n| / max|n| for one leaf.

    Elementwise ratios are meaningless for entries near zero: central
    differences at eps=1e-6 carry ~1e-16*|f|/eps of absolute round-off, which
    swamps gradients of order 1e-6. Scaling by the leaf's largest gradient
    keeps the comparison relative without that blow-up.
    """
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()))
    if scale < TINY:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def gradcheck(
    f: Callable[..., Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float = 1e-5,
    *,
    extra: Sequence[Tensor] = (),
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic and finite-difference gradients of scalar ``f(x)``.

    ``extra`` lists further leaves (typically parameters) whose gradients are
    checked as well. ``max_elements`` samples that many coordinates per leaf
    instead of sweeping all of them.
    """
    leaves = [x, *extra]
    for t in leaves:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires 64-bit tensors")
        if not t.requires_grad:
            raise ValueError("gradcheck leaves must track gradients")
        t.zero_grad()

    out = f(x)
    if out.data.size != 1:
        raise DimensionError(f"gradcheck needs a scalar-valued function, got output {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in leaves]

    rng = np.random.default_rng(seed)
    per_input = []
    worst = 0.0
    total = 0
    for t, ga in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
            flat[i] = orig
            num[k] = (fp - fm) / (2 * eps)
        m = relative_error(ga.reshape(-1)[idx], num)
        per_input.append(m)
        worst = max(worst, m)
        total += idx.size
    return GradcheckReport(max_rel_err=worst, tol=tol, n_checked=total, per_input=per_input)
