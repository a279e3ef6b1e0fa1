#!/usr/bin/env python3
"""
SCSA Engine - Finite-Difference Gradient Check

Compares the analytic gradients recorded on a Tape against central
differences (f(t+h) - f(t-h)) / 2h, one coordinate at a time.

f is contracted to a scalar with a fixed seeded random cotangent, so one
backward pass yields the full analytic gradient and every coordinate needs
only two extra forward evaluations.

The error of one target (an input Tensor or a Parameter) is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)

and the reported error of a check is the worst target. A check passes when
that error is at most tol.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import DTYPE_F64, GRADCHECK_DENOM_FLOOR, GRADCHECK_STEP, GRADCHECK_TOL
from exceptions import ConfigurationError, NonFiniteError
from tensor import Parameter, Tape, Tensor, make_rng

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

GradFn = Callable[[Sequence[Tensor], Optional[Tape]], Tensor]


# ============================================================================
# REPORT MODELS
# ============================================================================

@dataclass(frozen=True)
class TargetError:
    """Error of one gradient target."""
    name: str
    shape: Tuple[int, ...]
    coords_checked: int
    max_abs_error: float
    max_rel_error: float


@dataclass(frozen=True)
class GradcheckReport:
    """
    Outcome of one gradient check.

    Attributes:
        name (str): Check name (e.g. "op.dwconv1d", "smsa.unshared")
        max_rel_error (float): Worst relative error over all targets
        tol (float): Tolerance the check was run with
        passed (bool): max_rel_error <= tol
        targets (Tuple[TargetError, ...]): Per-target detail
    """
    name: str
    max_rel_error: float
    tol: float
    passed: bool
    targets: Tuple[TargetError, ...] = field(default_factory=tuple)

    @classmethod
    def combine(cls, name: str, reports: Sequence["GradcheckReport"]) -> "GradcheckReport":
        """Merge several reports (e.g. one per input shape) into one check."""
        tol = min(r.tol for r in reports)
        worst = max(r.max_rel_error for r in reports)
        targets = tuple(t for r in reports for t in r.targets)
        return cls(name, worst, tol, all(r.passed for r in reports), targets)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "tol": self.tol,
            "passed": self.passed,
            "targets": [
                {"name": t.name, "shape": list(t.shape), "coords_checked": t.coords_checked,
                 "max_abs_error": t.max_abs_error, "max_rel_error": t.max_rel_error}
                for t in self.targets
            ],
        }

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


# ============================================================================
# ORACLE
# ============================================================================

def _require_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        coords = [tuple(int(i) for i in idx) for idx in np.argwhere(bad)]
        raise NonFiniteError(f"Gradcheck found non-finite {what}", coords)


def _coordinates(size: int, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def finite_diff_gradcheck(f: GradFn, inputs: Sequence[Tensor],
                          params: Sequence[Parameter] = (),
                          h: float = GRADCHECK_STEP, tol: float = GRADCHECK_TOL,
                          seed: int = 0, max_coords: Optional[int] = None,
                          name: str = "gradcheck") -> GradcheckReport:
    """
    Check the analytic gradient of f against central differences.

    f(inputs, tape) must be a pure function of inputs and params: it is
    evaluated once with a tape for the analytic gradient, then repeatedly
    with tape=None while single coordinates are perturbed in place. Every
    perturbed value is restored. Parameter gradients are zeroed first.

    Args:
        f: Function under test
        inputs: Tensors whose gradients are checked
        params: Parameters whose gradients are checked
        h: Central-difference step
        tol: Relative tolerance
        seed: Seed of the cotangent and of coordinate subsampling
        max_coords: Check at most this many coordinates per target
        name: Name carried into the report

    Returns:
        GradcheckReport: Worst relative error and per-target detail

    Raises:
        ConfigurationError: If any target is not 64-bit
        NonFiniteError: If f, the analytic or the numeric gradient is not finite
    """
    targets: List[Tuple[str, np.ndarray]] = []
    for i, x in enumerate(inputs):
        targets.append((f"input{i}", x.data))
    for p in params:
        targets.append((p.name, p.value.data))
    for target_name, data in targets:
        if data.dtype.name != DTYPE_F64:
            raise ConfigurationError(f"Gradcheck needs {DTYPE_F64} values ({target_name} is {data.dtype.name})")

    rng = make_rng(seed)
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = f(inputs, tape)
    _require_finite(out.data, "output")
    cotangent = rng.standard_normal(out.shape)
    tape.backward(out, cotangent)

    analytic: List[np.ndarray] = []
    for x in inputs:
        grad = tape.grad(x)
        analytic.append(np.zeros_like(x.data) if grad is None else grad)
    for p in params:
        analytic.append(p.grad.data.copy())

    def phi() -> float:
        return float((f(inputs, None).data * cotangent).sum())

    results: List[TargetError] = []
    for (target_name, data), grad in zip(targets, analytic):
        _require_finite(grad, f"analytic gradient of {target_name}")
        flat = data.reshape(-1)
        coords = _coordinates(flat.size, max_coords, rng)
        a = grad.reshape(-1)[coords]
        n = np.empty(len(coords))
        for j, idx in enumerate(coords):
            original = flat[idx]
            flat[idx] = original + h
            plus = phi()
            flat[idx] = original - h
            minus = phi()
            flat[idx] = original
            n[j] = (plus - minus) / (2.0 * h)
        if not np.isfinite(n).all():
            bad = [tuple(int(c) for c in np.unravel_index(coords[j], data.shape))
                   for j in np.flatnonzero(~np.isfinite(n))]
            raise NonFiniteError(f"Gradcheck found non-finite numeric gradient of {target_name}", bad)
        abs_err = float(np.max(np.abs(a - n)))
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), GRADCHECK_DENOM_FLOOR)
        results.append(TargetError(target_name, tuple(data.shape), len(coords), abs_err, abs_err / denom))

    worst = max(t.max_rel_error for t in results) if results else 0.0
    report = GradcheckReport(name, worst, tol, worst <= tol, tuple(results))
    logger.debug(str(report))
    return report
