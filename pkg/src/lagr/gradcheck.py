"""Independent gradient verification.

Two routes to the same derivative: the reverse-mode pass of
:mod:`lagr.autodiff`, and plain central finite differences that know nothing
about the graph. :func:`check_gradient` runs both and reports the worst
relative disagreement; the suite in :data:`CASES` (populated lazily, see
:func:`gradcheck_cases`) covers every structured operation and loss the
package exports.

Finite differences lie near nondifferentiable points, so checks run inside a
kink trace and resample their inputs until the forward pass stays at least
``10 * h`` away from every relu/abs/pixel-boundary kink.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import DiffValue, backward, kink_trace

__all__ = [
    "GradReport",
    "OracleError",
    "check_gradient",
    "finite_diff",
    "report_to_csv",
    "run_case",
]

DEFAULT_H = 1e-5
REL_FLOOR = 1e-8
KINK_MARGIN_FACTOR = 10.0


class OracleError(RuntimeError):
    """The finite-difference probe produced non-finite values."""


@dataclass(frozen=True)
class GradReport:
    """Flat analytic and numeric gradients plus their worst relative gap."""

    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float

    def rel_errors(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), REL_FLOOR)
        return np.abs(self.analytic - self.numeric) / denom


def finite_diff(f: Callable[[np.ndarray], float], x0: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate; exact for functions
    linear in x, O(h^2) otherwise.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    grad = np.empty_like(x0)
    probe = x0.copy()
    for i in range(x0.size):
        probe[i] = x0[i] + h
        hi = f(probe)
        probe[i] = x0[i] - h
        lo = f(probe)
        probe[i] = x0[i]
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleError(f"non-finite probe at coordinate {i}: f+={hi}, f-={lo}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradient(f: Callable[[DiffValue], DiffValue], x0: np.ndarray,
                   h: float = DEFAULT_H) -> GradReport:
    """Compare reverse-mode and finite-difference gradients of f at x0.

    ``f`` maps one flat leaf DiffValue to a scalar DiffValue; multi-input
    functions pack their inputs into the leaf and slice inside. The relative
    error uses max(|analytic|, |numeric|, 1e-8) as denominator per
    coordinate.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()

    leaf = DiffValue(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.value.size != 1:
        raise ValueError("gradient checks need a scalar-valued function")
    backward(out)
    analytic = (np.zeros_like(x0) if leaf.grad is None else np.asarray(leaf.grad)).ravel().copy()

    numeric = finite_diff(lambda v: float(f(DiffValue(v.copy())).value), x0, h=h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradReport(analytic=analytic, numeric=numeric, max_rel_err=max_rel)


def run_case(f: Callable[[DiffValue], DiffValue],
             sampler: Callable[[np.random.Generator], np.ndarray],
             rng: np.random.Generator,
             h: float = DEFAULT_H,
             max_resamples: int = 25) -> GradReport:
    """check_gradient on a sampled input, resampling away from kinks.

    The sampler draws a candidate x0; if the forward pass reports any kink
    closer than 10h, the candidate is discarded. Raises if no kink-free
    input appears within ``max_resamples`` draws.
    """
    margin = KINK_MARGIN_FACTOR * h
    for _ in range(max_resamples):
        x0 = sampler(rng)
        with kink_trace() as trace:
            f(DiffValue(np.asarray(x0, dtype=np.float64).ravel().copy()))
        if trace and min(trace) < margin:
            continue
        return check_gradient(f, x0, h=h)
    raise OracleError(f"no kink-free sample found in {max_resamples} draws")


def report_to_csv(report: GradReport) -> str:
    """Serialize per-parameter rows: (param_index, analytic, numeric, rel_err)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["param_index", "analytic", "numeric", "rel_err"])
    rel = report.rel_errors()
    for i in range(report.analytic.size):
        writer.writerow([i, repr(float(report.analytic[i])),
                         repr(float(report.numeric[i])), repr(float(rel[i]))])
    return buf.getvalue()
