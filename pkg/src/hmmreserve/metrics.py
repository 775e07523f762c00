"""Scoring and calibration: ELPD, RMSE, difference standard errors, PIT."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError


def elpd_pointwise(log_densities: np.ndarray) -> np.ndarray:
    """Per-cell log posterior-mean predictive density, ``log((1/S) sum p)``."""
    log_densities = np.asarray(log_densities, dtype=float)
    if log_densities.ndim != 2 or log_densities.shape[1] < 1:
        raise ValidationError("expected a [cells, draws] log-density table")
    if not np.all(np.isfinite(log_densities)):
        raise ValidationError("log predictive densities must be finite")
    return logsumexp(log_densities, axis=1) - math.log(log_densities.shape[1])


def elpd(log_densities: np.ndarray) -> float:
    """Expected log predictive density summed over test cells."""
    return float(elpd_pointwise(log_densities).sum())


def score_difference(
    scores_a: Sequence[float], scores_b: Sequence[float], aggregate: str = "sum"
) -> tuple[float, float]:
    """Pointwise score difference with its standard error.

    ``aggregate`` is ``"sum"`` for ELPD-style totals and ``"mean"`` for
    RMSE-style averages. The standard error is ``sqrt(var(diffs) * n)`` in
    both cases (sample variance, n-1 denominator); with fewer than two cells
    it is reported as NaN.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValidationError("score vectors must be equal-length and non-empty")
    diffs = a - b
    if aggregate == "sum":
        diff = float(diffs.sum())
    elif aggregate == "mean":
        diff = float(diffs.mean())
    else:
        raise ValidationError(f"unknown aggregate {aggregate!r}")
    if diffs.size < 2:
        return diff, float("nan")
    se = math.sqrt(diffs.var(ddof=1) * diffs.size)
    return diff, se


def rmse_cell(samples: np.ndarray, truth: float) -> float:
    """Root mean square error of predictive samples against one true value."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 1:
        raise ValidationError("need at least one predictive sample")
    return float(np.sqrt(np.mean((samples - truth) ** 2)))


def combine_triangles(
    diffs: Sequence[float], ses: Sequence[float]
) -> tuple[float, float, tuple[float, float]]:
    """Cross-triangle combination: mean difference, mean standard error and
    the ±2-standard-error interval around the mean difference."""
    diffs = np.asarray(diffs, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if diffs.size < 1 or diffs.shape != ses.shape:
        raise ValidationError("need matching non-empty diff and se vectors")
    mean_diff = float(diffs.mean())
    mean_se = float(ses.mean())
    return mean_diff, mean_se, (mean_diff - 2.0 * mean_se, mean_diff + 2.0 * mean_se)


def pit(samples: np.ndarray, truth: float) -> float:
    """Fraction of predictive samples at or below the observed value."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 1:
        raise ValidationError("need at least one predictive sample")
    return float(np.count_nonzero(samples <= truth) / samples.size)
