"""Loss-triangle data model, file ingestion, splitting and link-ratio analytics.

A triangle holds strictly positive cumulative losses indexed by experience
period ``i`` (rows, 1-based) and development period ``j`` (columns, 1-based).
Observed cells in each row form a contiguous prefix ``j = 1..J_i``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ValidationError

TRIANGLE_HEADER = ("experience_period", "development_period", "cumulative_loss")
LINK_RATIO_HEADER = ("group", "transition", "mean", "sd", "count")

#: A held-out cell with its true value: (experience period, development period, loss).
TestCell = tuple[int, int, float]


@dataclass(frozen=True)
class Triangle:
    """Immutable cumulative loss triangle.

    Parameters
    ----------
    n_experience : int
        Number of experience periods ``N`` (rows).
    n_development : int
        Number of development periods ``M`` (columns).
    values : np.ndarray
        ``(N, M)`` float array, NaN outside the observed prefix of each row.
    row_lengths : np.ndarray
        ``(N,)`` int array of observed prefix lengths ``J_i`` (all ``>= 1``).
    """

    n_experience: int
    n_development: int
    values: np.ndarray
    row_lengths: np.ndarray

    def __post_init__(self):
        if self.n_experience < 2 or self.n_development < 2:
            raise ValidationError(
                "triangle needs at least 2 experience and 2 development periods, "
                f"got N={self.n_experience}, M={self.n_development}"
            )
        values = np.asarray(self.values, dtype=float)
        lengths = np.asarray(self.row_lengths, dtype=int)
        if values.shape != (self.n_experience, self.n_development):
            raise ValidationError(
                f"values shape {values.shape} does not match "
                f"(N, M)=({self.n_experience}, {self.n_development})"
            )
        if lengths.shape != (self.n_experience,):
            raise ValidationError("row_lengths must have one entry per experience period")
        if np.any(lengths < 1) or np.any(lengths > self.n_development):
            raise ValidationError("every row must observe a prefix 1 <= J_i <= M")
        for i in range(self.n_experience):
            row = values[i]
            j_i = lengths[i]
            prefix = row[:j_i]
            if not np.all(np.isfinite(prefix)):
                j = int(np.argmin(np.isfinite(prefix))) + 1
                raise ValidationError(f"gap in observed prefix at cell ({i + 1}, {j})")
            if np.any(prefix <= 0.0):
                j = int(np.argmax(prefix <= 0.0)) + 1
                raise ValidationError(
                    f"non-positive loss {prefix[j - 1]!r} at cell ({i + 1}, {j})"
                )
            if np.any(np.isfinite(row[j_i:])):
                raise ValidationError(
                    f"observed value beyond stated prefix in experience period {i + 1}"
                )
        values.setflags(write=False)
        lengths.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_lengths", lengths)

    @classmethod
    def from_cells(cls, cells: Iterable[tuple[int, int, float]]) -> "Triangle":
        """Build a triangle from ``(i, j, loss)`` rows, inferring N and M."""
        seen: dict[tuple[int, int], float] = {}
        for i, j, loss in cells:
            i, j = int(i), int(j)
            if i < 1 or j < 1:
                raise ValidationError(f"cell indices must be >= 1, got ({i}, {j})")
            if (i, j) in seen:
                raise ValidationError(f"duplicate cell ({i}, {j})")
            if not math.isfinite(loss) or loss <= 0.0:
                raise ValidationError(f"non-positive loss {loss!r} at cell ({i}, {j})")
            seen[(i, j)] = float(loss)
        if not seen:
            raise ValidationError("no cells supplied")
        n = max(i for i, _ in seen)
        m = max(j for _, j in seen)
        values = np.full((n, m), np.nan)
        for (i, j), loss in seen.items():
            values[i - 1, j - 1] = loss
        lengths = np.zeros(n, dtype=int)
        for i in range(n):
            observed = np.isfinite(values[i])
            j_i = int(observed.sum())
            if j_i == 0:
                raise ValidationError(f"experience period {i + 1} has no observed cells")
            if not observed[:j_i].all():
                gap = int(np.argmin(observed)) + 1
                raise ValidationError(f"gap in observed prefix at cell ({i + 1}, {gap})")
            lengths[i] = j_i
        return cls(n, m, values, lengths)

    def cell(self, i: int, j: int) -> float:
        """Observed loss at 1-based cell ``(i, j)``."""
        if not (1 <= i <= self.n_experience) or j < 1 or j > self.row_lengths[i - 1]:
            raise ValidationError(f"cell ({i}, {j}) is not observed")
        return float(self.values[i - 1, j - 1])

    def cells(self) -> Iterator[tuple[int, int, float]]:
        """Iterate observed cells as ``(i, j, loss)`` in row-major order."""
        for i in range(self.n_experience):
            for j in range(int(self.row_lengths[i])):
                yield i + 1, j + 1, float(self.values[i, j])

    def row(self, i: int) -> np.ndarray:
        """Observed prefix of experience period ``i`` (1-based)."""
        return self.values[i - 1, : int(self.row_lengths[i - 1])]

    def max_loss(self) -> float:
        return float(np.nanmax(self.values))

    @property
    def n_cells(self) -> int:
        return int(self.row_lengths.sum())

    def with_row_lengths(self, lengths: Sequence[int]) -> "Triangle":
        """Re-mask the triangle to shorter observed prefixes (e.g. hold-outs)."""
        lengths = np.asarray(lengths, dtype=int)
        if np.any(lengths > self.row_lengths):
            raise ValidationError("cannot extend observed prefixes, only shorten them")
        values = np.full_like(self.values, np.nan)
        for i in range(self.n_experience):
            values[i, : lengths[i]] = self.values[i, : lengths[i]]
        return Triangle(self.n_experience, self.n_development, values, lengths)


def load_triangle(path: str | Path) -> Triangle:
    """Read a long-form delimited file into a :class:`Triangle`.

    Expects UTF-8 text with the header
    ``experience_period,development_period,cumulative_loss``.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"triangle file not found: {path}")
    cells: list[tuple[int, int, float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"empty triangle file: {path}") from None
        if tuple(h.strip() for h in header) != TRIANGLE_HEADER:
            raise ValidationError(
                f"expected header {','.join(TRIANGLE_HEADER)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not field.strip() for field in row):
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                i = int(row[0])
                j = int(row[1])
                loss = float(row[2])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            cells.append((i, j, loss))
    return Triangle.from_cells(cells)


def write_triangle(triangle: Triangle, path: str | Path) -> None:
    """Write observed cells in the canonical long format."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIANGLE_HEADER)
        for i, j, loss in triangle.cells():
            writer.writerow([i, j, repr(loss)])


def triangle_from_matrix(matrix: Sequence[Sequence[float]]) -> Triangle:
    """Convenience converter for wide matrices (NaN marks unobserved cells)."""
    array = np.asarray(matrix, dtype=float)
    if array.ndim != 2:
        raise ValidationError("matrix input must be two-dimensional")
    cells = [
        (i + 1, j + 1, float(array[i, j]))
        for i in range(array.shape[0])
        for j in range(array.shape[1])
        if np.isfinite(array[i, j])
    ]
    return Triangle.from_cells(cells)


def split_upper_lower(
    triangle: Triangle, mode: str = "lower-diagonal"
) -> tuple[Triangle, list[TestCell]]:
    """Partition a triangle into training data and held-out test cells.

    ``lower-diagonal`` keeps the standard upper diagonal ``J_i = min(M, N - i + 1)``
    and tests on everything below it. ``last-diagonal`` holds out the latest
    observed cell of every row that has at least two (literature trapezoids).
    """
    n, m = triangle.n_experience, triangle.n_development
    if mode == "lower-diagonal":
        keep = np.minimum(triangle.row_lengths, np.maximum(n - np.arange(n), 1))
    elif mode == "last-diagonal":
        keep = np.maximum(triangle.row_lengths - 1, 1)
    else:
        raise ValidationError(f"unknown split mode {mode!r}")
    test: list[TestCell] = []
    for i in range(n):
        for j in range(int(keep[i]), int(triangle.row_lengths[i])):
            test.append((i + 1, j + 1, float(triangle.values[i, j])))
    train = triangle.with_row_lengths(keep)
    return train, test


def recombine(train: Triangle, test: Iterable[TestCell]) -> Triangle:
    """Inverse of :func:`split_upper_lower`."""
    cells = list(train.cells()) + [(i, j, loss) for i, j, loss in test]
    return Triangle.from_cells(cells)


def empirical_link_ratios(triangle: Triangle) -> dict[tuple[int, int], float]:
    """Ratios ``y_{i,d+1} / y_{i,d}`` for every observed transition ``(i, d)``."""
    ratios: dict[tuple[int, int], float] = {}
    for i in range(triangle.n_experience):
        row = triangle.row(i + 1)
        for d in range(len(row) - 1):
            ratios[(i + 1, d + 1)] = float(row[d + 1] / row[d])
    return ratios


@dataclass(frozen=True)
class LinkRatioSummary:
    """Per-group, per-transition mean/sd/count of empirical link ratios."""

    group: str
    transition: int
    mean: float
    sd: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError("link-ratio summary requires count >= 1")
        if self.sd < 0.0:
            raise ValidationError("link-ratio standard deviation must be >= 0")


def summarize_link_ratios(
    groups: Mapping[str, Sequence[Triangle]]
) -> list[LinkRatioSummary]:
    """Aggregate link ratios across triangle collections, one row per transition.

    Sample standard deviation (n-1 denominator); sd is 0 when only one ratio
    is available for a transition.
    """
    rows: list[LinkRatioSummary] = []
    for group in sorted(groups):
        pooled: dict[int, list[float]] = {}
        for tri in groups[group]:
            for (_, d), ratio in empirical_link_ratios(tri).items():
                pooled.setdefault(d, []).append(ratio)
        for d in sorted(pooled):
            ratios = np.asarray(pooled[d])
            sd = float(ratios.std(ddof=1)) if len(ratios) > 1 else 0.0
            rows.append(LinkRatioSummary(group, d, float(ratios.mean()), sd, len(ratios)))
    return rows


def write_link_ratio_summary(rows: Sequence[LinkRatioSummary], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LINK_RATIO_HEADER)
        for row in rows:
            writer.writerow(
                [row.group, row.transition, repr(row.mean), repr(row.sd), row.count]
            )
