"""Posterior-predictive simulation and one-step-ahead predictive densities.

Trajectories are free-running: future states are drawn from the transition
matrix seeded at each row's filtered last-state distribution, and losses from
the lognormal emissions, conditioning on the previously *simulated* loss.
One-step-ahead densities instead condition on the *observed* test values by
running the forward filter onward through them; along a test row those
densities sum to the row's conditional log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .inference import PosteriorDraws
from .model import Variant
from .triangle import TestCell, Triangle

_LOG_2PI = math.log(2.0 * math.pi)

CAP_MULTIPLIER = 100.0
_TINY_LOSS = 1e-300
FAN_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass(frozen=True)
class PredictionSet:
    """Per test cell: trajectory samples, sampled states, optional densities.

    ``samples`` and ``states`` have shape ``[n_cells, S]``; ``log_densities``
    is None until observed test values are scored. ``cap`` is the value at
    which every trajectory sample was clamped.
    """

    cells: list[tuple[int, int]]
    samples: np.ndarray
    states: np.ndarray
    cap: float
    seed: int
    log_densities: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.samples.shape[1]

    def cell_index(self, i: int, j: int) -> int:
        try:
            return self.cells.index((i, j))
        except ValueError:
            raise ValidationError(f"cell ({i}, {j}) not in prediction set") from None

    def with_log_densities(self, log_densities: np.ndarray) -> "PredictionSet":
        if log_densities.shape != self.samples.shape:
            raise ValidationError("log density table must match the sample table")
        return replace(self, log_densities=log_densities)


class _HmmArrays:
    """Natural-space parameter columns as draw-vectorized arrays."""

    def __init__(self, draws: PosteriorDraws, indices: np.ndarray | None = None):
        self.variant = Variant(draws.model)
        m = draws.n_development
        self.m = m
        idx = np.arange(draws.n_draws) if indices is None else np.asarray(indices)
        self.n = len(idx)
        self.alpha = np.stack(
            [draws.column(f"alpha_{j}")[idx] for j in range(1, m)], axis=1
        )
        self.log_alpha = np.log(self.alpha)
        self.log_omega = np.log(draws.column("omega")[idx])
        self.beta = draws.column("beta")[idx]
        self.gamma1 = draws.column("gamma1")[idx]
        self.gamma2 = draws.column("gamma2")[idx]
        if self.variant is Variant.HMM_LAG:
            self.pi = np.stack(
                [draws.column(f"pi_{d}")[idx] for d in range(1, m)], axis=1
            )
        else:
            self.pi = draws.column("pi")[idx]
        self.nu = draws.column("nu")[idx] if self.variant is Variant.HMM_NU else None

    def body_stay(self, d: int) -> np.ndarray:
        if self.variant is Variant.HMM_LAG:
            return self.pi[:, min(d, self.m - 1) - 1]
        return self.pi

    def tail_return(self) -> np.ndarray:
        if self.nu is None:
            return np.zeros(self.n)
        return self.nu


def _emission_locations(
    arrays: _HmmArrays, j: int, log_y_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Body/tail log-scale locations and log sigma at period ``j``."""
    mu_body = arrays.log_alpha[:, j - 2] + log_y_prev
    mu_tail = arrays.beta**j * arrays.log_omega + log_y_prev
    log_sigma = 0.5 * (arrays.gamma1 + arrays.gamma2 * j + log_y_prev)
    return mu_body, mu_tail, log_sigma


def _lognormal_logpdf(log_y: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    z = (log_y - mu) * np.exp(-log_sigma)
    return -log_y - log_sigma - 0.5 * _LOG_2PI - 0.5 * z * z


def _filter_forward(
    arrays: _HmmArrays, values: np.ndarray, log_marginals: list[float] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Forward filter over an observed row, vectorized across draws.

    Returns log forward values ``(f_body, f_tail)`` of shape ``[S]`` at the
    last observed period. If ``log_marginals`` is a list, the per-period
    predictive log density ``log p(y_j | y_<j)`` (an ``[S]`` array per period
    ``j >= 2``) is appended in order.
    """
    s = arrays.n
    f_body = np.zeros(s)
    f_tail = np.full(s, -np.inf)
    with np.errstate(divide="ignore"):
        log_nu = (
            np.log(arrays.tail_return())
            if arrays.variant is Variant.HMM_NU
            else np.full(s, -np.inf)
        )
        log_1mnu = np.log1p(-arrays.tail_return())
        log_y = np.log(values)
        for j in range(2, len(values) + 1):
            pi = arrays.body_stay(j - 1)
            log_pi = np.log(pi)
            log_1mpi = np.log1p(-pi)
            mu_body, mu_tail, log_sigma = _emission_locations(arrays, j, log_y[j - 2])
            emit_body = _lognormal_logpdf(log_y[j - 1], mu_body, log_sigma)
            emit_tail = _lognormal_logpdf(log_y[j - 1], mu_tail, log_sigma)
            new_body = emit_body + np.logaddexp(log_pi + f_body, log_nu + f_tail)
            new_tail = emit_tail + np.logaddexp(log_1mpi + f_body, log_1mnu + f_tail)
            if log_marginals is not None:
                prev = np.logaddexp(f_body, f_tail)
                log_marginals.append(np.logaddexp(new_body, new_tail) - prev)
            f_body, f_tail = new_body, new_tail
    return f_body, f_tail


def simulate_predictions(
    draws: PosteriorDraws,
    train: Triangle,
    horizon: int | None = None,
    cap_base: float | None = None,
    seed: int = 0,
    indices: np.ndarray | None = None,
) -> PredictionSet:
    """Simulate trajectories for every unobserved cell up to ``horizon``.

    ``cap_base`` defaults to the training maximum; every simulated loss is
    clamped at ``100 * cap_base`` and subsequent steps condition on the
    clamped value, which keeps explosive draws finite.
    """
    horizon = horizon or train.n_development
    if horizon > train.n_development:
        raise ValidationError("horizon beyond the development axis is unsupported")
    if cap_base is None:
        cap_base = train.max_loss()
    if cap_base <= 0.0:
        raise ValidationError("cap_base must be positive")
    cap = CAP_MULTIPLIER * cap_base
    arrays = _HmmArrays(draws, indices)
    s = arrays.n
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    cells: list[tuple[int, int]] = []
    samples: list[np.ndarray] = []
    states: list[np.ndarray] = []
    for i in range(1, train.n_experience + 1):
        j_obs = int(train.row_lengths[i - 1])
        if j_obs >= horizon:
            continue
        row = train.row(i)
        f_body, f_tail = _filter_forward(arrays, row)
        total = np.logaddexp(f_body, f_tail)
        p_tail = np.exp(f_tail - total)
        state = (rng.random(s) < p_tail).astype(np.int8)
        y = np.full(s, row[-1])
        for j in range(j_obs + 1, horizon + 1):
            pi = arrays.body_stay(j - 1)
            nu = arrays.tail_return()
            stay_body = np.where(state == 0, pi, nu)
            state = (rng.random(s) >= stay_body).astype(np.int8)
            log_y_prev = np.log(y)
            mu_body, mu_tail, log_sigma = _emission_locations(arrays, j, log_y_prev)
            mu = np.where(state == 0, mu_body, mu_tail)
            noise = rng.standard_normal(s)
            with np.errstate(over="ignore"):
                y = np.exp(mu + np.exp(log_sigma) * noise)
            y = np.clip(y, _TINY_LOSS, cap)
            cells.append((i, j))
            samples.append(y.copy())
            states.append(state.copy())
    if not cells:
        return PredictionSet([], np.empty((0, s)), np.empty((0, s), dtype=np.int8), cap, seed)
    return PredictionSet(cells, np.stack(samples), np.stack(states), cap, seed)


def one_step_densities(
    draws: PosteriorDraws,
    train: Triangle,
    test: Sequence[TestCell],
    indices: np.ndarray | None = None,
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Per-cell, per-draw log predictive densities at observed test values.

    For each test row the filter runs over the training prefix and onward
    through the observed test values, so cell ``j`` is scored conditional on
    all observed values before it.
    """
    arrays = _HmmArrays(draws, indices)
    by_row: dict[int, list[TestCell]] = {}
    for i, j, value in test:
        if value <= 0.0:
            raise ValidationError(f"test value at ({i}, {j}) must be positive")
        by_row.setdefault(i, []).append((i, j, value))
    cells: list[tuple[int, int]] = []
    densities: list[np.ndarray] = []
    for i in sorted(by_row):
        row_cells = sorted(by_row[i], key=lambda cell: cell[1])
        j_obs = int(train.row_lengths[i - 1])
        expected = range(j_obs + 1, j_obs + 1 + len(row_cells))
        if [j for _, j, _ in row_cells] != list(expected):
            raise ValidationError(
                f"test cells for experience period {i} must extend the observed "
                "prefix contiguously"
            )
        values = np.concatenate([train.row(i), [v for _, _, v in row_cells]])
        log_marginals: list[np.ndarray] = []
        _filter_forward(arrays, values, log_marginals)
        for (ci, cj, _), ld in zip(row_cells, log_marginals[j_obs - 1 :]):
            cells.append((ci, cj))
            densities.append(ld)
    order = np.argsort([c[0] * 10_000 + c[1] for c in cells], kind="stable")
    cells = [cells[k] for k in order]
    densities = [densities[k] for k in order]
    return cells, np.stack(densities) if densities else np.empty((0, arrays.n))


def fan_quantiles(prediction: PredictionSet) -> list[tuple[int, int, list[float]]]:
    """Per-cell quantiles of the trajectory samples for fan-chart plotting."""
    rows = []
    for index, (i, j) in enumerate(prediction.cells):
        q = np.quantile(prediction.samples[index], FAN_QUANTILES)
        rows.append((i, j, [float(v) for v in q]))
    return rows
