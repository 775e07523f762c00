"""Marginal likelihood, posterior sampling, diagnostics and state decoding.

The likelihood marginalizes the latent body/tail path of every experience
period with the forward algorithm, in log space throughout. Each row starts
in the body state and its first data point is not modelled, so rows with a
single observed cell contribute zero log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diagnostics import ess, split_rhat
from .errors import NumericalError, ValidationError
from .mcmc import SamplerConfig, run_sampler
from .model import (
    ParameterDraw,
    ParameterSpace,
    PriorConfig,
    State,
    Variant,
    likelihood_terms,
)
from .triangle import Triangle

_LOG_2PI = math.log(2.0 * math.pi)
_TIE_TOL = 1e-12

RHAT_THRESHOLD = 1.05
ESS_THRESHOLD = 100.0
_INIT_STREAM = 1


@dataclass(frozen=True)
class ForwardResult:
    """Forward pass over one triangle for a single parameter draw.

    ``log_forward[i, j - 1, k]`` is the log joint probability of the data in
    row ``i + 1`` up to period ``j`` and state ``k`` at ``j`` (NaN outside the
    observed prefix). ``filtered_last`` is the state distribution at each
    row's final observed period.
    """

    total: float
    row_totals: np.ndarray
    log_forward: np.ndarray
    filtered_last: np.ndarray


class TriangleWorkspace:
    """Precomputed per-cell quantities for repeated likelihood evaluation.

    Rows are internally sorted by decreasing observed length (the likelihood
    is exchangeable over rows) so each recursion step works on a contiguous
    prefix, and the emission inputs for all cells are flattened step-major so
    the per-draw emission block is a handful of vector operations.
    """

    def __init__(self, train: Triangle):
        self.train = train
        self.n = train.n_experience
        self.m = train.n_development
        lengths = train.row_lengths
        self.max_len = int(lengths.max())
        self.order = np.argsort(-lengths, kind="stable")
        sorted_lengths = lengths[self.order]
        log_values = np.log(train.values, where=np.isfinite(train.values),
                            out=np.full_like(train.values, np.nan))
        log_sorted = log_values[self.order]
        ratios, half_prev, log_y, j_flat = [], [], [], []
        self.step_slices: list[tuple[int, int]] = []
        self.step_active: list[int] = []
        start = 0
        for j in range(2, self.max_len + 1):
            active = int(np.count_nonzero(sorted_lengths >= j))
            self.step_active.append(active)
            cur = log_sorted[:active, j - 1]
            prev = log_sorted[:active, j - 2]
            ratios.append(cur - prev)
            half_prev.append(0.5 * prev)
            log_y.append(cur)
            j_flat.append(np.full(active, j, dtype=float))
            self.step_slices.append((start, start + active))
            start += active
        self.log_ratio = np.concatenate(ratios) if ratios else np.empty(0)
        self.half_log_prev = np.concatenate(half_prev) if half_prev else np.empty(0)
        self.log_y_flat = np.concatenate(log_y) if log_y else np.empty(0)
        self.j_flat = np.concatenate(j_flat) if j_flat else np.empty(0)
        self.alpha_idx = (self.j_flat - 2).astype(int)


def _forward_pass(
    workspace: TriangleWorkspace, terms: dict, full: bool
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Shared forward recursion; ``full`` also records the forward lattice."""
    n = workspace.n
    f_body = np.zeros(n)
    f_tail = np.full(n, -np.inf)
    lattice = None
    if full:
        lattice = np.full((n, workspace.m, 2), np.nan)
        lattice[:, 0, 0] = 0.0
        lattice[:, 0, 1] = -np.inf
    log_pi = terms["log_pi"]
    log_1mpi = terms["log_1mpi"]
    scalar_pi = log_pi.shape == (1,)
    n_pi = log_pi.shape[0]
    log_nu = terms["log_nu"]
    log_1mnu = terms["log_1mnu"]
    tail_absorbing = log_nu == -math.inf

    # emission log densities for every modelled cell in one vectorized block
    log_sigma = (
        0.5 * (terms["gamma1"] + terms["gamma2"] * workspace.j_flat)
        + workspace.half_log_prev
    )
    inv_sigma = np.exp(-log_sigma)
    beta = terms["beta"]
    with np.errstate(divide="ignore", over="ignore"):
        tail_location = (
            np.exp(workspace.j_flat * math.log(beta)) * terms["log_omega"]
            if 0.0 < beta < 1.0
            else beta ** workspace.j_flat * terms["log_omega"]
        )
    z_body = (workspace.log_ratio - terms["log_alpha"][workspace.alpha_idx]) * inv_sigma
    z_tail = (workspace.log_ratio - tail_location) * inv_sigma
    base = -workspace.log_y_flat - log_sigma - 0.5 * _LOG_2PI
    emit_body_flat = base - 0.5 * z_body * z_body
    emit_tail_flat = base - 0.5 * z_tail * z_tail

    for j in range(2, workspace.max_len + 1):
        step = j - 2
        active = workspace.step_active[step]
        lo, hi = workspace.step_slices[step]
        emit_body = emit_body_flat[lo:hi]
        emit_tail = emit_tail_flat[lo:hi]
        d = j - 1
        lp = log_pi[0] if scalar_pi else log_pi[min(d, n_pi) - 1]
        l1p = log_1mpi[0] if scalar_pi else log_1mpi[min(d, n_pi) - 1]
        prev_body = f_body[:active]
        prev_tail = f_tail[:active]
        if tail_absorbing:
            new_body = emit_body + lp + prev_body
        else:
            new_body = emit_body + np.logaddexp(lp + prev_body, log_nu + prev_tail)
        new_tail = emit_tail + np.logaddexp(l1p + prev_body, log_1mnu + prev_tail)
        f_body[:active] = new_body
        f_tail[:active] = new_tail
        if full:
            rows = workspace.order[:active]
            lattice[rows, j - 1, 0] = new_body
            lattice[rows, j - 1, 1] = new_tail
    sorted_totals = np.logaddexp(f_body, f_tail)
    row_totals = np.empty(n)
    row_totals[workspace.order] = sorted_totals
    return float(sorted_totals.sum()), row_totals, lattice


def _raise_non_finite(workspace: TriangleWorkspace, terms: dict) -> None:
    _, _, lattice = _forward_pass(workspace, terms, full=True)
    for i in range(workspace.n):
        for j in range(int(workspace.train.row_lengths[i])):
            if np.isnan(lattice[i, j]).any():
                raise NumericalError(f"non-finite likelihood at cell ({i + 1}, {j + 1})")
    raise NumericalError("non-finite likelihood")


def forward_log_likelihood(train: Triangle, draw: ParameterDraw) -> ForwardResult:
    """Marginal log-likelihood of the observed triangle under one draw."""
    workspace = TriangleWorkspace(train)
    terms = likelihood_terms(draw)
    total, row_totals, lattice = _forward_pass(workspace, terms, full=True)
    if math.isnan(total):
        _raise_non_finite(workspace, terms)
    last = lattice[np.arange(workspace.n), train.row_lengths - 1]
    filtered = np.exp(last - row_totals[:, None])
    filtered /= filtered.sum(axis=1, keepdims=True)
    return ForwardResult(total, row_totals, lattice, filtered)


class LogPosterior:
    """Callable unnormalized log posterior over unconstrained parameters."""

    def __init__(self, train: Triangle, space: ParameterSpace):
        if train.n_development != space.m_development:
            raise ValidationError("triangle and parameter space disagree on M")
        self.space = space
        self.workspace = TriangleWorkspace(train)

    def __call__(self, u: np.ndarray) -> float:
        prior = self.space.log_prior(u)
        if prior == -math.inf:
            return -math.inf
        terms = self.space.emission_terms(u)
        total, _, _ = _forward_pass(self.workspace, terms, full=False)
        if math.isnan(total):
            _raise_non_finite(self.workspace, terms)
        return prior + total


def log_posterior(
    u: np.ndarray, train: Triangle, variant: Variant, priors: PriorConfig
) -> float:
    """Log prior plus marginal log-likelihood at an unconstrained point."""
    return LogPosterior(train, ParameterSpace(variant, train.n_development, priors))(u)


def viterbi(row: np.ndarray, draw: ParameterDraw, tol: float = _TIE_TOL) -> np.ndarray:
    """Most likely state path for one observed row (ties resolved to body)."""
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or len(row) < 1:
        raise ValidationError("need a one-dimensional row of observed losses")
    length = len(row)
    if length - 1 > len(draw.alpha):
        raise ValidationError("row has more transitions than the draw's link ratios")
    path = np.zeros(length, dtype=np.int8)
    if length == 1:
        return path
    terms = likelihood_terms(draw)
    log_pi = terms["log_pi"]
    log_1mpi = terms["log_1mpi"]
    n_pi = len(log_pi)
    log_y = np.log(row)
    score_body, score_tail = 0.0, -math.inf
    back: list[tuple[int, int]] = []
    for j in range(2, length + 1):
        d = j - 1
        idx = min(d, n_pi) - 1
        log_sigma = 0.5 * (terms["gamma1"] + terms["gamma2"] * j) + 0.5 * log_y[j - 2]
        inv_sigma = math.exp(-log_sigma)
        ratio = log_y[j - 1] - log_y[j - 2]
        z_body = (ratio - terms["log_alpha"][j - 2]) * inv_sigma
        z_tail = (ratio - terms["beta"] ** j * terms["log_omega"]) * inv_sigma
        base = -log_y[j - 1] - log_sigma - 0.5 * _LOG_2PI
        emit_body = base - 0.5 * z_body * z_body
        emit_tail = base - 0.5 * z_tail * z_tail
        from_body = log_pi[idx] + score_body
        from_tail = terms["log_nu"] + score_tail
        pred_body = State.TAIL if from_tail > from_body + tol else State.BODY
        new_body = emit_body + max(from_body, from_tail)
        from_body = log_1mpi[idx] + score_body
        from_tail = terms["log_1mnu"] + score_tail
        pred_tail = State.TAIL if from_tail > from_body + tol else State.BODY
        new_tail = emit_tail + max(from_body, from_tail)
        back.append((int(pred_body), int(pred_tail)))
        score_body, score_tail = new_body, new_tail
    state = int(State.TAIL) if score_tail > score_body + tol else int(State.BODY)
    path[length - 1] = state
    for j in range(length, 2, -1):
        state = back[j - 2][state]
        path[j - 2] = state
    return path


@dataclass
class PosteriorDraws:
    """Retained MCMC draws in natural space with provenance and diagnostics."""

    model: str
    n_development: int
    names: list[str]
    values: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    diagnostics: dict[str, dict[str, float]]
    accept_rates: list[float]
    converged: bool

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise ValidationError(f"no parameter named {name!r}") from None

    def max_rhat(self) -> float:
        return max(d["rhat"] for d in self.diagnostics.values())

    def min_ess(self) -> float:
        return min(d["ess"] for d in self.diagnostics.values())


def compute_diagnostics(
    names: list[str], per_chain: np.ndarray
) -> tuple[dict[str, dict[str, float]], bool]:
    """Per-parameter split R-hat / ESS plus the overall convergence verdict."""
    diagnostics: dict[str, dict[str, float]] = {}
    for p, name in enumerate(names):
        series = per_chain[:, :, p]
        diagnostics[name] = {"rhat": split_rhat(series), "ess": ess(series)}
    converged = all(
        d["rhat"] <= RHAT_THRESHOLD and d["ess"] >= ESS_THRESHOLD
        for d in diagnostics.values()
    )
    return diagnostics, converged


def sample_posterior(
    train: Triangle,
    variant: Variant,
    priors: PriorConfig,
    config: SamplerConfig,
) -> PosteriorDraws:
    """Sample the posterior with slice-within-Gibbs chains.

    Chains start from independent prior draws; warmup explores, restarts all
    chains in the best basin found, and adapts the slice direction basis
    (see :mod:`hmmreserve.mcmc`). Non-convergence (split R-hat above 1.05 or
    ESS below 100 for any parameter) is reported through ``converged``,
    never raised; callers decide what to do with such fits.
    """
    if config.chains < 2:
        raise ValidationError("need at least 2 chains for convergence diagnostics")
    space = ParameterSpace(variant, train.n_development, priors)
    target = LogPosterior(train, space)
    inits = []
    for chain_index in range(config.chains):
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, chain_index, _INIT_STREAM])
        )
        inits.append(space.sample_prior(rng))
    unconstrained, accept_rates = run_sampler(target, inits, config)
    chains, keep, _ = unconstrained.shape
    natural_names = space.natural_names()
    n_params = len(natural_names)
    per_chain = np.empty((chains, keep, n_params))
    for c in range(chains):
        for k in range(keep):
            per_chain[c, k] = space.natural_values(space.constrain(unconstrained[c, k]))
    diagnostics, converged = compute_diagnostics(natural_names, per_chain)
    values = per_chain.reshape(chains * keep, n_params)
    chain_index = np.repeat(np.arange(1, chains + 1), keep)
    iteration = np.tile(np.arange(1, keep + 1), chains)
    return PosteriorDraws(
        model=Variant(variant).value,
        n_development=train.n_development,
        names=natural_names,
        values=values,
        chain=chain_index,
        iteration=iteration,
        diagnostics=diagnostics,
        accept_rates=accept_rates,
        converged=converged,
    )


def hmm_draw_at(draws: PosteriorDraws, index: int) -> ParameterDraw:
    """Rebuild a typed parameter draw from one row of the natural table."""
    from .model import EmissionParams, TransitionParams

    variant = Variant(draws.model)
    m = draws.n_development
    row = draws.values[index]
    name_to_value = dict(zip(draws.names, row))
    if variant is Variant.HMM_LAG:
        pi = np.array([name_to_value[f"pi_{d}"] for d in range(1, m)])
    else:
        pi = float(name_to_value["pi"])
    nu = float(name_to_value.get("nu", 0.0))
    alpha = np.array([name_to_value[f"alpha_{j}"] for j in range(1, m)])
    return ParameterDraw(
        variant,
        EmissionParams(
            alpha,
            float(name_to_value["omega"]),
            float(name_to_value["beta"]),
            float(name_to_value["gamma1"]),
            float(name_to_value["gamma2"]),
        ),
        TransitionParams(pi, nu),
    )
