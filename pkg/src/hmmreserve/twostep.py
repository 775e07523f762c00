"""Two-step baseline: separate body and tail fits around a fixed switch point.

The body sub-model is a Bayesian chain ladder (lognormal link ratios) fitted
on transitions into periods ``2..tau``; the tail sub-model is the decaying
growth curve fitted on transitions into periods ``rho1 < j <= rho2`` with its
own variance coefficients. Predictions switch deterministically from body to
tail factors after ``tau`` -- no latent state exists anywhere in this model.
Both sub-models use the same lognormal forms and priors as the switching
model, so score comparisons isolate the switching mechanism itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigurationError, ValidationError
from .inference import PosteriorDraws, compute_diagnostics
from .mcmc import SamplerConfig, run_sampler
from .model import PriorConfig
from .predict import (
    CAP_MULTIPLIER,
    PredictionSet,
    _lognormal_logpdf,
    _TINY_LOSS,
)
from .triangle import TestCell, Triangle

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class TwoStepConfig:
    """Switch-over period ``tau`` and tail-fitting window ``rho``.

    The tail is trained on transitions into periods ``rho[0] < j <= rho[1]``.
    Both constants are fixed before fitting.
    """

    tau: int
    rho: tuple[int, int]

    def __post_init__(self):
        rho = (int(self.rho[0]), int(self.rho[1]))
        object.__setattr__(self, "rho", rho)
        if self.tau < 2:
            raise ValidationError(f"tau must be >= 2, got {self.tau}")
        if not 2 <= rho[0] <= rho[1]:
            raise ValidationError(f"need 2 <= rho1 <= rho2, got {rho}")

    def validate_for(self, m_development: int) -> None:
        if self.tau > m_development:
            raise ConfigurationError(f"tau={self.tau} exceeds M={m_development}")
        if self.rho[1] > m_development:
            raise ConfigurationError(f"rho={self.rho} exceeds M={m_development}")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "rho": list(self.rho)}


def _transitions(train: Triangle, j_lo: int, j_hi: int):
    """Observed transitions into periods ``j_lo..j_hi`` as flat arrays."""
    js, log_y, log_prev = [], [], []
    for i in range(1, train.n_experience + 1):
        row = train.row(i)
        for j in range(max(j_lo, 2), min(j_hi, len(row)) + 1):
            js.append(j)
            log_y.append(math.log(row[j - 1]))
            log_prev.append(math.log(row[j - 2]))
    return np.asarray(js), np.asarray(log_y), np.asarray(log_prev)


class _BodyTarget:
    """Posterior over [log alpha_1..log alpha_{tau-1}, gamma1, gamma2]."""

    def __init__(self, train: Triangle, tau: int, priors: PriorConfig):
        self.tau = tau
        self.js, self.log_y, self.log_prev = _transitions(train, 2, tau)
        if len(self.js) == 0:
            raise ConfigurationError("no body transitions in the training data")
        self.alpha_idx = self.js - 2
        self.prior_scales = np.array([priors.alpha_scale(j) for j in range(1, tau)])
        self.priors = priors
        self.size = tau + 1

    def __call__(self, u: np.ndarray) -> float:
        log_alpha = u[: self.tau - 1]
        gamma1, gamma2 = u[self.tau - 1], u[self.tau]
        log_sigma = 0.5 * (gamma1 + gamma2 * self.js + self.log_prev)
        mu = log_alpha[self.alpha_idx] + self.log_prev
        loglik = float(_lognormal_logpdf(self.log_y, mu, log_sigma).sum())
        prior = float(
            (-0.5 * (log_alpha / self.prior_scales) ** 2 - np.log(self.prior_scales)).sum()
        ) - (self.tau - 1) * 0.5 * _LOG_2PI
        prior += _normal_term(gamma1, self.priors.gamma1_loc, self.priors.gamma1_scale)
        prior += _normal_term(gamma2, self.priors.gamma2_loc, self.priors.gamma2_scale)
        return loglik + prior


class _TailTarget:
    """Posterior over [anchored tail level, logit beta, gamma1, gamma2].

    As in the switching model, the growth curve is sampled through its level
    at an anchor period inside the fitting window, which keeps the level and
    decay coordinates nearly orthogonal.
    """

    size = 4

    def __init__(self, train: Triangle, rho: tuple[int, int], priors: PriorConfig):
        self.js, self.log_y, self.log_prev = _transitions(train, rho[0] + 1, rho[1])
        self.priors = priors
        self.anchor = round((rho[0] + 1 + rho[1]) / 2)

    @property
    def has_data(self) -> bool:
        return len(self.js) > 0

    def log_omega_of(self, w: float, beta_logit: float) -> float:
        return math.exp(w - self.anchor * float(log_expit(beta_logit)))

    def __call__(self, u: np.ndarray) -> float:
        w, beta_logit, gamma1, gamma2 = u
        log_omega = self.log_omega_of(w, beta_logit)
        if not math.isfinite(log_omega) or log_omega <= 0.0:
            return -math.inf
        beta = float(expit(beta_logit))
        log_sigma = 0.5 * (gamma1 + gamma2 * self.js + self.log_prev)
        mu = beta**self.js * log_omega + self.log_prev
        loglik = float(_lognormal_logpdf(self.log_y, mu, log_sigma).sum())
        prior = (
            _LOG_2
            + _normal_term(log_omega, 0.0, self.priors.omega_scale)
            + math.log(log_omega)
        )
        prior += _normal_term(beta_logit, self.priors.beta_logit_loc, self.priors.beta_logit_scale)
        prior += _normal_term(gamma1, self.priors.gamma1_loc, self.priors.gamma1_scale)
        prior += _normal_term(gamma2, self.priors.gamma2_loc, self.priors.gamma2_scale)
        return loglik + prior


def _normal_term(x: float, loc: float, scale: float) -> float:
    z = (x - loc) / scale
    return -0.5 * z * z - math.log(scale) - 0.5 * _LOG_2PI


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _sample_tail_prior(
    priors: PriorConfig, config: SamplerConfig, anchor: int
) -> np.ndarray:
    """Exact prior draws for the tail block when its window holds no data."""
    draws = np.empty((config.chains, config.iterations, 4))
    for chain in range(config.chains):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain]))
        half = np.abs(rng.normal(0.0, priors.omega_scale, size=config.iterations))
        beta_logit = rng.normal(
            priors.beta_logit_loc, priors.beta_logit_scale, size=config.iterations
        )
        draws[chain, :, 0] = (
            np.log(np.maximum(half, 1e-300)) + anchor * log_expit(beta_logit)
        )
        draws[chain, :, 1] = beta_logit
        draws[chain, :, 2] = rng.normal(
            priors.gamma1_loc, priors.gamma1_scale, size=config.iterations
        )
        draws[chain, :, 3] = rng.normal(
            priors.gamma2_loc, priors.gamma2_scale, size=config.iterations
        )
    return draws


def two_step_names(tau: int) -> list[str]:
    return (
        [f"alpha_{j}" for j in range(1, tau)]
        + ["gamma1_body", "gamma2_body", "omega", "beta", "gamma1_tail", "gamma2_tail"]
    )


def fit_two_step(
    train: Triangle,
    cfg: TwoStepConfig,
    priors: PriorConfig,
    config: SamplerConfig,
) -> PosteriorDraws:
    """Fit body and tail sub-models and zip their draws into one table.

    The sub-models share no parameters and are sampled independently (with
    distinct seed streams derived from the run seed). An empty tail window is
    allowed: the tail block then reverts to exact prior draws. An empty body
    is a configuration error.
    """
    cfg.validate_for(train.n_development)
    if config.chains < 2:
        raise ValidationError("need at least 2 chains for convergence diagnostics")
    body_target = _BodyTarget(train, cfg.tau, priors)
    body_config = SamplerConfig(
        chains=config.chains,
        warmup=config.warmup,
        iterations=config.iterations,
        thin=config.thin,
        seed=_derive_seed(config.seed, 1),
    )
    body_inits = []
    for chain in range(config.chains):
        rng = np.random.default_rng(np.random.SeedSequence([body_config.seed, chain, 1]))
        init = np.concatenate(
            [
                rng.normal(0.0, body_target.prior_scales),
                [
                    rng.normal(priors.gamma1_loc, priors.gamma1_scale),
                    rng.normal(priors.gamma2_loc, priors.gamma2_scale),
                ],
            ]
        )
        body_inits.append(init)
    body_draws, body_accept = run_sampler(body_target, body_inits, body_config)

    tail_config = SamplerConfig(
        chains=config.chains,
        warmup=config.warmup,
        iterations=config.iterations,
        thin=config.thin,
        seed=_derive_seed(config.seed, 2),
    )
    tail_target = _TailTarget(train, cfg.rho, priors)
    if tail_target.has_data:
        tail_inits = []
        for chain in range(config.chains):
            rng = np.random.default_rng(np.random.SeedSequence([tail_config.seed, chain, 1]))
            half = abs(rng.normal(0.0, priors.omega_scale))
            beta_logit = rng.normal(priors.beta_logit_loc, priors.beta_logit_scale)
            tail_inits.append(
                np.array(
                    [
                        math.log(max(half, 1e-300))
                        + tail_target.anchor * float(log_expit(beta_logit)),
                        beta_logit,
                        rng.normal(priors.gamma1_loc, priors.gamma1_scale),
                        rng.normal(priors.gamma2_loc, priors.gamma2_scale),
                    ]
                )
            )
        tail_draws, tail_accept = run_sampler(tail_target, tail_inits, tail_config)
    else:
        tail_draws = _sample_tail_prior(priors, tail_config, tail_target.anchor)
        tail_accept = [1.0] * config.chains

    chains, keep = config.chains, config.iterations
    names = two_step_names(cfg.tau)
    log_omega = np.exp(
        tail_draws[:, :, 0] - tail_target.anchor * log_expit(tail_draws[:, :, 1])
    )
    per_chain = np.empty((chains, keep, len(names)))
    per_chain[:, :, : cfg.tau - 1] = np.exp(body_draws[:, :, : cfg.tau - 1])
    per_chain[:, :, cfg.tau - 1] = body_draws[:, :, cfg.tau - 1]
    per_chain[:, :, cfg.tau] = body_draws[:, :, cfg.tau]
    per_chain[:, :, cfg.tau + 1] = np.exp(log_omega)
    per_chain[:, :, cfg.tau + 2] = expit(tail_draws[:, :, 1])
    per_chain[:, :, cfg.tau + 3] = tail_draws[:, :, 2]
    per_chain[:, :, cfg.tau + 4] = tail_draws[:, :, 3]
    diagnostics, converged = compute_diagnostics(names, per_chain)
    return PosteriorDraws(
        model="twostep",
        n_development=train.n_development,
        names=names,
        values=per_chain.reshape(chains * keep, len(names)),
        chain=np.repeat(np.arange(1, chains + 1), keep),
        iteration=np.tile(np.arange(1, keep + 1), chains),
        diagnostics=diagnostics,
        accept_rates=[float(a) for a in body_accept] + [float(a) for a in tail_accept],
        converged=converged,
    )


class _TwoStepArrays:
    def __init__(self, draws: PosteriorDraws, tau: int, indices: np.ndarray | None):
        idx = np.arange(draws.n_draws) if indices is None else np.asarray(indices)
        self.n = len(idx)
        self.tau = tau
        self.log_alpha = np.stack(
            [np.log(draws.column(f"alpha_{j}")[idx]) for j in range(1, tau)], axis=1
        )
        self.gamma1_body = draws.column("gamma1_body")[idx]
        self.gamma2_body = draws.column("gamma2_body")[idx]
        self.log_omega = np.log(draws.column("omega")[idx])
        self.beta = draws.column("beta")[idx]
        self.gamma1_tail = draws.column("gamma1_tail")[idx]
        self.gamma2_tail = draws.column("gamma2_tail")[idx]

    def location_and_scale(self, j: int, log_y_prev: np.ndarray):
        """Regime-matched lognormal location and log scale for period ``j``."""
        if j <= self.tau:
            mu = self.log_alpha[:, j - 2] + log_y_prev
            log_sigma = 0.5 * (self.gamma1_body + self.gamma2_body * j + log_y_prev)
            regime = 0
        else:
            mu = self.beta**j * self.log_omega + log_y_prev
            log_sigma = 0.5 * (self.gamma1_tail + self.gamma2_tail * j + log_y_prev)
            regime = 1
        return mu, log_sigma, regime


def predict_two_step(
    draws: PosteriorDraws,
    train: Triangle,
    cfg: TwoStepConfig,
    horizon: int | None = None,
    cap_base: float | None = None,
    seed: int = 0,
    indices: np.ndarray | None = None,
) -> PredictionSet:
    """Free-running trajectories under the deterministic regime split."""
    cfg.validate_for(train.n_development)
    horizon = horizon or train.n_development
    if horizon > train.n_development:
        raise ValidationError("horizon beyond the development axis is unsupported")
    if cap_base is None:
        cap_base = train.max_loss()
    if cap_base <= 0.0:
        raise ValidationError("cap_base must be positive")
    cap = CAP_MULTIPLIER * cap_base
    arrays = _TwoStepArrays(draws, cfg.tau, indices)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    cells, samples, states = [], [], []
    for i in range(1, train.n_experience + 1):
        j_obs = int(train.row_lengths[i - 1])
        if j_obs >= horizon:
            continue
        y = np.full(arrays.n, train.row(i)[-1])
        for j in range(j_obs + 1, horizon + 1):
            mu, log_sigma, regime = arrays.location_and_scale(j, np.log(y))
            noise = rng.standard_normal(arrays.n)
            with np.errstate(over="ignore"):
                y = np.exp(mu + np.exp(log_sigma) * noise)
            y = np.clip(y, _TINY_LOSS, cap)
            cells.append((i, j))
            samples.append(y.copy())
            states.append(np.full(arrays.n, regime, dtype=np.int8))
    if not cells:
        return PredictionSet(
            [], np.empty((0, arrays.n)), np.empty((0, arrays.n), dtype=np.int8), cap, seed
        )
    return PredictionSet(cells, np.stack(samples), np.stack(states), cap, seed)


def one_step_densities_two_step(
    draws: PosteriorDraws,
    train: Triangle,
    cfg: TwoStepConfig,
    test: Sequence[TestCell],
    indices: np.ndarray | None = None,
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Per-cell log densities at observed test values under the regime split."""
    cfg.validate_for(train.n_development)
    arrays = _TwoStepArrays(draws, cfg.tau, indices)
    by_row: dict[int, list[TestCell]] = {}
    for i, j, value in test:
        if value <= 0.0:
            raise ValidationError(f"test value at ({i}, {j}) must be positive")
        by_row.setdefault(i, []).append((i, j, value))
    cells, densities = [], []
    for i in sorted(by_row):
        row_cells = sorted(by_row[i], key=lambda cell: cell[1])
        j_obs = int(train.row_lengths[i - 1])
        expected = range(j_obs + 1, j_obs + 1 + len(row_cells))
        if [j for _, j, _ in row_cells] != list(expected):
            raise ValidationError(
                f"test cells for experience period {i} must extend the observed "
                "prefix contiguously"
            )
        y_prev = float(train.row(i)[-1])
        for _, j, value in row_cells:
            mu, log_sigma, _ = arrays.location_and_scale(j, np.log(y_prev))
            cells.append((i, j))
            densities.append(_lognormal_logpdf(math.log(value), mu, log_sigma))
            y_prev = value
    return cells, np.stack(densities) if densities else np.empty((0, arrays.n))
