"""Simulation-based calibration: generate, fit, rank, test uniformity.

Each replication draws parameters and a full triangle from the prior
predictive, fits the model to the upper diagonal (with the first row's final
cell additionally held out so the ultimate-loss rank scores a genuine
prediction), and computes rank statistics of every scalar parameter, the
joint log-likelihood on the training cells, and the held-out ultimate loss,
over a thinned subset of the retained draws. Correct implementations produce
uniform ranks; latent-state recovery accuracy is tracked alongside.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binom, chisquare

from .errors import NumericalError, ValidationError
from .inference import (
    PosteriorDraws,
    TriangleWorkspace,
    _forward_pass,
    hmm_draw_at,
    sample_posterior,
    viterbi,
)
from .mcmc import SamplerConfig
from .model import (
    ParameterSpace,
    PriorConfig,
    Variant,
    likelihood_terms,
    simulate_prior_predictive,
)
from .predict import simulate_predictions
from .triangle import Triangle, split_upper_lower

DEFAULT_BINS = 20
_MAX_REGENERATIONS = 1000

SamplerFn = Callable[[Triangle, Variant, PriorConfig, SamplerConfig], PosteriorDraws]


def rank_statistic(simulated: float, posterior_values: np.ndarray) -> int:
    """Number of posterior values strictly below the simulated value."""
    posterior_values = np.asarray(posterior_values)
    if posterior_values.size == 0:
        raise ValidationError("rank statistic needs a non-empty posterior sample")
    return int(np.count_nonzero(posterior_values < simulated))


def bin_index(rank: int, s_thin: int, bins: int) -> int:
    """Histogram bin of a rank in 0..s_thin (bins cover 21 or 20 ranks each
    when s_thin + 1 is not divisible by the bin count)."""
    return min(rank * bins // (s_thin + 1), bins - 1)


def bin_probabilities(s_thin: int, bins: int) -> np.ndarray:
    """Exact per-bin probabilities of a discrete uniform rank on 0..s_thin."""
    counts = np.zeros(bins)
    for rank in range(s_thin + 1):
        counts[bin_index(rank, s_thin, bins)] += 1
    return counts / (s_thin + 1)


def bin_counts(ranks: Sequence[int], s_thin: int, bins: int) -> np.ndarray:
    counts = np.zeros(bins, dtype=int)
    for rank in ranks:
        if not 0 <= rank <= s_thin:
            raise ValidationError(f"rank {rank} outside 0..{s_thin}")
        counts[bin_index(rank, s_thin, bins)] += 1
    return counts


def uniformity_band(r_kept: int, bins: int, level: float = 0.99) -> tuple[int, int]:
    """Central ``level`` interval of Binomial(r_kept, 1/bins) per-bin counts."""
    if bins < 1:
        raise ValidationError("need at least one bin")
    if r_kept == 0:
        return 0, 0
    if bins == 1:
        return r_kept, r_kept
    tail = (1.0 - level) / 2.0
    lo = int(binom.ppf(tail, r_kept, 1.0 / bins))
    hi = int(binom.ppf(1.0 - tail, r_kept, 1.0 / bins))
    return lo, hi


def chi_square_uniformity(
    ranks: Sequence[int], s_thin: int, bins: int = DEFAULT_BINS
) -> float:
    """P-value of the chi-square test of rank uniformity."""
    counts = bin_counts(ranks, s_thin, bins)
    expected = bin_probabilities(s_thin, bins) * len(ranks)
    return float(chisquare(counts, f_exp=expected).pvalue)


def state_recovery_accuracy(
    true_states: np.ndarray, recovered: np.ndarray, mask: np.ndarray
) -> float:
    """Fraction of matching states over masked cells with j >= 2."""
    true_states = np.asarray(true_states)
    recovered = np.asarray(recovered)
    mask = np.asarray(mask, dtype=bool).copy()
    if true_states.shape != recovered.shape or mask.shape != true_states.shape:
        raise ValidationError("state arrays must share one shape")
    mask[:, 0] = False
    total = int(mask.sum())
    if total == 0:
        raise ValidationError("no cells to score")
    return float(np.count_nonzero(true_states[mask] == recovered[mask]) / total)


def hdi(values: Sequence[float], mass: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``mass`` of the empirical distribution."""
    ordered = np.sort(np.asarray(values, dtype=float))
    n = len(ordered)
    if n == 0:
        raise ValidationError("empty sample")
    take = max(int(math.ceil(mass * n)), 1)
    widths = ordered[take - 1 :] - ordered[: n - take + 1]
    start = int(np.argmin(widths))
    return float(ordered[start]), float(ordered[start + take - 1])


@dataclass(frozen=True)
class SbcReplication:
    index: int
    converged: bool
    regenerations: int
    ranks: dict[str, int]
    accuracy: float


@dataclass(frozen=True)
class SbcReport:
    variant: str
    n_experience: int
    m_development: int
    s_thin: int
    bins: int
    quantities: list[str]
    replications: list[SbcReplication]

    @property
    def kept(self) -> list[SbcReplication]:
        return [r for r in self.replications if r.converged]

    @property
    def dropped(self) -> int:
        return len(self.replications) - len(self.kept)

    def ranks_for(self, quantity: str) -> list[int]:
        return [r.ranks[quantity] for r in self.kept]

    def bin_counts_for(self, quantity: str) -> np.ndarray:
        return bin_counts(self.ranks_for(quantity), self.s_thin, self.bins)

    def band(self, level: float = 0.99) -> tuple[int, int]:
        return uniformity_band(len(self.kept), self.bins, level)

    def chi_square_pvalues(self) -> dict[str, float | None]:
        if not self.kept:
            return {q: None for q in self.quantities}
        return {
            q: chi_square_uniformity(self.ranks_for(q), self.s_thin, self.bins)
            for q in self.quantities
        }

    def accuracy_summary(self) -> dict[str, float | None]:
        accuracies = [r.accuracy for r in self.kept]
        if not accuracies:
            return {"mean": None, "hdi_lo": None, "hdi_hi": None}
        lo, hi = hdi(accuracies, 0.95)
        return {"mean": float(np.mean(accuracies)), "hdi_lo": lo, "hdi_hi": hi}

    def to_dict(self) -> dict:
        band = self.band()
        return {
            "variant": self.variant,
            "n_experience": self.n_experience,
            "m_development": self.m_development,
            "s_thin": self.s_thin,
            "bins": self.bins,
            "replications": len(self.replications),
            "kept": len(self.kept),
            "dropped": self.dropped,
            "regenerations": sum(r.regenerations for r in self.replications),
            "band_99": [band[0], band[1]],
            "chi_square_pvalues": self.chi_square_pvalues(),
            "bin_counts": {q: self.bin_counts_for(q).tolist() for q in self.quantities},
            "accuracy": self.accuracy_summary(),
        }


def _derive_seed(*tags: int) -> int:
    return int(np.random.SeedSequence(list(tags)).generate_state(1)[0])


def _modal_states(
    train: Triangle,
    thinned_draws: list,
    prediction_states: np.ndarray,
    prediction_cells: list[tuple[int, int]],
) -> np.ndarray:
    """Modal recovered state per cell: Viterbi on training, samples on test."""
    n, m = train.n_experience, train.n_development
    recovered = np.zeros((n, m), dtype=np.int8)
    for i in range(1, n + 1):
        row = train.row(i)
        if len(row) < 2:
            continue
        tail_votes = np.zeros(len(row))
        for draw in thinned_draws:
            tail_votes += viterbi(row, draw)
        recovered[i - 1, : len(row)] = (tail_votes * 2 > len(thinned_draws)).astype(np.int8)
    s = prediction_states.shape[1] if len(prediction_cells) else 0
    for index, (i, j) in enumerate(prediction_cells):
        tail_votes = int(prediction_states[index].sum())
        recovered[i - 1, j - 1] = np.int8(tail_votes * 2 > s)
    return recovered


def run_replication(
    index: int,
    variant: Variant,
    n_experience: int,
    m_development: int,
    priors: PriorConfig,
    config: SamplerConfig,
    thin: int,
    seed: int,
    sampler: SamplerFn | None = None,
) -> SbcReplication:
    """One full SBC replication: simulate, fit, rank, score state recovery."""
    sampler = sampler or sample_posterior
    regenerations = 0
    while True:
        bundle = simulate_prior_predictive(
            variant,
            n_experience,
            m_development,
            priors,
            seed=np.random.default_rng(
                np.random.SeedSequence([seed, index, regenerations])
            ),
        )
        if not bundle.overflowed:
            break
        regenerations += 1
        if regenerations > _MAX_REGENERATIONS:
            raise NumericalError("prior predictive keeps overflowing; check priors")
    full = bundle.to_triangle()
    train, test = split_upper_lower(full)
    # hold the first row's final cell out of the fit so its rank scores a
    # genuine posterior predictive
    lengths = train.row_lengths.copy()
    lengths[0] -= 1
    train = train.with_row_lengths(lengths)
    test = sorted(test + [(1, m_development, float(full.values[0, m_development - 1]))])

    fit_config = SamplerConfig(
        chains=config.chains,
        warmup=config.warmup,
        iterations=config.iterations,
        thin=config.thin,
        seed=_derive_seed(seed, index, 10_001),
    )
    draws = sampler(train, variant, priors, fit_config)
    if not draws.converged:
        return SbcReplication(index, False, regenerations, {}, float("nan"))

    total = draws.n_draws
    if thin < 1 or total % thin != 0:
        raise ValidationError("thin must divide the number of retained draws")
    thinned_idx = np.arange(thin - 1, total, thin)
    space = ParameterSpace(variant, m_development, priors)
    truth = space.natural_values(bundle.draw)
    ranks: dict[str, int] = {}
    for p, name in enumerate(draws.names):
        ranks[name] = rank_statistic(truth[p], draws.values[thinned_idx, p])

    workspace = TriangleWorkspace(train)
    thinned_draws = [hmm_draw_at(draws, int(k)) for k in thinned_idx]
    loglik_true = _forward_pass(workspace, likelihood_terms(bundle.draw), full=False)[0]
    loglik_posterior = np.array(
        [_forward_pass(workspace, likelihood_terms(d), full=False)[0] for d in thinned_draws]
    )
    ranks["joint_log_lik"] = rank_statistic(loglik_true, loglik_posterior)

    prediction = simulate_predictions(
        draws,
        train,
        horizon=m_development,
        cap_base=full.max_loss(),
        seed=_derive_seed(seed, index, 10_002),
        indices=thinned_idx,
    )
    ultimate_idx = prediction.cell_index(1, m_development)
    ranks["ultimate_1"] = rank_statistic(
        float(full.values[0, m_development - 1]), prediction.samples[ultimate_idx]
    )

    recovered = _modal_states(train, thinned_draws, prediction.states, prediction.cells)
    mask = np.zeros((n_experience, m_development), dtype=bool)
    for i in range(n_experience):
        mask[i, : train.row_lengths[i]] = True
    for i, j, _ in test:
        mask[i - 1, j - 1] = True
    accuracy = state_recovery_accuracy(bundle.states, recovered, mask)
    return SbcReplication(index, True, regenerations, ranks, accuracy)


def _replicate(args) -> SbcReplication:
    return run_replication(*args)


def run_sbc(
    variant: Variant,
    n_experience: int,
    m_development: int,
    priors: PriorConfig | None = None,
    replications: int = 1000,
    config: SamplerConfig | None = None,
    thin: int = 10,
    seed: int = 0,
    bins: int = DEFAULT_BINS,
    n_jobs: int = 1,
    sampler: SamplerFn | None = None,
) -> SbcReport:
    """Run the calibration batch; deterministic in ``seed`` regardless of
    ``n_jobs`` (replication r uses seed streams derived from (seed, r))."""
    if replications < 1:
        raise ValidationError("need at least one replication")
    priors = priors or PriorConfig.sbc_defaults()
    config = config or SamplerConfig(chains=4, warmup=1000, iterations=1000, thin=1)
    if (config.chains * config.iterations) % thin != 0:
        raise ValidationError("thin must divide the number of retained draws")
    s_thin = config.chains * config.iterations // thin
    args = [
        (r, Variant(variant), n_experience, m_development, priors, config, thin, seed, sampler)
        for r in range(replications)
    ]
    if n_jobs > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate, args))
    else:
        results = [_replicate(a) for a in args]
    space = ParameterSpace(Variant(variant), m_development, priors)
    quantities = space.natural_names() + ["joint_log_lik", "ultimate_1"]
    return SbcReport(
        variant=Variant(variant).value,
        n_experience=n_experience,
        m_development=m_development,
        s_thin=s_thin,
        bins=bins,
        quantities=quantities,
        replications=results,
    )


def ranks_table(report: SbcReport) -> list[tuple[int, str, int, bool]]:
    """Long-format rows ``(replication, quantity, rank, converged)``."""
    rows = []
    for replication in report.replications:
        if replication.converged:
            for quantity in report.quantities:
                rows.append(
                    (replication.index, quantity, replication.ranks[quantity], True)
                )
        else:
            for quantity in report.quantities:
                rows.append((replication.index, quantity, -1, False))
    return rows
