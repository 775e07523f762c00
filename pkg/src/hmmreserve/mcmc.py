"""Posterior sampling kernel: slice-within-Gibbs along adapted directions.

Each iteration ("sweep") slice-samples the target once along every column of
an adapted direction basis (Neal 2003 stepping-out/shrinkage updates, which
need no step-size tuning and adapt to the local conditional scale). Warmup
runs in two stages: every chain first explores from its own start until its
log density stalls, then all chains restart from a jittered copy of the best
point found, which discards negligible-mass local modes that a random-walk
style kernel cannot leave. The direction basis and widths are then re-fit
periodically from the eigendecomposition of the accumulated sweep history
(floor-regularized so unexplored directions cannot collapse) and frozen
before sampling, so the sampling-phase kernel is exactly invariant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError

_COV_FLOOR = 0.01
_COV_REFRESH = 25
_STALL_SWEEPS = 25
_MAX_STEP_OUT = 8
_SHRINK_LIMIT = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    """MCMC run settings, all counted in sweeps over the direction basis.

    ``iterations`` is the number of retained draws per chain; ``thin`` is the
    number of sweeps per retained draw.
    """

    chains: int = 4
    warmup: int = 1000
    iterations: int = 1000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValidationError("need at least one chain")
        if self.warmup < 0 or self.iterations < 1 or self.thin < 1:
            raise ValidationError("warmup >= 0, iterations >= 1 and thin >= 1 required")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "chains": self.chains,
            "warmup": self.warmup,
            "iterations": self.iterations,
            "thin": self.thin,
            "seed": self.seed,
        }


class _RunningMoments:
    """Welford accumulator for the sweep-history covariance."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += np.outer(delta, x - self.mean)

    def covariance(self) -> np.ndarray:
        return self._m2 / max(self.count - 1, 1)


def _basis_from_covariance(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen directions and slice widths from a history covariance.

    Eigenvalues are floored at a fraction of the largest one: a chain that
    has not explored some direction yet would otherwise shrink its own moves
    there, which is self-reinforcing.
    """
    values, vectors = np.linalg.eigh((cov + cov.T) / 2.0)
    floor = _COV_FLOOR * max(float(values.max()), 1e-10)
    values = np.maximum(values, floor)
    return vectors, 2.0 * np.sqrt(values)


class _Kernel:
    """One chain's state: position, direction basis, eval accounting."""

    def __init__(
        self,
        log_density: Callable[[np.ndarray], float],
        x: np.ndarray,
        rng: np.random.Generator,
    ):
        self.log_density = log_density
        self.x = np.asarray(x, dtype=float).copy()
        self.dim = self.x.size
        self.lp = float(log_density(self.x))
        if math.isnan(self.lp):
            raise ValidationError("log density is NaN at the initial point")
        self.rng = rng
        self.directions = np.eye(self.dim)
        self.widths = np.ones(self.dim)
        self.proposals = 0
        self.accepted = 0

    def _slice_along(self, direction: np.ndarray, width: float) -> None:
        """One stepping-out/shrinkage slice update along ``direction``."""
        rng = self.rng
        log_height = self.lp + math.log(rng.random())
        lo = -width * rng.random()
        hi = lo + width
        budget = int(rng.integers(0, _MAX_STEP_OUT + 1))
        lo_budget, hi_budget = budget, _MAX_STEP_OUT - budget
        while lo_budget > 0:
            if float(self.log_density(self.x + lo * direction)) <= log_height:
                break
            lo -= width
            lo_budget -= 1
        while hi_budget > 0:
            if float(self.log_density(self.x + hi * direction)) <= log_height:
                break
            hi += width
            hi_budget -= 1
        while True:
            offset = lo + (hi - lo) * rng.random()
            candidate = self.x + offset * direction
            lp_candidate = float(self.log_density(candidate))
            self.proposals += 1
            if lp_candidate > log_height:
                self.x = candidate
                self.lp = lp_candidate
                self.accepted += 1
                return
            if offset < 0.0:
                lo = offset
            else:
                hi = offset
            if hi - lo < _SHRINK_LIMIT * width:
                return

    def sweep(self) -> None:
        for k in range(self.dim):
            self._slice_along(self.directions[:, k], float(self.widths[k]))

    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else 1.0


def _explore(kernel: _Kernel, max_sweeps: int, stall_limit: int = _STALL_SWEEPS) -> None:
    """Climb with axis-aligned sweeps until the log density stalls."""
    best = kernel.lp
    stall = 0
    for _ in range(max_sweeps):
        kernel.sweep()
        if kernel.lp > best + 1e-9:
            best = kernel.lp
            stall = 0
        else:
            stall += 1
            if stall >= stall_limit:
                return


def _adapt(kernel: _Kernel, sweeps: int) -> None:
    """Re-fit the direction basis periodically from the sweep history."""
    moments = _RunningMoments(kernel.dim)
    for t in range(1, sweeps + 1):
        kernel.sweep()
        moments.update(kernel.x)
        if moments.count >= max(kernel.dim, 10) and t % _COV_REFRESH == 0:
            kernel.directions, kernel.widths = _basis_from_covariance(
                moments.covariance()
            )
    if moments.count >= max(kernel.dim, 10):
        kernel.directions, kernel.widths = _basis_from_covariance(moments.covariance())


def run_sampler(
    log_density: Callable[[np.ndarray], float],
    inits: list[np.ndarray],
    config: SamplerConfig,
) -> tuple[np.ndarray, list[float]]:
    """Run all chains; returns draws ``[chains, iterations, d]`` and per-chain
    slice acceptance statistics (accepted point proposals over proposals).

    Chain ``c`` draws from the generator seeded with ``(config.seed, c)`` and
    chains execute sequentially, so results are reproducible draw for draw.
    """
    if len(inits) != config.chains:
        raise ValidationError("need one initial point per chain")
    kernels = []
    for chain_index, init in enumerate(inits):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain_index]))
        kernels.append(_Kernel(log_density, init, rng))

    if config.warmup > 0:
        explore_sweeps = max(config.warmup // 3, 1)
        adapt_sweeps = config.warmup - explore_sweeps
        for kernel in kernels:
            _explore(kernel, explore_sweeps)
        best = max(kernels, key=lambda k: k.lp)
        best_x = best.x.copy()
        best_lp = best.lp
        for kernel in kernels:
            jitter = 0.1 * kernel.rng.standard_normal(kernel.dim)
            kernel.x = best_x + jitter
            kernel.lp = float(log_density(kernel.x))
            if not math.isfinite(kernel.lp):
                kernel.x = best_x.copy()
                kernel.lp = best_lp
            _adapt(kernel, adapt_sweeps)

    draws = []
    accept_rates = []
    for kernel in kernels:
        kernel.proposals = 0
        kernel.accepted = 0
        kept = np.empty((config.iterations, kernel.dim))
        total = config.iterations * config.thin
        for t in range(total):
            kernel.sweep()
            if (t + 1) % config.thin == 0:
                kept[(t + 1) // config.thin - 1] = kernel.x
        draws.append(kept)
        accept_rates.append(kernel.acceptance_rate())
    return np.stack(draws), accept_rates


def run_chain(
    log_density: Callable[[np.ndarray], float],
    init: np.ndarray,
    warmup: int,
    keep: int,
    thin: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Single-chain variant of :func:`run_sampler` (no cross-chain restart)."""
    kernel = _Kernel(log_density, init, rng)
    if warmup > 0:
        explore_sweeps = max(warmup // 3, 1)
        _explore(kernel, explore_sweeps)
        _adapt(kernel, warmup - explore_sweeps)
    kernel.proposals = 0
    kernel.accepted = 0
    kept = np.empty((keep, kernel.dim))
    for t in range(keep * thin):
        kernel.sweep()
        if (t + 1) % thin == 0:
            kept[(t + 1) // thin - 1] = kernel.x
    return kept, kernel.acceptance_rate()
