"""Split R-hat and effective sample size on retained draws."""
from __future__ import annotations

import numpy as np


def _split_chains(chains: np.ndarray) -> np.ndarray:
    """Split each chain in half (dropping the middle draw if odd)."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected draws of shape (chains, iterations)")
    _, length = chains.shape
    half = length // 2
    return np.vstack([chains[:, :half], chains[:, length - half :]])


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction factor on split chains."""
    split = _split_chains(chains)
    m, n = split.shape
    if n < 2:
        return float("nan")
    chain_means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    between = n * chain_means.var(ddof=1)
    if within <= 0.0:
        return 1.0
    var_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(var_hat / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = len(x)
    centered = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    transform = np.fft.rfft(centered, nfft)
    acov = np.fft.irfft(transform * np.conj(transform), nfft)[:n].real
    return acov / n


def ess(chains: np.ndarray) -> float:
    """Effective sample size via Geyer's initial monotone sequence.

    Computed on split chains, matching the convention used for R-hat.
    """
    split = _split_chains(chains)
    m, n = split.shape
    if n < 4:
        return float("nan")
    acov = np.stack([_autocovariance(row) for row in split])
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    if within <= 0.0:
        return float(m * n)
    mean_acov = acov.mean(axis=0)
    var_plus = (n - 1) / n * within + split.mean(axis=1).var(ddof=1)
    if var_plus <= 0.0:
        return float(m * n)
    rho = 1.0 - (within - mean_acov) / var_plus
    rho[0] = 1.0
    # Geyer pairs: truncate at the first non-positive pair, enforce monotone.
    n_pairs = len(rho) // 2
    pairs = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    positive = np.nonzero(pairs <= 0.0)[0]
    cutoff = positive[0] if len(positive) else n_pairs
    if cutoff == 0:
        return float(m * n)
    pairs = np.minimum.accumulate(pairs[:cutoff])
    tau = max(-1.0 + 2.0 * pairs.sum(), 1e-8)
    return float(m * n / tau)
