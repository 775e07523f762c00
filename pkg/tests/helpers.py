"""Shared test oracles: brute-force path enumeration and random fixtures."""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp

from hmmreserve.model import (
    EmissionParams,
    ParameterDraw,
    TransitionParams,
    Variant,
    emission_log_density,
    transition_matrix,
)

TIE_TOL = 1e-12


def path_log_density(row: np.ndarray, draw: ParameterDraw, path: tuple[int, ...]) -> float:
    """Joint log density of one state path and the observed row.

    ``path`` covers periods 2..J; period 1 is body by construction and its
    value is not modelled.
    """
    total = 0.0
    prev_state = 0
    for step, state in enumerate(path):
        j = step + 2
        prob = transition_matrix(draw.variant, draw.psi, d=j - 1)[prev_state, state]
        if prob == 0.0:
            return -math.inf
        total += math.log(prob)
        total += emission_log_density(row[j - 1], row[j - 2], state, draw.phi, j)
        prev_state = state
    return total


def enumerate_forward(row: np.ndarray, draw: ParameterDraw) -> float:
    """Log marginal likelihood by explicit enumeration of all 2^(J-1) paths."""
    length = len(row)
    if length == 1:
        return 0.0
    scores = [
        path_log_density(row, draw, path)
        for path in itertools.product((0, 1), repeat=length - 1)
    ]
    return float(logsumexp(scores))

def enumerate_viterbi(row: np.ndarray, draw: ParameterDraw, tol: float = TIE_TOL) -> np.ndarray:
    """Most likely path by enumeration; among near-ties (within ``tol``) the
    lexicographically body-first path wins."""
    length = len(row)
    best_path = (0,) * (length - 1)
    best_score = path_log_density(row, draw, best_path) if length > 1 else 0.0
    for path in itertools.product((0, 1), repeat=max(length - 1, 0)):
        score = path_log_density(row, draw, path)
        if score > best_score + tol:
            best_path, best_score = path, score
    return np.array((0,) + best_path, dtype=np.int8)


def random_draw(variant: Variant, m: int, rng: np.random.Generator) -> ParameterDraw:
    """Random interior parameter draw with moderate noise scales."""
    alpha = np.exp(rng.normal(0.0, 0.3, size=m - 1))
    omega = float(1.0 + abs(rng.normal(0.05, 0.05)) + 1e-4)
    beta = float(rng.uniform(0.05, 0.95))
    gamma1 = float(rng.normal(-1.0, 0.5))
    gamma2 = float(rng.normal(-0.3, 0.2))
    if variant is Variant.HMM_LAG:
        raw = np.sort(rng.uniform(0.05, 0.95, size=m - 1))[::-1]
        pi = np.ascontiguousarray(raw)
        nu = 0.0
    elif variant is Variant.HMM_NU:
        pi = float(rng.uniform(0.1, 0.95))
        nu = float(rng.uniform(0.02, 0.4))
    else:
        pi = float(rng.uniform(0.1, 0.95))
        nu = 0.0
    return ParameterDraw(
        variant,
        EmissionParams(alpha, omega, beta, gamma1, gamma2),
        TransitionParams(pi, nu),
    )


def random_row(length: int, rng: np.random.Generator) -> np.ndarray:
    """Random strictly positive loss row with mild multiplicative growth."""
    factors = np.exp(rng.normal(0.1, 0.3, size=length - 1))
    return 100.0 * np.concatenate([[1.0], np.cumprod(factors)])
