"""Model parameterization: priors, transforms, emission and transition densities.

Three variants of the two-state (body/tail) switching model are supported:

- ``hmm``: scalar body-stay probability, tail absorbing.
- ``hmm-nu``: scalar body-stay probability plus a tail-to-body return probability.
- ``hmm-lag``: body-stay probabilities varying by development transition,
  constrained to be non-increasing, tail absorbing.

Losses develop multiplicatively: in the body state the expected factor is a
per-transition link ratio ``alpha_{j-1}``, in the tail state a decaying growth
factor ``omega ** (beta ** j)``. Observations are lognormal with a variance
proportional to the previous loss.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Union

import numpy as np
from scipy.special import expit, log_expit, logit

from .errors import NumericalError, ValidationError
from .triangle import Triangle

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)
_EXP_OVERFLOW = 709.0


class Variant(str, enum.Enum):
    HMM = "hmm"
    HMM_NU = "hmm-nu"
    HMM_LAG = "hmm-lag"


class State(enum.IntEnum):
    BODY = 0
    TAIL = 1


@dataclass(frozen=True)
class PriorConfig:
    """Locations and scales of the prior distributions.

    ``alpha_scale_rule`` fixes the prior sd of ``log alpha_j`` to ``1/j``,
    shrinking late body link ratios towards 1. ``omega_scale`` is the scale of
    the half-normal prior on ``log omega``.
    """

    pi_logit_loc: float = 0.0
    pi_logit_scale: float = 1.0
    nu_logit_loc: float = 0.0
    nu_logit_scale: float = 1.0
    alpha_scale_rule: str = "inverse_period"
    omega_scale: float = 1.0
    beta_logit_loc: float = 0.0
    beta_logit_scale: float = 1.0
    gamma1_loc: float = 0.0
    gamma1_scale: float = 1.0
    gamma2_loc: float = 0.0
    gamma2_scale: float = 1.0

    def __post_init__(self):
        for name in (
            "pi_logit_scale",
            "nu_logit_scale",
            "omega_scale",
            "beta_logit_scale",
            "gamma1_scale",
            "gamma2_scale",
        ):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"prior scale {name} must be > 0")
        if self.alpha_scale_rule != "inverse_period":
            raise ValidationError(f"unknown alpha_scale_rule {self.alpha_scale_rule!r}")

    def alpha_scale(self, j: int) -> float:
        """Prior sd of ``log alpha_j`` for transition index ``j`` (1-based)."""
        return 1.0 / j

    @classmethod
    def sbc_defaults(cls) -> "PriorConfig":
        """Priors for simulation-based calibration runs.

        Identical to the defaults except for informative priors on the
        variance coefficients, which tame overflow in simulated triangles.
        """
        return cls(gamma1_loc=-3.0, gamma1_scale=0.25, gamma2_loc=-1.0, gamma2_scale=0.1)

    def to_dict(self) -> dict:
        return {
            "alpha_scale_rule": self.alpha_scale_rule,
            "omega_scale": self.omega_scale,
            "beta_logit_loc": self.beta_logit_loc,
            "beta_logit_scale": self.beta_logit_scale,
            "gamma1_loc": self.gamma1_loc,
            "gamma1_scale": self.gamma1_scale,
            "gamma2_loc": self.gamma2_loc,
            "gamma2_scale": self.gamma2_scale,
            "pi_logit_loc": self.pi_logit_loc,
            "pi_logit_scale": self.pi_logit_scale,
            "nu_logit_loc": self.nu_logit_loc,
            "nu_logit_scale": self.nu_logit_scale,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PriorConfig":
        known = cls().to_dict()
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(f"unknown prior keys: {sorted(unknown)}")
        known.update(data)
        return cls(**known)

    @classmethod
    def from_json(cls, path: str | Path) -> "PriorConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"prior file not found: {path}")
        with path.open(encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class EmissionParams:
    """Emission parameters: body link ratios and tail growth curve."""

    alpha: np.ndarray
    omega: float
    beta: float
    gamma1: float
    gamma2: float

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if np.any(alpha <= 0.0):
            raise ValidationError("body link ratios alpha must be positive")
        if self.omega < 1.0:
            raise ValidationError(f"tail level omega must be >= 1, got {self.omega}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"tail decay beta must lie in (0, 1), got {self.beta}")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)


@dataclass(frozen=True)
class TransitionParams:
    """Body-stay probability (scalar, or per transition for hmm-lag) and
    tail-to-body return probability."""

    pi: Union[float, np.ndarray]
    nu: float = 0.0

    def __post_init__(self):
        pi = self.pi
        if np.ndim(pi) == 0:
            if not 0.0 <= float(pi) <= 1.0:
                raise ValidationError(f"pi must lie in [0, 1], got {pi}")
            object.__setattr__(self, "pi", float(pi))
        else:
            pi = np.asarray(pi, dtype=float)
            if np.any(pi < 0.0) or np.any(pi > 1.0):
                raise ValidationError("pi sequence entries must lie in [0, 1]")
            if np.any(np.diff(pi) > 0.0):
                raise ValidationError("pi sequence must be non-increasing")
            pi.setflags(write=False)
            object.__setattr__(self, "pi", pi)
        if not 0.0 <= self.nu < 1.0:
            raise ValidationError(f"nu must lie in [0, 1), got {self.nu}")

    def body_stay(self, d: int) -> float:
        """Body-stay probability for transition index ``d`` (1-based); beyond
        the fitted horizon the last value is reused."""
        if np.ndim(self.pi) == 0:
            return float(self.pi)
        return float(self.pi[min(d, len(self.pi)) - 1])


@dataclass(frozen=True)
class ParameterDraw:
    """One joint realization of emission and transition parameters."""

    variant: Variant
    phi: EmissionParams
    psi: TransitionParams

    def __post_init__(self):
        if self.variant is Variant.HMM_LAG:
            if np.ndim(self.psi.pi) == 0:
                raise ValidationError("hmm-lag requires a pi sequence")
            if len(self.psi.pi) != len(self.phi.alpha):
                raise ValidationError("hmm-lag needs one pi per development transition")
        elif np.ndim(self.psi.pi) != 0:
            raise ValidationError(f"{self.variant.value} uses a scalar pi")
        if self.variant in (Variant.HMM, Variant.HMM_LAG) and self.psi.nu != 0.0:
            raise ValidationError(f"{self.variant.value} fixes nu = 0")

    @property
    def alpha(self) -> np.ndarray:
        return self.phi.alpha

    @property
    def omega(self) -> float:
        return self.phi.omega

    @property
    def beta(self) -> float:
        return self.phi.beta

    @property
    def gamma1(self) -> float:
        return self.phi.gamma1

    @property
    def gamma2(self) -> float:
        return self.phi.gamma2

    @property
    def pi(self):
        return self.psi.pi

    @property
    def nu(self) -> float:
        return self.psi.nu


def sigma(gamma1: float, gamma2: float, j: int, y_prev: float) -> float:
    """Emission scale ``sqrt(y_prev * exp(gamma1 + gamma2 * j))``."""
    if j < 2:
        raise ValidationError(f"development period must be >= 2, got {j}")
    if y_prev <= 0.0:
        raise ValidationError(f"previous loss must be positive, got {y_prev}")
    exponent = gamma1 + gamma2 * j + math.log(y_prev)
    if exponent > _EXP_OVERFLOW:
        raise NumericalError(f"variance exponent {exponent:.1f} overflows")
    value = math.sqrt(math.exp(exponent))
    if value == 0.0:
        raise NumericalError("variance underflows to zero")
    return value


def emission_log_density(
    y: float,
    y_prev: float,
    state: State | int,
    phi: EmissionParams,
    j: int,
) -> float:
    """Lognormal log-density of ``y`` given the previous loss and the state.

    Body location is ``log(alpha_{j-1} * y_prev)``; tail location is
    ``log(omega ** (beta ** j) * y_prev)`` with the current period in the
    decay exponent.
    """
    if j < 2:
        raise ValidationError(f"development period must be >= 2, got {j}")
    if y <= 0.0 or y_prev <= 0.0:
        raise ValidationError("losses must be positive")
    state = State(state)
    log_y_prev = math.log(y_prev)
    if state is State.BODY:
        mu = math.log(phi.alpha[j - 2]) + log_y_prev
    else:
        mu = phi.beta**j * math.log(phi.omega) + log_y_prev
    log_sigma = 0.5 * (phi.gamma1 + phi.gamma2 * j + log_y_prev)
    z = (math.log(y) - mu) * math.exp(-log_sigma)
    value = -math.log(y) - log_sigma - 0.5 * _LOG_2PI - 0.5 * z * z
    if not math.isfinite(value):
        raise NumericalError(f"non-finite emission log-density at j={j}")
    return value


def transition_matrix(variant: Variant, psi: TransitionParams, d: int = 1) -> np.ndarray:
    """Row-stochastic 2x2 matrix for the move across transition index ``d``."""
    if d < 1:
        raise ValidationError(f"transition index must be >= 1, got {d}")
    pi = psi.body_stay(d)
    nu = 0.0 if variant in (Variant.HMM, Variant.HMM_LAG) else psi.nu
    return np.array([[pi, 1.0 - pi], [nu, 1.0 - nu]])


def _normal_logpdf(x, loc, scale):
    z = (np.asarray(x) - loc) / scale
    return -0.5 * z * z - np.log(scale) - 0.5 * _LOG_2PI


class ParameterSpace:
    """Bijection between a flat unconstrained vector and a :class:`ParameterDraw`.

    Unconstrained coordinates are, in order: the body-stay block (logit pi, or
    logit pi_1 plus log-gap coordinates for hmm-lag), logit nu for hmm-nu,
    ``log alpha_j``, the tail-level coordinate, logit beta, gamma1, gamma2.

    The tail growth curve is sampled through its level at an anchor period
    rather than at period zero: ``w = log(log omega * beta ** anchor)``. The
    curve's level and shape are nearly orthogonal in these coordinates, where
    parameterizing ``log omega`` directly leaves a banana-shaped ridge that a
    random-walk kernel cannot traverse. Priors are unchanged: normal on every
    other coordinate, half-normal on ``log omega`` with the exact Jacobian of
    the anchored transform.
    """

    def __init__(self, variant: Variant, m_development: int, priors: PriorConfig):
        if m_development < 2:
            raise ValidationError("need at least 2 development periods")
        self.variant = Variant(variant)
        self.m_development = m_development
        self.priors = priors
        self.tail_anchor = max(2, round(0.7 * m_development))
        m = m_development
        names: list[str] = []
        locs: list[float] = []
        scales: list[float] = []
        if self.variant is Variant.HMM_LAG:
            names.append("pi_logit_1")
            locs.append(priors.pi_logit_loc)
            scales.append(priors.pi_logit_scale)
            for d in range(2, m):
                names.append(f"pi_gap_{d}")
                locs.append(0.0)
                scales.append(1.0)
        else:
            names.append("pi_logit")
            locs.append(priors.pi_logit_loc)
            scales.append(priors.pi_logit_scale)
        if self.variant is Variant.HMM_NU:
            names.append("nu_logit")
            locs.append(priors.nu_logit_loc)
            scales.append(priors.nu_logit_scale)
        self._alpha_start = len(names)
        for j in range(1, m):
            names.append(f"log_alpha_{j}")
            locs.append(0.0)
            scales.append(priors.alpha_scale(j))
        self._omega_index = len(names)
        names.append("tail_level")
        locs.append(0.0)
        scales.append(priors.omega_scale)
        self._beta_index = len(names)
        names.append("beta_logit")
        locs.append(priors.beta_logit_loc)
        scales.append(priors.beta_logit_scale)
        names.append("gamma1")
        locs.append(priors.gamma1_loc)
        scales.append(priors.gamma1_scale)
        names.append("gamma2")
        locs.append(priors.gamma2_loc)
        scales.append(priors.gamma2_scale)
        self.names = names
        self.size = len(names)
        self._locs = np.asarray(locs)
        self._scales = np.asarray(scales)
        self._normal_mask = np.ones(self.size, dtype=bool)
        self._normal_mask[self._omega_index] = False
        self._n_pi = m - 1 if self.variant is Variant.HMM_LAG else 1

    def _pi_logits(self, u: np.ndarray) -> np.ndarray:
        if self.variant is Variant.HMM_LAG:
            logits = np.empty(self._n_pi)
            logits[0] = u[0]
            if self._n_pi > 1:
                logits[1:] = u[0] - np.cumsum(np.exp(u[1 : self._n_pi]))
            return logits
        return u[:1]

    def _log_omega_of(self, u: np.ndarray) -> float:
        """``log omega`` from the anchored tail-level coordinate."""
        log_beta = float(log_expit(u[self._beta_index]))
        return math.exp(u[self._omega_index] - self.tail_anchor * log_beta)

    def constrain(self, u: np.ndarray) -> ParameterDraw:
        """Map an unconstrained vector to natural-space parameters."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise ValidationError(f"expected vector of length {self.size}, got {u.shape}")
        pi_logits = self._pi_logits(u)
        pi = expit(pi_logits) if self.variant is Variant.HMM_LAG else float(expit(u[0]))
        nu = float(expit(u[self._n_pi])) if self.variant is Variant.HMM_NU else 0.0
        alpha = np.exp(u[self._alpha_start : self._omega_index])
        omega = float(np.exp(self._log_omega_of(u)))
        beta = float(expit(u[self._beta_index]))
        gamma1 = float(u[self._beta_index + 1])
        gamma2 = float(u[self._beta_index + 2])
        return ParameterDraw(
            self.variant,
            EmissionParams(alpha, omega, beta, gamma1, gamma2),
            TransitionParams(pi, nu),
        )

    def unconstrain(self, draw: ParameterDraw) -> np.ndarray:
        """Inverse of :meth:`constrain`; requires interior parameter values."""
        if draw.variant is not self.variant:
            raise ValidationError("draw variant does not match this space")
        u = np.empty(self.size)
        if self.variant is Variant.HMM_LAG:
            logits = logit(np.asarray(draw.pi))
            u[0] = logits[0]
            if self._n_pi > 1:
                gaps = -np.diff(logits)
                if np.any(gaps <= 0.0):
                    raise ValidationError("hmm-lag pi sequence must be strictly decreasing")
                u[1 : self._n_pi] = np.log(gaps)
        else:
            u[0] = logit(draw.pi)
        if self.variant is Variant.HMM_NU:
            u[self._n_pi] = logit(draw.nu)
        u[self._alpha_start : self._omega_index] = np.log(draw.alpha)
        log_omega = math.log(draw.omega)
        if log_omega <= 0.0:
            raise ValidationError("omega must exceed 1 to unconstrain")
        if not 0.0 < draw.beta < 1.0:
            raise ValidationError("beta must lie strictly inside (0, 1) to unconstrain")
        u[self._omega_index] = math.log(log_omega) + self.tail_anchor * math.log(draw.beta)
        u[self._beta_index] = logit(draw.beta)
        u[self._beta_index + 1] = draw.gamma1
        u[self._beta_index + 2] = draw.gamma2
        return u

    def log_prior(self, u: np.ndarray) -> float:
        """Log prior density over the unconstrained vector.

        Each normal prior is a density in its own coordinate; the half-normal
        prior on ``log omega`` picks up the Jacobian of the anchored
        tail-level transform (``d log omega / d w = log omega`` at fixed
        beta, so the log-Jacobian is ``log log omega``).
        """
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise ValidationError("unconstrained parameters must be finite")
        total = float(
            _normal_logpdf(
                u[self._normal_mask],
                self._locs[self._normal_mask],
                self._scales[self._normal_mask],
            ).sum()
        )
        log_omega = self._log_omega_of(u)
        if not math.isfinite(log_omega) or log_omega <= 0.0:
            return -math.inf
        total += (
            _LOG_2
            + float(_normal_logpdf(log_omega, 0.0, self.priors.omega_scale))
            + math.log(log_omega)
        )
        return total

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        """Draw an unconstrained vector from the prior."""
        u = rng.normal(self._locs, self._scales)
        half = abs(rng.normal(0.0, self.priors.omega_scale))
        log_half = math.log(half) if half > 0.0 else -745.0
        log_beta = float(log_expit(u[self._beta_index]))
        u[self._omega_index] = log_half + self.tail_anchor * log_beta
        return u

    def natural_names(self) -> list[str]:
        """Column names of the natural-space parameter table."""
        m = self.m_development
        if self.variant is Variant.HMM_LAG:
            names = [f"pi_{d}" for d in range(1, m)]
        else:
            names = ["pi"]
        if self.variant is Variant.HMM_NU:
            names.append("nu")
        names += [f"alpha_{j}" for j in range(1, m)]
        names += ["omega", "beta", "gamma1", "gamma2"]
        return names

    def natural_values(self, draw: ParameterDraw) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(draw.pi, dtype=float))]
        if self.variant is Variant.HMM_NU:
            parts.append([draw.nu])
        parts.append(draw.alpha)
        parts.append([draw.omega, draw.beta, draw.gamma1, draw.gamma2])
        return np.concatenate(parts)

    def emission_terms(self, u: np.ndarray) -> dict:
        """Likelihood-ready terms from an unconstrained vector.

        Works entirely in log space so that extreme proposals degrade to
        ``-inf`` likelihood contributions instead of overflowing.
        """
        u = np.asarray(u, dtype=float)
        pi_logits = self._pi_logits(u)
        terms = {
            "log_pi": log_expit(pi_logits),
            "log_1mpi": log_expit(-pi_logits),
            "log_alpha": u[self._alpha_start : self._omega_index],
            "log_omega": self._log_omega_of(u),
            "beta": float(expit(u[self._beta_index])),
            "gamma1": float(u[self._beta_index + 1]),
            "gamma2": float(u[self._beta_index + 2]),
        }
        if self.variant is Variant.HMM_NU:
            terms["log_nu"] = float(log_expit(u[self._n_pi]))
            terms["log_1mnu"] = float(log_expit(-u[self._n_pi]))
        else:
            terms["log_nu"] = -math.inf
            terms["log_1mnu"] = 0.0
        return terms

def likelihood_terms(draw: ParameterDraw) -> dict:
    """Likelihood-ready terms from natural parameters.

    Unlike :meth:`ParameterSpace.emission_terms` this accepts boundary values
    (pi of 0 or 1, omega of 1) used in degenerate scenarios.
    """
    with np.errstate(divide="ignore"):
        pi = np.atleast_1d(np.asarray(draw.pi, dtype=float))
        nu = draw.nu
        return {
            "log_pi": np.log(pi),
            "log_1mpi": np.log1p(-pi),
            "log_alpha": np.log(draw.alpha),
            "log_omega": math.log(draw.omega),
            "beta": draw.beta,
            "gamma1": draw.gamma1,
            "gamma2": draw.gamma2,
            "log_nu": math.log(nu) if nu > 0.0 else -math.inf,
            "log_1mnu": math.log1p(-nu),
        }


def log_prior(
    u: np.ndarray, variant: Variant, m_development: int, priors: PriorConfig
) -> float:
    """Functional form of :meth:`ParameterSpace.log_prior`."""
    return ParameterSpace(variant, m_development, priors).log_prior(u)


@dataclass(frozen=True)
class PriorPredictiveBundle:
    """One simulated dataset: parameters, latent states and loss values."""

    draw: ParameterDraw
    states: np.ndarray
    values: np.ndarray
    y_initial: float
    overflowed: bool

    def to_triangle(self) -> Triangle:
        if self.overflowed:
            raise NumericalError("simulated losses overflowed; regenerate with a new seed")
        n, m = self.values.shape
        return Triangle(n, m, self.values.copy(), np.full(n, m, dtype=int))


def simulate_prior_predictive(
    variant: Variant,
    n_experience: int,
    m_development: int,
    priors: PriorConfig,
    seed: int | np.random.Generator,
    y_initial: float = 1.0,
) -> PriorPredictiveBundle:
    """Draw parameters from the prior and simulate a full N x M triangle.

    Every row starts in the body state with loss ``y_initial`` (the first
    data point is not modelled). Multiplicative dynamics can overflow for
    extreme variance draws; the bundle is then flagged so callers can
    regenerate under a fresh seed.
    """
    if n_experience < 2 or m_development < 2:
        raise ValidationError("need at least a 2 x 2 triangle")
    if y_initial <= 0.0:
        raise ValidationError("y_initial must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    space = ParameterSpace(variant, m_development, priors)
    draw = space.constrain(space.sample_prior(rng))
    log_omega = math.log(draw.omega)
    states = np.zeros((n_experience, m_development), dtype=np.int8)
    values = np.full((n_experience, m_development), np.nan)
    values[:, 0] = y_initial
    overflowed = False
    for i in range(n_experience):
        y_prev = y_initial
        state = State.BODY
        for j in range(2, m_development + 1):
            stay = draw.psi.body_stay(j - 1) if state is State.BODY else draw.nu
            goes_body = rng.random() < stay
            state = State.BODY if goes_body else State.TAIL
            log_y_prev = math.log(y_prev)
            if state is State.BODY:
                mu = math.log(draw.alpha[j - 2]) + log_y_prev
            else:
                mu = draw.beta**j * log_omega + log_y_prev
            half_exponent = 0.5 * (draw.gamma1 + draw.gamma2 * j + log_y_prev)
            scale = math.exp(half_exponent) if half_exponent < _EXP_OVERFLOW else math.inf
            log_y = mu + scale * rng.standard_normal()
            y = math.exp(log_y) if log_y < _EXP_OVERFLOW else math.inf
            states[i, j - 1] = int(state)
            values[i, j - 1] = y
            if not math.isfinite(y) or y <= 0.0 or y > 1e300:
                overflowed = True
            y_prev = y if math.isfinite(y) and y > 0.0 else y_initial
    return PriorPredictiveBundle(draw, states, values, y_initial, overflowed)
