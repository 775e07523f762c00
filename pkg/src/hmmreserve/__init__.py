"""Bayesian loss development with hidden Markov body/tail switching."""

from .errors import (
    ConfigurationError,
    HmmReserveError,
    NumericalError,
    ValidationError,
)
from .mcmc import SamplerConfig
from .model import (
    EmissionParams,
    ParameterDraw,
    ParameterSpace,
    PriorConfig,
    State,
    TransitionParams,
    Variant,
    emission_log_density,
    sigma,
    simulate_prior_predictive,
    transition_matrix,
)
from .inference import (
    ForwardResult,
    PosteriorDraws,
    forward_log_likelihood,
    log_posterior,
    sample_posterior,
    viterbi,
)
from .metrics import (
    combine_triangles,
    elpd,
    elpd_pointwise,
    pit,
    rmse_cell,
    score_difference,
)
from .predict import (
    PredictionSet,
    fan_quantiles,
    one_step_densities,
    simulate_predictions,
)
from .sbc import SbcReport, rank_statistic, run_sbc, state_recovery_accuracy, uniformity_band
from .triangle import (
    LinkRatioSummary,
    Triangle,
    empirical_link_ratios,
    load_triangle,
    split_upper_lower,
    summarize_link_ratios,
)
from .twostep import TwoStepConfig, fit_two_step, predict_two_step

__version__ = "0.1.0"
