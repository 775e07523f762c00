import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from hmmreserve.errors import NumericalError, ValidationError
from hmmreserve.model import (
    EmissionParams,
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

from helpers import random_draw

ALL_VARIANTS = [Variant.HMM, Variant.HMM_NU, Variant.HMM_LAG]


class TestSigma:
    def test_unit(self):
        assert sigma(0.0, 0.0, 2, 1.0) == pytest.approx(1.0)

    def test_hand_value(self):
        # 100 * exp(-3 - 0.25 * 2) = 3.01974..., sqrt = 1.73774
        assert sigma(-3.0, -0.25, 2, 100.0) == pytest.approx(1.73774, abs=1e-5)

    def test_sqrt_of_previous(self):
        assert sigma(0.0, 0.0, 3, 4.0) == pytest.approx(2.0)

    def test_overflow_raises(self):
        with pytest.raises(NumericalError, match="overflow"):
            sigma(500.0, 500.0, 2, 1e200)

    def test_validation(self):
        with pytest.raises(ValidationError):
            sigma(0.0, 0.0, 1, 1.0)
        with pytest.raises(ValidationError):
            sigma(0.0, 0.0, 2, -1.0)


class TestEmission:
    def test_body_density_at_median(self):
        # sigma = 1 via gamma1 = -log(100), y at its median
        phi = EmissionParams(np.array([1.5]), 1.05, 0.5, -math.log(100.0), 0.0)
        value = emission_log_density(150.0, 100.0, State.BODY, phi, 2)
        assert value == pytest.approx(-math.log(150.0) - 0.5 * math.log(2 * math.pi))
        assert value == pytest.approx(-5.929574, abs=1e-6)

    def test_tail_factor(self):
        assert 1.05 ** (0.5**3) == pytest.approx(1.0061166, abs=1e-6)

    def test_tail_limit_is_random_walk(self):
        phi = EmissionParams(np.array([2.0]), 1.0 + 1e-14, 0.5, 0.0, 0.0)
        for j in (2, 5, 9):
            value = emission_log_density(1.0, 1.0, State.TAIL, phi, j)
            # location collapses to log y_prev = 0: density of a zero-drift step
            assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-9)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    @pytest.mark.parametrize("state", [State.BODY, State.TAIL])
    def test_integrates_to_one(self, variant, state):
        rng = np.random.default_rng(hash((variant.value, int(state))) % 2**32)
        draw = random_draw(variant, 6, rng)
        y_prev = float(rng.uniform(10.0, 200.0))
        j = int(rng.integers(2, 6))
        # keep sigma moderate so quadrature converges
        phi = EmissionParams(
            draw.alpha, draw.omega, draw.beta, -math.log(y_prev), -0.05
        )
        total, err = quad(
            lambda y: math.exp(emission_log_density(y, y_prev, state, phi, j)),
            0.0,
            np.inf,
            limit=300,
        )
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_non_positive_rejected(self):
        phi = EmissionParams(np.array([1.5]), 1.05, 0.5, 0.0, 0.0)
        with pytest.raises(ValidationError):
            emission_log_density(-1.0, 100.0, State.BODY, phi, 2)


class TestTransitionMatrix:
    def test_hmm_absorbing(self):
        theta = transition_matrix(Variant.HMM, TransitionParams(0.8), 1)
        np.testing.assert_allclose(theta, [[0.8, 0.2], [0.0, 1.0]])

    def test_hmm_nu(self):
        theta = transition_matrix(Variant.HMM_NU, TransitionParams(0.8, 0.1), 1)
        np.testing.assert_allclose(theta, [[0.8, 0.2], [0.1, 0.9]])

    def test_hmm_lag_indexing(self):
        psi = TransitionParams(np.array([0.9, 0.6, 0.3]))
        theta = transition_matrix(Variant.HMM_LAG, psi, 2)
        np.testing.assert_allclose(theta, [[0.6, 0.4], [0.0, 1.0]])
        # beyond the fitted horizon the last value is reused
        theta = transition_matrix(Variant.HMM_LAG, psi, 9)
        np.testing.assert_allclose(theta, [[0.3, 0.7], [0.0, 1.0]])

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_rows_sum_to_one(self, variant):
        rng = np.random.default_rng(7)
        for _ in range(50):
            draw = random_draw(variant, 8, rng)
            d = int(rng.integers(1, 10))
            theta = transition_matrix(variant, draw.psi, d)
            np.testing.assert_allclose(theta.sum(axis=1), [1.0, 1.0], atol=1e-15)
            assert np.all(theta >= 0.0) and np.all(theta <= 1.0)


class TestParameterSpace:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_round_trip(self, variant):
        rng = np.random.default_rng(42)
        space = ParameterSpace(variant, 10, PriorConfig())
        for _ in range(50):
            u = space.sample_prior(rng)
            draw = space.constrain(u)
            back = space.unconstrain(draw)
            np.testing.assert_allclose(back, u, rtol=1e-12, atol=1e-12)
            again = space.constrain(back)
            np.testing.assert_allclose(again.alpha, draw.alpha, rtol=1e-12)
            assert again.omega == pytest.approx(draw.omega, rel=1e-12)

    @given(st.lists(st.floats(min_value=-4, max_value=4), min_size=9, max_size=9))
    @settings(max_examples=60, deadline=None)
    def test_lag_ordering_structural(self, coords):
        space = ParameterSpace(Variant.HMM_LAG, 6, PriorConfig())
        u = np.zeros(space.size)
        u[:5] = coords[:5]
        u[5:9] = coords[5:9]
        draw = space.constrain(u)
        assert np.all(np.diff(draw.pi) <= 0.0)
        assert np.all(draw.pi > 0.0) and np.all(draw.pi < 1.0)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_log_prior_finite_at_locations(self, variant):
        space = ParameterSpace(variant, 6, PriorConfig())
        u = np.zeros(space.size)
        value = space.log_prior(u)
        assert math.isfinite(value)
        assert value == pytest.approx(space.log_prior(np.zeros(space.size)))

    def test_alpha_deviation_costs_half(self):
        space = ParameterSpace(Variant.HMM, 10, PriorConfig())
        u = np.zeros(space.size)
        base = space.log_prior(u)
        idx = space.names.index("log_alpha_5")
        u[idx] = space.priors.alpha_scale(5)  # one prior sd
        assert space.log_prior(u) == pytest.approx(base - 0.5)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_prior_slice_integrates_to_one(self, variant):
        # integrating exp(log_prior) over a single coordinate must recover the
        # product of the remaining factors, computed here independently with
        # scipy densities. All coordinates except the (tail level, logit beta)
        # pair are a priori independent; the anchored tail level couples to
        # logit beta, so the beta slice is validated jointly with a 2-d
        # integral instead.
        from scipy.integrate import dblquad
        from scipy.stats import halfnorm, norm

        space = ParameterSpace(variant, 4, PriorConfig())
        rng = np.random.default_rng(5)
        u0 = space.sample_prior(rng)
        omega_idx = space.names.index("tail_level")
        beta_idx = space.names.index("beta_logit")

        def oracle_factor(idx: int, u: np.ndarray) -> float:
            if space.names[idx] == "tail_level":
                # change of variables w -> log omega at fixed beta
                log_omega = space._log_omega_of(u)
                return halfnorm.pdf(log_omega, scale=space.priors.omega_scale) * log_omega
            return norm.pdf(u[idx], loc=space._locs[idx], scale=space._scales[idx])

        def others_product(skip: set[int]) -> float:
            return math.prod(
                oracle_factor(k, u0) for k in range(space.size) if k not in skip
            )

        for idx, name in enumerate(space.names):
            if name == "beta_logit":
                continue
            def slice_density(x, idx=idx):
                u = u0.copy()
                u[idx] = x
                return math.exp(space.log_prior(u))

            if name == "tail_level":
                lo, hi = u0[idx] - 40.0, u0[idx] + 10.0
            else:
                loc = space._locs[idx]
                scale = space._scales[idx]
                lo, hi = loc - 15.0 * scale, loc + 15.0 * scale
            total, _ = quad(slice_density, lo, hi, points=[u0[idx]], limit=300)
            assert total / others_product({idx}) == pytest.approx(1.0, abs=1e-6)

        def joint_density(w, v):
            u = u0.copy()
            u[omega_idx] = w
            u[beta_idx] = v
            return math.exp(space.log_prior(u))

        total, _ = dblquad(
            joint_density, -12.0, 12.0, lambda v: -45.0, lambda v: 10.0,
            epsabs=1e-10, epsrel=1e-10,
        )
        assert total / others_product({omega_idx, beta_idx}) == pytest.approx(
            1.0, abs=1e-6
        )

    def test_natural_names_hmm(self):
        space = ParameterSpace(Variant.HMM, 4, PriorConfig())
        assert space.natural_names() == [
            "pi", "alpha_1", "alpha_2", "alpha_3", "omega", "beta", "gamma1", "gamma2",
        ]

    def test_natural_names_lag(self):
        space = ParameterSpace(Variant.HMM_LAG, 3, PriorConfig())
        assert space.natural_names() == [
            "pi_1", "pi_2", "alpha_1", "alpha_2", "omega", "beta", "gamma1", "gamma2",
        ]


class TestPriorConfig:
    def test_json_round_trip(self, tmp_path):
        priors = PriorConfig.sbc_defaults()
        path = tmp_path / "priors.json"
        priors.to_json(path)
        assert PriorConfig.from_json(path) == priors

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown prior keys"):
            PriorConfig.from_dict({"bogus": 1.0})

    def test_scale_positive(self):
        with pytest.raises(ValidationError):
            PriorConfig(omega_scale=0.0)

    def test_sbc_gamma_priors(self):
        priors = PriorConfig.sbc_defaults()
        assert (priors.gamma1_loc, priors.gamma1_scale) == (-3.0, 0.25)
        assert (priors.gamma2_loc, priors.gamma2_scale) == (-1.0, 0.1)


class TestPriorPredictive:
    def test_deterministic(self):
        a = simulate_prior_predictive(Variant.HMM, 5, 5, PriorConfig.sbc_defaults(), seed=9)
        b = simulate_prior_predictive(Variant.HMM, 5, 5, PriorConfig.sbc_defaults(), seed=9)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_allclose(a.draw.alpha, b.draw.alpha)

    def test_pinned_body(self):
        priors = PriorConfig.sbc_defaults()
        pinned = PriorConfig.from_dict({**priors.to_dict(), "pi_logit_loc": 500.0,
                                        "pi_logit_scale": 1e-9})
        bundle = simulate_prior_predictive(Variant.HMM, 6, 6, pinned, seed=1)
        assert bundle.states.max() == 0

    def test_pinned_tail_from_second_period(self):
        priors = PriorConfig.sbc_defaults()
        pinned = PriorConfig.from_dict({**priors.to_dict(), "pi_logit_loc": -500.0,
                                        "pi_logit_scale": 1e-9})
        bundle = simulate_prior_predictive(Variant.HMM, 6, 6, pinned, seed=1)
        assert bundle.states[:, 0].max() == 0
        assert bundle.states[:, 1:].min() == 1

    def test_tail_absorbing_under_hmm(self):
        for seed in range(20):
            bundle = simulate_prior_predictive(
                Variant.HMM, 8, 8, PriorConfig.sbc_defaults(), seed=seed
            )
            for row in bundle.states:
                assert np.all(np.diff(row.astype(int)) >= 0)

    def test_first_column_is_y_initial(self):
        bundle = simulate_prior_predictive(
            Variant.HMM_NU, 4, 6, PriorConfig.sbc_defaults(), seed=2, y_initial=3.5
        )
        np.testing.assert_allclose(bundle.values[:, 0], 3.5)
        t = bundle.to_triangle()
        assert t.n_experience == 4 and t.n_development == 6

    def test_overflow_flagging(self):
        # gamma priors pinned at a huge location force immediate overflow
        priors = PriorConfig(gamma1_loc=800.0, gamma1_scale=1e-9)
        bundle = simulate_prior_predictive(Variant.HMM, 3, 3, priors, seed=0)
        assert bundle.overflowed
        with pytest.raises(NumericalError):
            bundle.to_triangle()
