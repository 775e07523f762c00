import math

import numpy as np
import pytest

from hmmreserve.errors import ValidationError
from hmmreserve.inference import PosteriorDraws, forward_log_likelihood
from hmmreserve.model import (
    EmissionParams,
    ParameterDraw,
    ParameterSpace,
    PriorConfig,
    TransitionParams,
    Variant,
)
from hmmreserve.predict import (
    fan_quantiles,
    one_step_densities,
    simulate_predictions,
)
from hmmreserve.triangle import Triangle, split_upper_lower

from helpers import random_draw


def draws_from(parameter_draws: list[ParameterDraw], m: int) -> PosteriorDraws:
    variant = parameter_draws[0].variant
    space = ParameterSpace(variant, m, PriorConfig())
    values = np.stack([space.natural_values(d) for d in parameter_draws])
    return PosteriorDraws(
        model=variant.value,
        n_development=m,
        names=space.natural_names(),
        values=values,
        chain=np.ones(len(parameter_draws), dtype=int),
        iteration=np.arange(1, len(parameter_draws) + 1),
        diagnostics={},
        accept_rates=[0.25],
        converged=True,
    )


def hmm_draw(pi, alpha, omega=1.05, beta=0.5, gamma1=0.0, gamma2=0.0, variant=Variant.HMM, nu=0.0):
    return ParameterDraw(
        variant,
        EmissionParams(np.asarray(alpha, dtype=float), omega, beta, gamma1, gamma2),
        TransitionParams(pi, nu),
    )


def square_triangle(n: int, seed: int = 0) -> Triangle:
    rng = np.random.default_rng(seed)
    values = 100.0 * np.exp(np.cumsum(rng.normal(0.05, 0.1, size=(n, n)), axis=1))
    return Triangle(n, n, values, np.full(n, n, dtype=int))


class TestSimulatePredictions:
    def test_cap_is_hard(self):
        # explosive link ratios, cap_base 50 -> nothing above 5000
        draw = hmm_draw(pi=1.0, alpha=[50.0, 50.0, 50.0], gamma1=2.0)
        draws = draws_from([draw] * 8, m=4)
        train, _ = split_upper_lower(square_triangle(4))
        ps = simulate_predictions(draws, train, cap_base=50.0, seed=1)
        assert ps.cap == 5000.0
        assert ps.samples.max() <= 5000.0

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        draws = draws_from([random_draw(Variant.HMM, 5, rng) for _ in range(10)], m=5)
        train, _ = split_upper_lower(square_triangle(5))
        a = simulate_predictions(draws, train, seed=7)
        b = simulate_predictions(draws, train, seed=7)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.states, b.states)

    def test_constant_trajectories_in_noiseless_identity_limit(self):
        # sigma -> 0, all-body, alpha = 1: trajectory pinned at last observed loss
        draw = hmm_draw(pi=1.0, alpha=[1.0, 1.0, 1.0], gamma1=-60.0)
        draws = draws_from([draw] * 5, m=4)
        train, _ = split_upper_lower(square_triangle(4, seed=2))
        ps = simulate_predictions(draws, train, seed=0)
        for index, (i, j) in enumerate(ps.cells):
            expected = train.row(i)[-1]
            np.testing.assert_allclose(ps.samples[index], expected, rtol=1e-6)

    def test_tail_absorbing_along_trajectories(self):
        rng = np.random.default_rng(9)
        draws = draws_from([random_draw(Variant.HMM, 6, rng) for _ in range(50)], m=6)
        train, _ = split_upper_lower(square_triangle(6, seed=4))
        ps = simulate_predictions(draws, train, seed=5)
        by_row: dict[int, list[int]] = {}
        for index, (i, j) in enumerate(ps.cells):
            by_row.setdefault(i, []).append(index)
        for i, indices in by_row.items():
            path = ps.states[indices]
            assert np.all(np.diff(path.astype(int), axis=0) >= 0)

    def test_nothing_simulated_in_sample(self):
        rng = np.random.default_rng(1)
        draws = draws_from([random_draw(Variant.HMM, 4, rng) for _ in range(3)], m=4)
        train, _ = split_upper_lower(square_triangle(4))
        ps = simulate_predictions(draws, train, seed=0)
        observed = {(i + 1, j + 1) for i in range(4) for j in range(int(train.row_lengths[i]))}
        assert not observed.intersection(ps.cells)
        assert set(ps.cells) == {(i, j) for i in range(2, 5) for j in range(6 - i, 5)}

    def test_tail_growth_multiplier_at_least_one(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            draw = random_draw(Variant.HMM, 6, rng)
            for j in range(2, 7):
                assert draw.beta**j * math.log(draw.omega) >= 0.0

    def test_fully_observed_triangle_empty_set(self):
        rng = np.random.default_rng(2)
        draws = draws_from([random_draw(Variant.HMM, 4, rng) for _ in range(3)], m=4)
        full = square_triangle(4)
        ps = simulate_predictions(draws, full, seed=0)
        assert ps.cells == []

    def test_fan_quantiles_shape(self):
        rng = np.random.default_rng(8)
        draws = draws_from([random_draw(Variant.HMM, 4, rng) for _ in range(40)], m=4)
        train, _ = split_upper_lower(square_triangle(4))
        ps = simulate_predictions(draws, train, seed=0)
        rows = fan_quantiles(ps)
        assert len(rows) == len(ps.cells)
        for _, _, quantiles in rows:
            assert quantiles == sorted(quantiles)


class TestOneStepDensities:
    @pytest.mark.parametrize("variant", [Variant.HMM, Variant.HMM_NU, Variant.HMM_LAG])
    def test_chain_rule_identity(self, variant):
        # per draw, the per-cell log densities along a test row must sum to
        # the full-row log likelihood minus the training-prefix log likelihood
        rng = np.random.default_rng(21)
        m = 6
        parameter_draws = [random_draw(variant, m, rng) for _ in range(5)]
        draws = draws_from(parameter_draws, m=m)
        full = square_triangle(m, seed=6)
        train, test = split_upper_lower(full)
        cells, ld = one_step_densities(draws, train, test)
        for s, pdraw in enumerate(parameter_draws):
            for i in range(1, m):
                row_cells = [k for k, (ci, _) in enumerate(cells) if ci == i]
                if not row_cells:
                    continue
                got = ld[row_cells, s].sum()
                full_row = forward_log_likelihood(
                    _row_triangle(full, i), pdraw
                ).row_totals[0]
                prefix = forward_log_likelihood(
                    _row_triangle(train, i), pdraw
                ).row_totals[0]
                assert abs(got - (full_row - prefix)) < 1e-10

    def test_single_state_reduces_to_body_density(self):
        from hmmreserve.model import emission_log_density

        draw = hmm_draw(pi=1.0, alpha=[1.5, 1.4, 1.3], gamma1=-2.0)
        draws = draws_from([draw], m=4)
        full = square_triangle(4, seed=3)
        train, test = split_upper_lower(full)
        cells, ld = one_step_densities(draws, train, test)
        values = {(i, j): v for i, j, v in test}
        previous = {}
        for i, j, v in sorted(test):
            prev = values.get((i, j - 1), train.values[i - 1, j - 2])
            expected = emission_log_density(v, prev, 0, draw.phi, j)
            k = cells.index((i, j))
            assert ld[k, 0] == pytest.approx(expected, abs=1e-12)

    def test_capping_does_not_touch_densities(self):
        rng = np.random.default_rng(31)
        draws = draws_from([random_draw(Variant.HMM, 4, rng) for _ in range(4)], m=4)
        full = square_triangle(4, seed=10)
        train, test = split_upper_lower(full)
        _, ld_a = one_step_densities(draws, train, test)
        ps_small_cap = simulate_predictions(draws, train, cap_base=1e-2, seed=0)
        _, ld_b = one_step_densities(draws, train, test)
        np.testing.assert_array_equal(ld_a, ld_b)
        assert ps_small_cap.samples.max() <= 1.0

    def test_noncontiguous_test_rejected(self):
        rng = np.random.default_rng(41)
        draws = draws_from([random_draw(Variant.HMM, 4, rng)], m=4)
        train, _ = split_upper_lower(square_triangle(4))
        # row 3 is observed through j=2, so a lone test cell at j=4 leaves a gap
        with pytest.raises(ValidationError, match="contiguous"):
            one_step_densities(draws, train, [(3, 4, 100.0)])

    def test_stored_logs_are_plain_logs(self):
        # trivially: densities e^-1 and e^-3 stored as -1 and -3
        ld = np.log(np.array([[math.exp(-1.0), math.exp(-3.0)]]))
        np.testing.assert_allclose(ld, [[-1.0, -3.0]])


def _row_triangle(t: Triangle, i: int) -> Triangle:
    length = int(t.row_lengths[i - 1])
    cells = [(1, j + 1, float(t.values[i - 1, j])) for j in range(length)]
    cells.append((2, 1, 1.0))
    values = np.full((2, t.n_development), np.nan)
    for a, b, v in cells:
        values[a - 1, b - 1] = v
    return Triangle(2, t.n_development, values, np.array([length, 1]))
