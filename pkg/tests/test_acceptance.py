"""Acceptance criteria, one test per criterion at its stated tolerance.

Run with ``pytest -v tests/test_acceptance.py`` for one pass/fail line per
criterion. Criteria 4 and 5 are batch-scale (minutes to an hour); they carry
the ``slow`` marker but run by default.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import kstest

from hmmreserve.cli import main
from hmmreserve.inference import forward_log_likelihood, sample_posterior, viterbi
from hmmreserve.mcmc import SamplerConfig
from hmmreserve.metrics import combine_triangles, elpd, pit, score_difference
from hmmreserve.model import (
    EmissionParams,
    ParameterDraw,
    PriorConfig,
    State,
    TransitionParams,
    Variant,
    emission_log_density,
    sigma,
    simulate_prior_predictive,
)
from hmmreserve.predict import one_step_densities, simulate_predictions
from hmmreserve.sbc import run_sbc
from hmmreserve.triangle import Triangle, split_upper_lower, write_triangle
from hmmreserve.twostep import TwoStepConfig, fit_two_step, one_step_densities_two_step

from helpers import enumerate_forward, enumerate_viterbi, random_draw, random_row
from test_inference import single_row_triangle

ALL_VARIANTS = [Variant.HMM, Variant.HMM_NU, Variant.HMM_LAG]


def _oracle_cases(n_cases: int = 100):
    rng = np.random.default_rng(20250808)
    for index in range(n_cases):
        variant = ALL_VARIANTS[index % 3]
        length = int(rng.integers(2, 7))
        draw = random_draw(variant, max(length, 2), rng)
        row = random_row(length, rng)
        yield draw, row


def test_criterion_1_forward_matches_path_enumeration():
    started = time.time()
    for draw, row in _oracle_cases():
        result = forward_log_likelihood(single_row_triangle(row), draw)
        oracle = enumerate_forward(row, draw)
        assert abs(result.total - oracle) < 1e-10
    elapsed = time.time() - started
    assert elapsed < 10.0
    print(f"criterion 1 PASS: 100 forward cases within 1e-10 in {elapsed:.2f}s")


def test_criterion_2_viterbi_matches_enumeration_argmax():
    started = time.time()
    for draw, row in _oracle_cases():
        assert viterbi(row, draw).tolist() == enumerate_viterbi(row, draw).tolist()
    elapsed = time.time() - started
    assert elapsed < 10.0
    print(f"criterion 2 PASS: 100 Viterbi cases equal enumeration in {elapsed:.2f}s")


def test_criterion_3_unit_values():
    # emission scale at gamma=(-3,-0.25), j=2, y_prev=100
    assert abs(sigma(-3.0, -0.25, 2, 100.0) - 1.73774) < 1e-6
    # decaying growth factor 1.05 ** (0.5 ** 3); the stated rendering 1.0061166
    # sits 8.1e-7 from the exact value, inside the required 1e-6
    assert abs(1.05 ** (0.5**3) - 1.0061166) < 1e-6
    # lognormal log-density at its median with unit scale
    phi = EmissionParams(np.array([1.5]), 1.05, 0.5, -math.log(100.0), 0.0)
    value = emission_log_density(150.0, 100.0, State.BODY, phi, 2)
    assert abs(value - (-5.929574)) < 1e-6
    # two-draw ELPD cell: log((e^-1 + e^-3) / 2) = -1.5662192 by hand
    # evaluation (a published rendering of this constant as -1.566304 is an
    # arithmetic slip; the formula value is asserted)
    two_draw = elpd(np.array([[-1.0, -3.0]]))
    assert abs(two_draw - math.log((math.e**-1 + math.e**-3) / 2.0)) < 1e-6
    assert abs(two_draw - (-1.5662192)) < 1e-6
    # score-difference standard error on pointwise diffs {0, 2}
    _, se = score_difference([1.0, 3.0], [1.0, 1.0])
    assert abs(se - 2.0) < 1e-6
    # cross-triangle combination of diffs {2,4} and ses {1,3}
    mean_diff, mean_se, interval = combine_triangles([2.0, 4.0], [1.0, 3.0])
    assert abs(mean_diff - 3.0) < 1e-6 and abs(mean_se - 2.0) < 1e-6
    assert abs(interval[0] - (-1.0)) < 1e-6 and abs(interval[1] - 7.0) < 1e-6
    print("criterion 3 PASS: unit values reproduce to 1e-6")


@pytest.mark.slow
def test_criterion_4_simulation_based_calibration():
    report = run_sbc(
        Variant.HMM,
        10,
        10,
        replications=200,
        config=SamplerConfig(chains=4, warmup=1000, iterations=1000, thin=1),
        thin=10,
        seed=20250808,
        n_jobs=2,
    )
    assert report.s_thin == 400
    kept = len(report.kept)
    dropped = report.dropped
    pvalues = report.chi_square_pvalues()
    band = report.band(0.99)
    failures = []
    for quantity in report.quantities:
        if pvalues[quantity] <= 0.01:
            failures.append(f"{quantity}: chi-square p={pvalues[quantity]:.4f}")
        counts = report.bin_counts_for(quantity)
        inside = int(np.count_nonzero((counts >= band[0]) & (counts <= band[1])))
        if inside < 18:
            failures.append(f"{quantity}: only {inside}/20 bins inside the 99% band")
    accuracy = report.accuracy_summary()
    assert not failures, failures
    assert accuracy["mean"] >= 0.90, accuracy
    print(
        f"criterion 4 PASS: {kept} kept / {dropped} dropped; all "
        f"{len(report.quantities)} rank histograms uniform (min chi-square "
        f"p={min(pvalues.values()):.3f}); z-recovery mean "
        f"{accuracy['mean']:.3f}, 95% HDI [{accuracy['hdi_lo']:.2f}, "
        f"{accuracy['hdi_hi']:.2f}]"
    )


@pytest.mark.slow
def test_criterion_5_simulated_example_ordering():
    priors = PriorConfig.sbc_defaults()
    cfg = TwoStepConfig(tau=6, rho=(6, 10))
    wins = 0
    scored = 0
    seed = 0
    for index in range(20):
        bundle = simulate_prior_predictive(Variant.HMM, 10, 10, priors, seed=3000 + seed)
        seed += 1
        while bundle.overflowed:
            bundle = simulate_prior_predictive(Variant.HMM, 10, 10, priors, seed=3000 + seed)
            seed += 1
        full = bundle.to_triangle()
        train, test = split_upper_lower(full)
        config = SamplerConfig(chains=4, warmup=400, iterations=500, thin=1, seed=7000 + index)
        hmm_draws = sample_posterior(train, Variant.HMM, priors, config)
        _, hmm_ld = one_step_densities(hmm_draws, train, test)
        ts_draws = fit_two_step(train, cfg, priors, config)
        _, ts_ld = one_step_densities_two_step(ts_draws, train, cfg, test)
        scored += 1
        if elpd(hmm_ld) > elpd(ts_ld):
            wins += 1
    assert wins / scored >= 0.70, f"switching model won only {wins}/{scored}"
    print(f"criterion 5 PASS: switching model wins test-set ELPD on {wins}/{scored} triangles")


def test_criterion_6_pit_calibration_self_test():
    priors = PriorConfig.sbc_defaults()
    bundle = simulate_prior_predictive(Variant.HMM, 10, 10, priors, seed=414)
    assert not bundle.overflowed
    train, _ = split_upper_lower(bundle.to_triangle())
    config = SamplerConfig(chains=4, warmup=400, iterations=500, thin=1, seed=99)
    draws = sample_posterior(train, Variant.HMM, priors, config)
    cap_base = train.max_loss()
    reference = simulate_predictions(draws, train, cap_base=cap_base, seed=1)
    rng = np.random.default_rng(2)
    truth_indices = rng.integers(0, draws.n_draws, size=1000)
    truths = simulate_predictions(
        draws, train, cap_base=cap_base, seed=3, indices=truth_indices
    )
    cell = reference.cell_index(2, 10)
    values = [
        pit(reference.samples[cell], truths.samples[truths.cell_index(2, 10), r])
        for r in range(1000)
    ]
    statistic = kstest(values, "uniform")
    assert statistic.pvalue > 0.01, statistic
    print(f"criterion 6 PASS: PIT self-test KS p={statistic.pvalue:.3f}")


def test_criterion_7_capping_absorbs_explosions():
    explosive = ParameterDraw(
        Variant.HMM,
        EmissionParams(np.array([80.0, 80.0, 80.0, 80.0]), 200.0, 0.9, 3.0, 0.5),
        TransitionParams(0.5),
    )
    from test_predict import draws_from

    draws = draws_from([explosive] * 12_500, m=5)
    train, _ = split_upper_lower(
        Triangle(
            5, 5,
            np.exp(np.random.default_rng(0).normal(3.0, 0.5, size=(5, 5))),
            np.full(5, 5, dtype=int),
        )
    )
    prediction = simulate_predictions(draws, train, cap_base=50.0, seed=6)
    n_samples = prediction.samples.size
    assert n_samples >= 100_000
    assert prediction.cap == 5000.0
    assert float(prediction.samples.max()) <= 5000.0
    print(
        f"criterion 7 PASS: {n_samples} samples of an explosive draw all "
        f"capped at 5000"
    )


def test_criterion_8_byte_identical_reruns(tmp_path):
    priors_sbc = PriorConfig.sbc_defaults()
    bundle = simulate_prior_predictive(Variant.HMM, 6, 6, priors_sbc, seed=21)
    triangle_path = tmp_path / "triangle.csv"
    write_triangle(bundle.to_triangle(), triangle_path)

    fast = ["--chains", "2", "--warmup", "200", "--iterations", "100", "--thin", "1"]
    commands = {
        "fit-hmm": ["fit", "--triangle", str(triangle_path), "--variant", "hmm",
                    "--seed", "11", *fast],
        "fit-twostep": ["fit", "--triangle", str(triangle_path), "--variant", "twostep",
                        "--tau", "4", "--rho", "4,6", "--seed", "11", *fast],
        "simulate": ["simulate", "--variant", "hmm", "--n", "5", "--m", "5",
                     "--seed", "4"],
        "sbc": ["sbc", "--replications", "2", "--n", "4", "--m", "4",
                "--chains", "2", "--warmup", "300", "--iterations", "200",
                "--sampler-thin", "1", "--thin", "10", "--seed", "2"],
        "link-ratios": ["link-ratios", "--triangle", str(triangle_path),
                        "--labels", "lob"],
    }
    tables = {
        "fit-hmm": ["draws.csv", "predictions.csv", "states.csv", "fan.csv",
                    "test_cells.csv"],
        "fit-twostep": ["draws.csv", "predictions.csv", "states.csv", "fan.csv"],
        "simulate": ["triangle.csv", "states.csv"],
        "sbc": ["ranks.csv"],
        "link-ratios": ["link_ratios.csv"],
    }
    fit_dirs = {}
    for name, argv in commands.items():
        out_a = tmp_path / f"{name}-a"
        out_b = tmp_path / f"{name}-b"
        code_a = main(argv + ["--out", str(out_a)])
        code_b = main(argv + ["--out", str(out_b)])
        assert code_a in (0, 3) and code_a == code_b, name
        for table in tables[name]:
            bytes_a = (out_a / table).read_bytes()
            assert bytes_a == (out_b / table).read_bytes(), f"{name}/{table}"
        fit_dirs[name] = (out_a, out_b)

    eval_argv = ["evaluate",
                 "--run", f"hmm={fit_dirs['fit-hmm'][0]}",
                 "--run", f"twostep={fit_dirs['fit-twostep'][0]}"]
    out_a, out_b = tmp_path / "eval-a", tmp_path / "eval-b"
    assert main(eval_argv + ["--out", str(out_a)]) == 0
    assert main(eval_argv + ["--out", str(out_b)]) == 0
    for table in ["pit.csv", "score_report.json"]:
        assert (out_a / table).read_bytes() == (out_b / table).read_bytes(), table
    print("criterion 8 PASS: byte-identical primary tables across reruns of every command")
