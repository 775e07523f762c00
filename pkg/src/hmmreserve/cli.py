"""Command-line entry points: fit, simulate, sbc, evaluate, link-ratios.

Every command resolves its configuration up front, embeds it (seed included)
in the JSON artifacts it writes, and writes tables atomically, so reruns with
the same seed produce byte-identical primary outputs.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical error,
3 fit completed but did not converge.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import HmmReserveError, NumericalError, ValidationError
from .inference import PosteriorDraws, sample_posterior, viterbi
from .mcmc import SamplerConfig
from .metrics import combine_triangles, elpd_pointwise, pit, rmse_cell, score_difference
from .model import PriorConfig, Variant
from .predict import PredictionSet, fan_quantiles, one_step_densities, simulate_predictions
from .sbc import ranks_table, run_sbc
from .triangle import (
    TRIANGLE_HEADER,
    Triangle,
    load_triangle,
    split_upper_lower,
    summarize_link_ratios,
    write_link_ratio_summary,
    write_triangle,
)
from .twostep import (
    TwoStepConfig,
    fit_two_step,
    one_step_densities_two_step,
    predict_two_step,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_NOT_CONVERGED = 3

_PREDICT_STREAM = 20_001
STATE_LABELS = ("body", "tail")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(content, encoding="utf-8")
    os.replace(tmp, path)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write(path, buffer.getvalue())


def _write_json(path: Path, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def _out_dir(value: str) -> Path:
    path = Path(value)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _load_priors(path: str | None, default: PriorConfig | None = None) -> PriorConfig:
    if path is None:
        return default or PriorConfig()
    return PriorConfig.from_json(path)


def _parse_rho(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(part) for part in text.split(","))
    except ValueError:
        raise ValidationError(f"--rho expects 'lo,hi', got {text!r}") from None
    return lo, hi


def build_parser() -> _Parser:
    parser = _Parser(prog="hmmreserve", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model to a loss triangle")
    fit.add_argument("--triangle", required=True)
    fit.add_argument(
        "--variant", required=True, choices=["hmm", "hmm-nu", "hmm-lag", "twostep"]
    )
    fit.add_argument("--tau", type=int)
    fit.add_argument("--rho", type=_parse_rho)
    fit.add_argument(
        "--test-mode", choices=["lower-diagonal", "last-diagonal", "file"],
        default="lower-diagonal",
    )
    fit.add_argument("--test", help="test-cell file (required for --test-mode file)")
    fit.add_argument("--chains", type=int, default=4)
    fit.add_argument("--warmup", type=int, default=1000)
    fit.add_argument("--iterations", type=int, default=1000)
    fit.add_argument("--thin", type=int, default=1)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--priors")
    fit.add_argument("--label", help="model label in downstream score reports")
    fit.add_argument("--out", required=True)

    simulate = sub.add_parser("simulate", help="draw a triangle from the prior predictive")
    simulate.add_argument("--variant", default="hmm", choices=["hmm", "hmm-nu", "hmm-lag"])
    simulate.add_argument("--n", type=int, default=10)
    simulate.add_argument("--m", type=int, default=10)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--y-initial", type=float, default=1.0)
    simulate.add_argument("--priors")
    simulate.add_argument("--out", required=True)

    sbc = sub.add_parser("sbc", help="simulation-based calibration batch")
    sbc.add_argument("--variant", default="hmm", choices=["hmm", "hmm-nu", "hmm-lag"])
    sbc.add_argument("--replications", type=int, required=True)
    sbc.add_argument("--n", type=int, default=10)
    sbc.add_argument("--m", type=int, default=10)
    sbc.add_argument("--chains", type=int, default=4)
    sbc.add_argument("--warmup", type=int, default=1000)
    sbc.add_argument("--iterations", type=int, default=1000)
    sbc.add_argument("--sampler-thin", type=int, default=10)
    sbc.add_argument("--thin", type=int, default=10, help="rank-statistic thinning")
    sbc.add_argument("--seed", type=int, default=0)
    sbc.add_argument("--jobs", type=int, default=1)
    sbc.add_argument("--priors")
    sbc.add_argument("--out", required=True)

    evaluate = sub.add_parser("evaluate", help="score fitted models against test data")
    evaluate.add_argument(
        "--run", action="append", required=True, metavar="LABEL=DIR",
        help="fit output directory, tagged by model label; repeatable",
    )
    evaluate.add_argument("--out", required=True)

    ratios = sub.add_parser("link-ratios", help="empirical link-ratio summary tables")
    ratios.add_argument("--triangle", action="append", required=True)
    ratios.add_argument("--labels", help="comma-separated group labels, one per triangle")
    ratios.add_argument("--out", required=True)
    return parser


def _split_by_mode(triangle: Triangle, args) -> tuple[Triangle, list]:
    if args.test_mode == "file":
        if not args.test:
            raise ValidationError("--test-mode file requires --test")
        test_path = Path(args.test)
        if not test_path.exists():
            raise ValidationError(f"test file not found: {test_path}")
        test = sorted(_read_cells(test_path))
        for i, j, _ in test:
            if not 1 <= i <= triangle.n_experience or j > triangle.n_development:
                raise ValidationError(f"test cell ({i}, {j}) outside the triangle")
            if j <= triangle.row_lengths[i - 1]:
                raise ValidationError(f"test cell ({i}, {j}) is already observed")
        return triangle, test
    if args.test:
        raise ValidationError("--test is only valid with --test-mode file")
    return split_upper_lower(triangle, mode=args.test_mode)


def _states_rows_hmm(draws: PosteriorDraws, train: Triangle) -> list:
    from .inference import hmm_draw_at

    rows = []
    parameter_draws = [hmm_draw_at(draws, k) for k in range(draws.n_draws)]
    for i in range(1, train.n_experience + 1):
        row = train.row(i)
        votes = np.zeros(len(row))
        for draw in parameter_draws:
            votes += viterbi(row, draw)
        for j in range(len(row)):
            modal = int(votes[j] * 2 > len(parameter_draws))
            rows.append([i, j + 1, STATE_LABELS[modal]])
    return rows


def _states_rows_twostep(train: Triangle, tau: int) -> list:
    rows = []
    for i in range(1, train.n_experience + 1):
        for j in range(1, int(train.row_lengths[i - 1]) + 1):
            rows.append([i, j, STATE_LABELS[0 if j <= tau else 1]])
    return rows


def _write_fit_outputs(
    out: Path,
    run_config: dict,
    draws: PosteriorDraws,
    prediction: PredictionSet,
    states_rows: list,
    test: list,
    densities: dict[tuple[int, int], np.ndarray] | None,
) -> None:
    _write_json(out / "run_config.json", run_config)
    _write_csv(
        out / "draws.csv",
        ["chain", "iteration"] + draws.names,
        (
            [int(draws.chain[s]), int(draws.iteration[s])]
            + [_fmt(v) for v in draws.values[s]]
            for s in range(draws.n_draws)
        ),
    )
    _write_json(
        out / "diagnostics.json",
        {
            "run_config": run_config,
            "converged": draws.converged,
            "accept_rates": [round(a, 6) for a in draws.accept_rates],
            "parameters": draws.diagnostics,
        },
    )
    _write_csv(out / "states.csv", ["experience_period", "development_period", "state"], states_rows)
    prediction_rows = []
    for index, (i, j) in enumerate(prediction.cells):
        cell_densities = densities.get((i, j)) if densities is not None else None
        for s in range(prediction.n_draws):
            row = [i, j, s + 1, _fmt(prediction.samples[index, s]),
                   STATE_LABELS[int(prediction.states[index, s])]]
            if densities is not None:
                row.append(_fmt(cell_densities[s]) if cell_densities is not None else "")
            prediction_rows.append(row)
    header = ["experience_period", "development_period", "draw", "y_hat", "state"]
    if densities is not None:
        header.append("log_density")
    _write_csv(out / "predictions.csv", header, prediction_rows)
    _write_csv(
        out / "fan.csv",
        ["experience_period", "development_period", "q025", "q25", "q50", "q75", "q975"],
        ([i, j, *(_fmt(v) for v in quantiles)] for i, j, quantiles in fan_quantiles(prediction)),
    )
    if test:
        _write_csv(
            out / "test_cells.csv",
            list(TRIANGLE_HEADER),
            ([i, j, _fmt(v)] for i, j, v in test),
        )


def cmd_fit(args) -> int:
    if args.variant != "twostep" and (args.tau is not None or args.rho is not None):
        raise ValidationError("--tau/--rho belong to the two-step baseline")
    if args.variant == "twostep" and (args.tau is None or args.rho is None):
        raise ValidationError("the two-step baseline requires --tau and --rho")
    out = _out_dir(args.out)
    triangle = load_triangle(args.triangle)
    train, test = _split_by_mode(triangle, args)
    priors = _load_priors(args.priors)
    config = SamplerConfig(
        chains=args.chains, warmup=args.warmup, iterations=args.iterations,
        thin=args.thin, seed=args.seed,
    )
    cap_base = max([train.max_loss()] + [v for _, _, v in test])
    run_config = {
        "command": "fit",
        "triangle": str(args.triangle),
        "variant": args.variant,
        "label": args.label or args.variant,
        "test_mode": args.test_mode,
        "test_file": args.test,
        "sampler": config.to_dict(),
        "priors": priors.to_dict(),
        "cap_base": cap_base,
        "seed": args.seed,
    }
    horizon = train.n_development
    predict_seed = _derive_seed(args.seed, _PREDICT_STREAM)
    if args.variant == "twostep":
        cfg = TwoStepConfig(tau=args.tau, rho=args.rho)
        run_config["two_step"] = cfg.to_dict()
        draws = fit_two_step(train, cfg, priors, config)
        prediction = predict_two_step(
            draws, train, cfg, horizon=horizon, cap_base=cap_base, seed=predict_seed
        )
        densities = None
        if test:
            cells, table = one_step_densities_two_step(draws, train, cfg, test)
            densities = {cell: table[k] for k, cell in enumerate(cells)}
        states_rows = _states_rows_twostep(train, cfg.tau)
    else:
        variant = Variant(args.variant)
        draws = sample_posterior(train, variant, priors, config)
        prediction = simulate_predictions(
            draws, train, horizon=horizon, cap_base=cap_base, seed=predict_seed
        )
        densities = None
        if test:
            cells, table = one_step_densities(draws, train, test)
            densities = {cell: table[k] for k, cell in enumerate(cells)}
        states_rows = _states_rows_hmm(draws, train)
    _write_fit_outputs(out, run_config, draws, prediction, states_rows, test, densities)
    return EXIT_OK if draws.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    priors = _load_priors(args.priors, default=PriorConfig.sbc_defaults())
    from .model import simulate_prior_predictive

    bundle = simulate_prior_predictive(
        Variant(args.variant), args.n, args.m, priors, seed=args.seed,
        y_initial=args.y_initial,
    )
    run_config = {
        "command": "simulate",
        "variant": args.variant,
        "n": args.n,
        "m": args.m,
        "y_initial": args.y_initial,
        "priors": priors.to_dict(),
        "seed": args.seed,
        "overflowed": bundle.overflowed,
    }
    _write_json(out / "run_config.json", run_config)
    if bundle.overflowed:
        raise NumericalError(
            "simulated losses overflowed; rerun with a different --seed"
        )
    write_triangle(bundle.to_triangle(), out / "triangle.csv")
    from .model import ParameterSpace

    space = ParameterSpace(Variant(args.variant), args.m, priors)
    params = dict(
        zip(space.natural_names(), (float(v) for v in space.natural_values(bundle.draw)))
    )
    _write_json(out / "params.json", {"run_config": run_config, "parameters": params})
    _write_csv(
        out / "states.csv",
        ["experience_period", "development_period", "state"],
        (
            [i + 1, j + 1, STATE_LABELS[int(bundle.states[i, j])]]
            for i in range(args.n)
            for j in range(args.m)
        ),
    )
    return EXIT_OK


def cmd_sbc(args) -> int:
    if args.replications < 1:
        raise ValidationError("--replications must be >= 1")
    out = _out_dir(args.out)
    priors = _load_priors(args.priors, default=PriorConfig.sbc_defaults())
    config = SamplerConfig(
        chains=args.chains, warmup=args.warmup, iterations=args.iterations,
        thin=args.sampler_thin, seed=args.seed,
    )
    report = run_sbc(
        Variant(args.variant), args.n, args.m, priors=priors,
        replications=args.replications, config=config, thin=args.thin,
        seed=args.seed, n_jobs=args.jobs,
    )
    run_config = {
        "command": "sbc",
        "variant": args.variant,
        "replications": args.replications,
        "n": args.n,
        "m": args.m,
        "sampler": config.to_dict(),
        "rank_thin": args.thin,
        "priors": priors.to_dict(),
        "seed": args.seed,
        "jobs": args.jobs,
    }
    _write_json(out / "run_config.json", run_config)
    payload = report.to_dict()
    payload["run_config"] = run_config
    _write_json(out / "sbc_report.json", payload)
    _write_csv(
        out / "ranks.csv",
        ["replication", "quantity", "rank", "converged"],
        ranks_table(report),
    )
    return EXIT_OK


def _read_predictions(path: Path):
    cells: dict[tuple[int, int], dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "log_density" not in reader.fieldnames:
            raise ValidationError(
                f"{path}: predictions lack log densities; refit with test data"
            )
        for row in reader:
            key = (int(row["experience_period"]), int(row["development_period"]))
            entry = cells.setdefault(key, {"y_hat": [], "log_density": []})
            entry["y_hat"].append(float(row["y_hat"]))
            if row["log_density"]:
                entry["log_density"].append(float(row["log_density"]))
    return {
        key: {name: np.asarray(vals) for name, vals in entry.items()}
        for key, entry in cells.items()
    }


def _read_cells(path: Path) -> list[tuple[int, int, float]]:
    """Plain (i, j, loss) rows; unlike a triangle these need no j=1 prefix."""
    cells = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(h.strip() for h in header) != TRIANGLE_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(TRIANGLE_HEADER)}")
        for row in reader:
            if row:
                cells.append((int(row[0]), int(row[1]), float(row[2])))
    return cells


def _read_run(path_text: str):
    path = Path(path_text)
    config_path = path / "run_config.json"
    test_path = path / "test_cells.csv"
    if not config_path.exists():
        raise ValidationError(f"{path}: not a fit output directory (no run_config.json)")
    if not test_path.exists():
        raise ValidationError(f"{path}: no test data was held out; nothing to score")
    with config_path.open(encoding="utf-8") as fh:
        run_config = json.load(fh)
    test = _read_cells(test_path)
    predictions = _read_predictions(path / "predictions.csv")
    for i, j, _ in test:
        if (i, j) not in predictions or not len(predictions[(i, j)]["log_density"]):
            raise ValidationError(f"{path}: no scored predictions for test cell ({i}, {j})")
    return run_config, sorted(test), predictions


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out)
    runs = []
    for entry in args.run:
        if "=" not in entry:
            raise ValidationError(f"--run expects LABEL=DIR, got {entry!r}")
        label, _, directory = entry.partition("=")
        run_config, test, predictions = _read_run(directory)
        runs.append({"label": label, "dir": directory, "config": run_config,
                     "test": test, "predictions": predictions})
    labels = sorted({r["label"] for r in runs})
    if len(labels) < 2:
        raise ValidationError("evaluate needs at least two distinct model labels")

    groups: dict[tuple, dict[str, dict]] = {}
    for run in runs:
        fingerprint = tuple((i, j, round(v, 9)) for i, j, v in run["test"])
        group = groups.setdefault(fingerprint, {})
        if run["label"] in group:
            raise ValidationError(
                f"duplicate runs for label {run['label']!r} on one triangle"
            )
        group[run["label"]] = run
    for fingerprint, group in groups.items():
        if set(group) != set(labels):
            raise ValidationError(
                "test sets mismatch: every triangle needs one run per label"
            )

    triangles = []
    pit_rows = []
    per_label_scores: dict[str, dict[int, dict]] = {label: {} for label in labels}
    for t_index, (fingerprint, group) in enumerate(sorted(groups.items())):
        triangle_id = group[labels[0]]["config"].get("triangle", f"triangle-{t_index}")
        entry = {"id": triangle_id, "n_test": len(fingerprint), "elpd": {}, "rmse_mean": {}}
        for label in labels:
            run = group[label]
            ld = np.stack([run["predictions"][(i, j)]["log_density"] for i, j, _ in run["test"]])
            cellwise_elpd = elpd_pointwise(ld)
            rmse = [
                rmse_cell(run["predictions"][(i, j)]["y_hat"], v)
                for i, j, v in run["test"]
            ]
            pits = [pit(run["predictions"][(i, j)]["y_hat"], v) for i, j, v in run["test"]]
            per_label_scores[label][t_index] = {
                "elpd_cells": cellwise_elpd, "rmse_cells": np.asarray(rmse),
            }
            entry["elpd"][label] = float(cellwise_elpd.sum())
            entry["rmse_mean"][label] = float(np.mean(rmse))
            for (i, j, _), value in zip(run["test"], pits):
                pit_rows.append([label, triangle_id, i, j, _fmt(value)])
        triangles.append(entry)

    pairs = []
    for a_index in range(len(labels)):
        for b_index in range(a_index + 1, len(labels)):
            label_a, label_b = labels[a_index], labels[b_index]
            per_triangle = []
            elpd_diffs, elpd_ses, rmse_diffs, rmse_ses = [], [], [], []
            for t_index, entry in enumerate(triangles):
                scores_a = per_label_scores[label_a][t_index]
                scores_b = per_label_scores[label_b][t_index]
                elpd_diff, elpd_se = score_difference(
                    scores_a["elpd_cells"], scores_b["elpd_cells"], aggregate="sum"
                )
                rmse_diff, rmse_se = score_difference(
                    scores_a["rmse_cells"], scores_b["rmse_cells"], aggregate="mean"
                )
                per_triangle.append({
                    "id": entry["id"],
                    "elpd_diff": elpd_diff, "elpd_diff_se": elpd_se,
                    "rmse_diff": rmse_diff, "rmse_diff_se": rmse_se,
                })
                elpd_diffs.append(elpd_diff)
                elpd_ses.append(elpd_se)
                rmse_diffs.append(rmse_diff)
                rmse_ses.append(rmse_se)
            combined = {}
            for metric, diffs, ses in (
                ("elpd", elpd_diffs, elpd_ses),
                ("rmse", rmse_diffs, rmse_ses),
            ):
                mean_diff, mean_se, interval = combine_triangles(diffs, ses)
                combined[metric] = {
                    "diff": mean_diff, "se": mean_se,
                    "interval": [interval[0], interval[1]],
                }
            pairs.append({"a": label_a, "b": label_b,
                          "per_triangle": per_triangle, "combined": combined})

    run_config = {
        "command": "evaluate",
        "runs": [{"label": r["label"], "dir": r["dir"]} for r in runs],
    }
    _write_json(out / "score_report.json", {
        "run_config": run_config,
        "models": labels,
        "triangles": triangles,
        "pairs": pairs,
    })
    _write_csv(
        out / "pit.csv",
        ["model", "triangle", "experience_period", "development_period", "pit"],
        pit_rows,
    )
    return EXIT_OK


def cmd_link_ratios(args) -> int:
    out = _out_dir(args.out)
    triangles = [load_triangle(path) for path in args.triangle]
    if args.labels:
        labels = args.labels.split(",")
        if len(labels) != len(triangles):
            raise ValidationError("--labels must name each --triangle once")
    else:
        labels = [Path(path).stem for path in args.triangle]
    groups: dict[str, list[Triangle]] = {}
    for label, triangle in zip(labels, triangles):
        groups.setdefault(label, []).append(triangle)
    write_link_ratio_summary(summarize_link_ratios(groups), out / "link_ratios.csv")
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "sbc": cmd_sbc,
    "evaluate": cmd_evaluate,
    "link-ratios": cmd_link_ratios,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except HmmReserveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
