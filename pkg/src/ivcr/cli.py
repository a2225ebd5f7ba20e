"""Command line interface: fit, simulate, rr.

Every run writes its outputs plus a manifest.json recording the resolved
options, the input digest, the seed, and the tool version, so a run can
be reproduced exactly from the manifest alone. Numeric CSV cells use
round-trip float formatting.

Exit codes: 0 success, 2 validation problems, 3 singular estimating
equation, 4 empty subgroup.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import InstrumentModelSpec, fit_instrument_model, parse_cohort_csv
from .errors import (
    EmptySubgroupError,
    IvcrError,
    SingularDenominatorError,
    SingularNormalEquationsError,
    ValidationError,
)
from .estimator import fit_iv_competing, write_curves_csv
from .functionals import bootstrap_rr, write_rr_csv
from .inference import accumulate_transitions, compute_weights, theta_jacobian, variance_bands, write_bands_csv
from .simulation import SCENARIO_NAMES, run_monte_carlo, scenario_config, write_summary_csv, write_summary_json

THREADS_ENV = "IVCR_THREADS"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SINGULAR = 3
EXIT_EMPTY_SUBGROUP = 4

IV_MODEL_FAMILIES = {"mean": "intercept_only", "linear": "linear", "logistic": "logistic"}


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ValidationError(f"{flag} expects comma-separated numbers, got {text!r}") from None
    if not values:
        raise ValidationError(f"{flag} is empty")
    return values


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, subcommand: str, options: dict, digest: str | None,
                    seed: int | None) -> None:
    manifest = {
        "subcommand": subcommand,
        "options": options,
        "input_sha256": digest,
        "seed": seed,
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _add_column_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="cohort CSV with a header row")
    p.add_argument("--time-col", default="time")
    p.add_argument("--cause-col", default="cause")
    p.add_argument("--exposure-col", default="exposure")
    p.add_argument("--instrument-col", required=True)
    p.add_argument("--covariate-cols", default="", help="comma-separated covariate column names")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivcr",
        description="Instrumental-variable effect curves for competing risks data.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_fit = sub.add_parser("fit", help="fit effect curves and pointwise bands from a CSV cohort")
    _add_column_flags(p_fit)
    p_fit.add_argument("--iv-model", choices=sorted(IV_MODEL_FAMILIES), default="mean")
    p_fit.add_argument("--horizon", type=float, default=None)
    p_fit.add_argument("--eval-times", default=None,
                       help="comma-separated band evaluation times (default: every event time)")
    p_fit.add_argument("--out-dir", default=".")

    p_sim = sub.add_parser("simulate", help="run a seeded Monte Carlo scenario summary")
    p_sim.add_argument("--scenario", choices=SCENARIO_NAMES, required=True)
    p_sim.add_argument("--n", type=int, default=1600)
    p_sim.add_argument("--rho", type=float, default=0.3)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--time-points", default="0.5,1.5,2.5")
    p_sim.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or 1); never changes results")
    p_sim.add_argument("--out-dir", default=".")

    p_rr = sub.add_parser("rr", help="relative-risk curve for one subgroup, bootstrap bands")
    _add_column_flags(p_rr)
    p_rr.add_argument("--exposure-level", type=float, required=True)
    p_rr.add_argument("--instrument-level", type=float, required=True)
    p_rr.add_argument("--iv-model", choices=sorted(IV_MODEL_FAMILIES), default="mean")
    p_rr.add_argument("--horizon", type=float, default=None)
    p_rr.add_argument("--boot", type=int, default=500, help="bootstrap replicates (0: no bands)")
    p_rr.add_argument("--seed", type=int, default=0)
    p_rr.add_argument("--time-points", required=True)
    p_rr.add_argument("--threads", type=int, default=None)
    p_rr.add_argument("--out-dir", default=".")
    return parser


def _load_cohort(args):
    covs = [c for c in args.covariate_cols.split(",") if c.strip()]
    path = Path(args.input)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    data = parse_cohort_csv(path, time_col=args.time_col, cause_col=args.cause_col,
                            exposure_col=args.exposure_col, instrument_col=args.instrument_col,
                            covariate_cols=covs)
    family = IV_MODEL_FAMILIES[args.iv_model]
    spec = InstrumentModelSpec(family=family, covariate_indices=tuple(range(len(covs)))
                               if family != "intercept_only" else ())
    return data, spec, _sha256(path)


def cmd_fit(args) -> int:
    data, spec, digest = _load_cohort(args)
    model = fit_instrument_model(data, spec)
    fit = fit_iv_competing(data, model, horizon=args.horizon)
    if args.eval_times is None:
        eval_times = np.unique(fit.per_jump.times)
    else:
        eval_times = np.asarray(sorted(_parse_floats(args.eval_times, "--eval-times")))
    weights = compute_weights(fit, data)
    transitions = accumulate_transitions(weights)
    jac = theta_jacobian(fit, data)
    bands, _ = variance_bands(fit, data, weights, transitions, jac, eval_times)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curves_csv(fit, out / "curves.csv")
    write_bands_csv(bands, out / "bands.csv")
    _write_manifest(out, "fit", {
        "input": str(args.input), "time_col": args.time_col, "cause_col": args.cause_col,
        "exposure_col": args.exposure_col, "instrument_col": args.instrument_col,
        "covariate_cols": args.covariate_cols, "iv_model": args.iv_model,
        "horizon": args.horizon if args.horizon is not None else fit.horizon,
        "eval_times": [float(t) for t in eval_times],
    }, digest, None)
    print(f"wrote {out / 'curves.csv'}, {out / 'bands.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    threads = args.threads if args.threads is not None else _default_threads()
    time_points = _parse_floats(args.time_points, "--time-points")
    config = scenario_config(args.scenario, n=args.n, rho=args.rho, seed=args.seed)
    summary = run_monte_carlo(config, replications=args.reps, time_points=time_points,
                              workers=threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(summary, out / "table.csv")
    write_summary_json(summary, out / "table.json")
    # threads are a runtime resource knob, not part of the result; the
    # manifest stays identical across worker counts
    _write_manifest(out, "simulate", {
        "scenario": args.scenario, "n": args.n, "rho": args.rho, "reps": args.reps,
        "time_points": time_points,
    }, None, args.seed)
    if summary.n_failed:
        print(f"warning: {summary.n_failed} of {args.reps} replicates failed", file=sys.stderr)
    print(f"wrote {out / 'table.csv'}, {out / 'table.json'}, {out / 'manifest.json'}")
    return EXIT_OK


def cmd_rr(args) -> int:
    data, spec, digest = _load_cohort(args)
    threads = args.threads if args.threads is not None else _default_threads()
    times = sorted(_parse_floats(args.time_points, "--time-points"))
    rr = bootstrap_rr(data, args.exposure_level, args.instrument_level, spec, times,
                      replicates=args.boot, seed=args.seed, horizon=args.horizon,
                      workers=threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rr_csv(rr, out / "rr.csv")
    _write_manifest(out, "rr", {
        "input": str(args.input), "time_col": args.time_col, "cause_col": args.cause_col,
        "exposure_col": args.exposure_col, "instrument_col": args.instrument_col,
        "covariate_cols": args.covariate_cols, "iv_model": args.iv_model,
        "exposure_level": args.exposure_level, "instrument_level": args.instrument_level,
        "horizon": args.horizon, "boot": args.boot, "time_points": times,
    }, digest, args.seed)
    if args.boot and rr.lower is None:
        print(f"warning: bands withheld, only {rr.n_replicates} of {args.boot} "
              "bootstrap replicates succeeded (need 80%)", file=sys.stderr)
    print(f"wrote {out / 'rr.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"fit": cmd_fit, "simulate": cmd_simulate, "rr": cmd_rr}[args.subcommand]
    try:
        return handler(args)
    except (SingularDenominatorError, SingularNormalEquationsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except EmptySubgroupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_SUBGROUP
    except (IvcrError, OSError) as exc:
        # bad input data, unreadable files, rank-deficient designs:
        # everything that means "fix your invocation", not "estimator broke"
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
