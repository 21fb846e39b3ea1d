"""Command-line front end.

    ecoinf simulate   --preset palermo|table1 | --config cfg.json  --out DIR
    ecoinf estimate   --data DIR --method goodman|king-ols|brown-payne|multilevel|raw
    ecoinf diagnose   --data DIR --test bias-condition|quartiles|error-sd|compare
    ecoinf compare    --truth truth.json REPORT [REPORT ...]
    ecoinf experiment --config exp.json --out DIR

Exit codes: 0 success, 2 invalid input, 3 non-convergence (results are
still written), 1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import io as eio
from .brown_payne import bp_predict_cells
from .core import ValidationError
from .diagnostics import bias_condition_test, compare_estimates, prediction_error_sd, quartile_summary
from .experiment import (
    METHODS,
    ExperimentConfig,
    ExperimentError,
    covariate_matrix,
    estimate,
    run_experiment,
)
from .multilevel import predict_cells
from .synth import GeneratorConfig, generate, palermo_like_config, table1_fixture

log = logging.getLogger("ecoinf")

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_NONCONV = 0, 1, 2, 3


def _emit(obj, out, fmt):
    """Write a dict (json) or DataFrame (csv) to ``out`` or stdout."""
    if fmt == "csv":
        frame = obj if isinstance(obj, pd.DataFrame) else pd.DataFrame(obj)
        text = frame.to_csv(index=False, lineterminator="\n")
    else:
        text = eio.dumps(obj.to_dict(orient="records") if isinstance(obj, pd.DataFrame) else obj) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _pi_frame(pi, meta, method):
    pi = np.asarray(pi)
    rows = meta.row_labels or [f"x{i + 1}" for i in range(pi.shape[0])]
    cols = meta.col_labels or [f"y{j + 1}" for j in range(pi.shape[1])]
    return pd.DataFrame(
        [{"method": method, "row": rows[i], "col": cols[j], "pi": pi[i, j]}
         for i in range(pi.shape[0]) for j in range(pi.shape[1])]
    )


def _load(args):
    ds = eio.read_dataset(args.data, aggregated=getattr(args, "aggregated", None),
                          individual=getattr(args, "individual", None),
                          covariates=getattr(args, "covariates", None))
    rep = ds.validate()
    if not rep.ok:
        raise ValidationError("; ".join(rep.violations[:10]))
    return ds


def cmd_simulate(args) -> int:
    if args.config:
        g = json.loads(Path(args.config).read_text())
        preset = g.pop("preset", None)
        if args.seed is not None:
            g["seed"] = args.seed
        cfg = palermo_like_config(**g) if preset == "palermo" else GeneratorConfig.from_dict(g)
        pop = generate(cfg)
        cfg_dict = cfg.to_dict()
    elif args.preset == "table1":
        pop = table1_fixture(args.scale)
        cfg_dict = {"preset": "table1", "scale": args.scale}
    else:
        cfg = palermo_like_config(seed=args.seed or 0)
        pop = generate(cfg)
        cfg_dict = cfg.to_dict()
    out = Path(args.out)
    eio.write_dataset(out, pop.dataset())
    truth = {
        "pi_bar": pop.true_pi_bar(),
        "pi_pooled": pop.pooled_pi(),
        "pi0": pop.truth.get("pi0"),
        "sigma_station": pop.truth.get("sigma_station"),
        "sigma_seat": pop.truth.get("sigma_seat"),
        "config": cfg_dict,
    }
    eio.write_json(out / "truth.json", truth)
    log.info("wrote %d units to %s", len(pop.units), out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    ds = _load(args)
    Z = None
    if args.method in ("king-ols", "brown-payne", "multilevel"):
        Z = covariate_matrix(ds, args.covariate_set or ("data" if ds.covariates is not None else "none"))
    report, _, ok = estimate(
        ds, args.method, covariates=Z, weighted=args.weighted, truncate=not args.no_truncate,
        fix_phi=args.fix_phi, fix_tau=args.fix_tau, per_group=args.per_group, levels=args.levels,
    )
    report["diagnostics"]["converged"] = bool(ok)
    if args.format == "csv":
        _emit(_pi_frame(report["pi"], ds.meta, args.method), args.out, "csv")
    else:
        _emit(report, args.out, "json")
    if not ok:
        log.warning("%s did not converge", args.method)
        return EXIT_NONCONV
    return EXIT_OK


def _truth_pi(path):
    t = eio.read_json(path)
    return np.asarray(t["pi_bar"] if isinstance(t, dict) and "pi_bar" in t else t, dtype=float)


def _compare(truth_path, report_paths, out, fmt):
    truth = _truth_pi(truth_path)
    est = []
    for p in report_paths:
        r = eio.read_json(p)
        est.append((r["method"], np.asarray(r["pi"], dtype=float)))
    res = compare_estimates(est, truth)
    if fmt == "csv":
        _emit(pd.DataFrame(res["methods"]), out, "csv")
    else:
        _emit(res, out, "json")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.test == "compare":
        if not args.truth or not args.reports:
            raise ValidationError("--test compare needs --truth and --reports")
        return _compare(args.truth, args.reports, args.out, args.format)
    ds = _load(args)
    if ds.tables is None:
        raise ValidationError(f"{args.test} needs individual-level data")
    if args.test == "bias-condition":
        rep = bias_condition_test(ds.tables, alpha=args.alpha)
        _emit(rep.to_frame() if args.format == "csv" else rep.to_dict(), args.out, args.format)
        return EXIT_OK
    if args.test == "quartiles":
        g = args.grouping
        if g in ds.covariate_names:
            grouping = ds.covariates[:, list(ds.covariate_names).index(g)]
        else:
            try:
                grouping = int(g) - 1
            except ValueError:
                raise ValidationError(f"grouping {g!r} is neither a row number nor a covariate") from None
            if not 0 <= grouping < ds.meta.R:
                raise ValidationError(f"row {g} outside 1..{ds.meta.R}")
        df = quartile_summary(ds.tables, grouping, weighted=args.weighted)
        _emit(df, args.out, args.format)
        return EXIT_OK
    # error-sd: covariate Brown-Payne against the multilevel model
    Z = covariate_matrix(ds, args.covariate_set or ("data" if ds.covariates is not None else "none"))
    X = np.array([u.x for u in ds.units], dtype=float)
    _, bp, ok1 = estimate(ds, "brown-payne", covariates=Z)
    _, ml, ok2 = estimate(ds, "multilevel", covariates=Z, per_group=args.per_group, compute_se=False)
    bp_cells = bp_predict_cells(bp, ds.units, Z)[:, :, -1]
    ml_cells = predict_cells(ml, X, Z)
    obs = np.array([t.counts[:, -1] for t in ds.tables], dtype=float)
    rep = prediction_error_sd(
        {"brown-payne": (bp_cells.sum(axis=1), bp_cells), "multilevel": (ml_cells.sum(axis=1), ml_cells)},
        obs.sum(axis=1), obs,
    )
    if args.format == "csv":
        rows = ds.meta.row_labels or [f"x{i + 1}" for i in range(ds.meta.R)]
        recs = [{"method": m, "cell": "overall", "sd": v} for m, v in rep.overall_sd.items()]
        recs += [{"method": m, "cell": rows[i], "sd": float(v[i])}
                 for m, v in rep.cell_sd.items() for i in range(len(v))]
        _emit(pd.DataFrame(recs), args.out, "csv")
    else:
        _emit(rep.to_dict(), args.out, "json")
    return EXIT_OK if ok1 and ok2 else EXIT_NONCONV


def cmd_compare(args) -> int:
    return _compare(args.truth, args.reports, args.out, args.format)


def cmd_experiment(args) -> int:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["out"] = args.out
    if args.replications:
        d["replications"] = args.replications
    cfg = ExperimentConfig.from_dict(d)
    try:
        report = run_experiment(cfg)
    except ExperimentError as e:
        log.error("experiment failed: %s", e)
        return EXIT_INVALID if isinstance(e.__cause__, ValidationError) else EXIT_FAIL
    if not cfg.out:
        _emit(report, None, "json")
    return EXIT_OK if report["converged"] else EXIT_NONCONV


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecoinf", description="Ecological inference for R x C tables.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        if fmt:
            sp.add_argument("--format", choices=("csv", "json"), default="json")

    def data(sp):
        sp.add_argument("--data", default=None, help="directory with aggregated.csv etc.")
        sp.add_argument("--aggregated", default=None)
        sp.add_argument("--individual", default=None)
        sp.add_argument("--covariates", default=None, help="covariate CSV")

    s = sub.add_parser("simulate", help="generate a synthetic population")
    common(s, fmt=False)
    s.add_argument("--config", default=None, help="generator config JSON")
    s.add_argument("--preset", choices=("palermo", "table1"), default="palermo")
    s.add_argument("--scale", type=int, default=20)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate the transition matrix")
    common(e)
    data(e)
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--weighted", action="store_true")
    e.add_argument("--no-truncate", action="store_true")
    e.add_argument("--covariate-set", choices=("none", "data", "margins"), default=None,
                   help="default: the covariate file if one is given")
    e.add_argument("--fix-phi", type=float, default=None)
    e.add_argument("--fix-tau", type=float, default=None)
    e.add_argument("--per-group", action="store_true")
    e.add_argument("--levels", type=int, choices=(2, 3), default=3)
    e.set_defaults(func=cmd_estimate)

    d = sub.add_parser("diagnose", help="bias-condition test, quartiles, error SDs")
    common(d)
    data(d)
    d.add_argument("--test", choices=("bias-condition", "quartiles", "error-sd", "compare"), required=True)
    d.add_argument("--alpha", type=float, default=0.01)
    d.add_argument("--grouping", default="1", help="row number (1-based) or covariate name")
    d.add_argument("--weighted", action="store_true", help="size-weighted quartiles")
    d.add_argument("--covariate-set", choices=("none", "data", "margins"), default=None)
    d.add_argument("--per-group", action="store_true")
    d.add_argument("--truth", default=None)
    d.add_argument("--reports", nargs="*", default=None)
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("compare", help="compare estimate reports with a truth file")
    common(c)
    c.add_argument("--truth", required=True)
    c.add_argument("reports", nargs="+")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("experiment", help="replicated simulate/estimate/diagnose pipeline")
    common(x, fmt=False)
    x.add_argument("--config", default=None)
    x.add_argument("--replications", type=int, default=None)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
