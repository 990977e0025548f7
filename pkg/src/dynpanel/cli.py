"""Command-line front end.

Subcommands: ``estimate`` (one specification on one dataset),
``replicate`` (the five-column pooled/FE/RE/OD/FD comparison),
``simulate`` (Monte Carlo harness), ``describe`` (summary statistics),
and ``ratings`` (letter-grade codec). Every run that writes files also
writes a manifest with the configuration, seed, input digests, and
package version; manifests carry no timestamps so reruns are
byte-identical.

Exit codes: 0 success, 1 estimation or diagnostic failure, 2 usage or
input/output error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import DiagnosticsReport, report_for
from .errors import DataError, DynpanelError, RatingError
from .estimators import (
    EstimationResult,
    ExogTerm,
    ModelSpec,
    Weighting,
    fit_fixed_effects,
    fit_gmm,
    fit_pooled,
    fit_random_effects,
)
from .instruments import InstrumentSpec, StaticInstrument, DynamicInstrument, parse_instruments
from .panel import PanelDataset, describe, ingest_long_csv, ingest_wide_csv
from .ratings import grade_to_numeric, numeric_to_grade, scale_as_csv
from .simulate import (
    DgpSpec,
    EstimatorConfig,
    ar1_model,
    fd_od_comparison_configs,
    run_experiment,
)
from .transforms import TransformKind

SPEC_CHOICES = ("pooled", "fe", "re", "od", "fd")

_EXOG_RE = re.compile(r"^(?P<name>\w+)(?:\((?:-(?P<single>\d+)|(?P<from>\d+)\.\.(?P<to>\d+))\))?$")


def _parse_exog(terms: list[str]) -> tuple[ExogTerm, ...]:
    """Terms like ``bv``, ``bv(-2)`` (lags up to 2), or ``bv(0..2)``."""
    out = []
    for raw in terms:
        m = _EXOG_RE.match(raw.strip())
        if not m:
            raise DataError(f"cannot parse regressor term {raw!r}")
        if m.group("single") is not None:
            lags = int(m.group("single"))
        elif m.group("to") is not None:
            if int(m.group("from")) != 0:
                raise DataError(f"exogenous lag ranges must start at 0: {raw!r}")
            lags = int(m.group("to"))
        else:
            lags = 0
        out.append(ExogTerm(m.group("name"), lags))
    return tuple(out)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, command: str, inputs: list[str], outputs: list[str],
                    seed: int | None) -> None:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        k: v for k, v in sorted(vars(args).items())
        if k != "func" and not k.startswith("_")
    }
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_dataset(args) -> PanelDataset:
    if getattr(args, "wide", None):
        return ingest_wide_csv(args.data, args.wide)
    return ingest_long_csv(args.data)


def _model_for(spec: str, dep: str, ar: int, exog: tuple[ExogTerm, ...],
               intercept: bool | None) -> ModelSpec:
    transform = {
        "pooled": TransformKind.NONE,
        "fe": TransformKind.WITHIN,
        "re": TransformKind.QUASI_DEMEAN,
        "od": TransformKind.ORTHOGONAL_DEVIATION,
        "fd": TransformKind.FIRST_DIFFERENCE,
    }[spec]
    effects = {"fe": "fixed", "re": "random"}.get(spec, "none")
    if intercept is None:
        intercept = spec in ("pooled", "fe", "re")
    if spec in ("od", "fd"):
        intercept = False
    return ModelSpec(
        dependent=dep, ar_lags=ar, exogenous=exog,
        intercept=intercept, effects=effects, transform=transform,
    )


def _default_instruments(spec: str, model: ModelSpec) -> InstrumentSpec:
    """The documented defaults: dynamic blocks with starting lag 2 for
    differenced/deviated runs, two static lags of each exogenous
    regressor plus the intercept for level runs."""
    if spec in ("od", "fd"):
        dyn = [DynamicInstrument(model.dependent, 2)]
        dyn += [DynamicInstrument(t.name, 2) for t in model.exogenous]
        return InstrumentSpec(dynamic=tuple(dyn))
    static = tuple(StaticInstrument(t.name, 0, 2) for t in model.exogenous)
    return InstrumentSpec(static=static, include_intercept=True)


def _fit_one(spec: str, model: ModelSpec, data: PanelDataset, args) -> EstimationResult:
    weighting = Weighting.parse(args.weighting, max_iter=args.max_iter, tol=args.tol)
    if args.plain and spec in ("pooled", "fe", "re"):
        if spec == "pooled":
            return fit_pooled(model, data)
        if spec == "fe":
            return fit_fixed_effects(model, data, method=args.fe_method)
        return fit_random_effects(model, data)
    if args.instruments:
        inst = parse_instruments(args.instruments)
    else:
        inst = _default_instruments(spec, model)
    # instrumented level specifications keep the intercept inside the
    # instrument set; the within transform prunes it automatically
    return fit_gmm(
        model, data, inst, weighting=weighting,
        on_singular=args.on_singular, windmeijer=args.windmeijer,
    )


def _fmt(x: float, nd: int = 4) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "-"
    return f"{x:.{nd}f}"


def _render_column(result: EstimationResult, report: DiagnosticsReport) -> str:
    lines = []
    lines.append(f"Method: {result.method}   weighting steps: {result.steps_taken}")
    lines.append(
        f"Sample: {result.sample_size} obs, {result.cross_sections} cross-sections, "
        f"{result.periods_used} periods"
    )
    width = max(len("J-statistic"), *(len(n) for n in result.param_names)) + 2
    for i, name in enumerate(result.param_names):
        lines.append(f"{name:<{width}}{_fmt(result.coefficients[i])}")
        lines.append(f"{'':<{width}}({_fmt(result.standard_errors[i])})")
        lines.append(f"{'':<{width}}[{_fmt(result.t_statistics[i])}]")
    if result.r_squared_weighted != result.r_squared_unweighted:
        lines.append(f"{'R-squared':<{width}}{_fmt(result.r_squared_weighted)} (weighted)")
        lines.append(f"{'':<{width}}{_fmt(result.r_squared_unweighted)} (unweighted)")
    else:
        lines.append(f"{'R-squared':<{width}}{_fmt(result.r_squared_unweighted)}")
    if report.j is not None:
        lines.append(
            f"{'J-statistic':<{width}}{_fmt(report.j.statistic)} ({_fmt(report.j.p_value)})"
            f"  df={report.j.df}"
        )
    for t in report.ar_tests:
        lines.append(f"{f'AR({t.order})':<{width}}{_fmt(t.statistic)} ({_fmt(t.p_value)})")
    vc = result.variance_components
    if vc is not None:
        lines.append(
            f"{'rho_u/rho_e':<{width}}{_fmt(vc.rho_u)} / {_fmt(vc.rho_e)}"
        )
        if vc.sigma_u2 == 0.0:
            lines.append("note: rho_u = 0; coefficients identical to pooled")
    return "\n".join(lines)


def _result_json(result: EstimationResult, report: DiagnosticsReport) -> dict:
    out = result.to_json_dict()
    out.update(report.to_json_dict())
    if "j" not in out and result.instruments is None:
        out["j"] = None
        out["j_p"] = None
    return out


def _result_csv(result: EstimationResult) -> str:
    lines = ["name,coefficient,se,t"]
    for i, name in enumerate(result.param_names):
        lines.append(
            f"{name},{result.coefficients[i]!r},{result.standard_errors[i]!r},"
            f"{result.t_statistics[i]!r}"
        )
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    data = _load_dataset(args)
    exog = _parse_exog(args.exog or [])
    model = _model_for(args.spec, args.dep, args.ar, exog, args.intercept)
    result = _fit_one(args.spec, model, data, args)
    report = report_for(result)

    outputs = []
    out_dir = Path(args.output_dir)
    if args.fitted_out:
        out_dir.mkdir(parents=True, exist_ok=True)
        fit_path = out_dir / args.fitted_out
        result.fitted_levels.to_csv(fit_path)
        outputs.append(str(fit_path))
    if args.out == "json":
        print(json.dumps(_result_json(result, report), indent=2, sort_keys=True))
    elif args.out == "csv":
        sys.stdout.write(_result_csv(result))
    else:
        print(_render_column(result, report))
    _write_manifest(args, "estimate", [args.data], outputs, None)
    return 0


REPLICATE_SPECS = ("pooled", "fe", "re", "od", "fd")


def cmd_replicate(args) -> int:
    data = _load_dataset(args)
    needed = [args.dep] + list(args.exog_vars)
    missing = [v for v in needed if v not in data.variables]
    if missing:
        raise DataError(
            f"replicate needs series {needed}, but {missing} are not in the dataset; "
            "supply a long CSV that includes them (the brand series are not "
            "published and must be provided by the user)"
        )
    exog = tuple(ExogTerm(v, 0) for v in args.exog_vars)
    results: dict[str, EstimationResult] = {}
    reports: dict[str, DiagnosticsReport] = {}
    for spec in REPLICATE_SPECS:
        model = _model_for(spec, args.dep, 1, exog, None)
        inst = _default_instruments(spec, model)
        weighting = Weighting.parse(args.weighting, max_iter=args.max_iter, tol=args.tol)
        result = fit_gmm(
            model, data, inst, weighting=weighting, on_singular="pinv",
        )
        results[spec] = result
        reports[spec] = report_for(result)

    names: list[str] = []
    for r in results.values():
        for n in r.param_names:
            if n not in names:
                names.append(n)

    outputs: list[str] = []
    if args.out == "json":
        payload = {s: _result_json(results[s], reports[s]) for s in REPLICATE_SPECS}
        print(json.dumps(payload, indent=2, sort_keys=True))
    elif args.out == "csv":
        lines = ["row," + ",".join(REPLICATE_SPECS)]
        for n in names:
            for piece, fmt in (("", "coefficient"), ("se", "se"), ("t", "t")):
                cells = []
                for s in REPLICATE_SPECS:
                    r = results[s]
                    if n in r.param_names:
                        i = r.param_names.index(n)
                        val = {"coefficient": r.coefficients[i],
                               "se": r.standard_errors[i],
                               "t": r.t_statistics[i]}[fmt]
                        cells.append(repr(float(val)))
                    else:
                        cells.append("")
                label = n if fmt == "coefficient" else f"{n}:{fmt}"
                lines.append(label + "," + ",".join(cells))
        lines.append("r2," + ",".join(repr(results[s].r_squared_unweighted)
                                      for s in REPLICATE_SPECS))
        lines.append("j," + ",".join(
            repr(reports[s].j.statistic) if reports[s].j else ""
            for s in REPLICATE_SPECS))
        lines.append("j_p," + ",".join(
            repr(reports[s].j.p_value) if reports[s].j else ""
            for s in REPLICATE_SPECS))
        lines.append("n," + ",".join(str(results[s].sample_size)
                                     for s in REPLICATE_SPECS))
        print("\n".join(lines))
    else:
        colw = 14
        header = f"{'':<12}" + "".join(f"{s:>{colw}}" for s in REPLICATE_SPECS)
        lines = [header, "-" * len(header)]
        def row(label, cells):
            lines.append(f"{label:<12}" + "".join(f"{c:>{colw}}" for c in cells))
        for n in names:
            for fmt, deco in (("coef", "%s"), ("se", "(%s)"), ("t", "[%s]")):
                cells = []
                for s in REPLICATE_SPECS:
                    r = results[s]
                    if n in r.param_names:
                        i = r.param_names.index(n)
                        v = {"coef": r.coefficients[i], "se": r.standard_errors[i],
                             "t": r.t_statistics[i]}[fmt]
                        cells.append(deco % _fmt(v))
                    else:
                        cells.append("-")
                row(n if fmt == "coef" else "", cells)
        row("R-squared", [_fmt(results[s].r_squared_unweighted) for s in REPLICATE_SPECS])
        row("J-stat", [
            _fmt(reports[s].j.statistic) if reports[s].j else "-"
            for s in REPLICATE_SPECS
        ])
        row("", [
            f"({_fmt(reports[s].j.p_value)})" if reports[s].j else ""
            for s in REPLICATE_SPECS
        ])
        row("n", [str(results[s].sample_size) for s in REPLICATE_SPECS])
        print("\n".join(lines))
        re_vc = results["re"].variance_components
        if re_vc is not None and re_vc.sigma_u2 == 0.0:
            print("note: rho_u = 0; RE coefficients identical to pooled")
    _write_manifest(args, "replicate", [args.data], outputs, None)
    return 0


def cmd_simulate(args) -> int:
    betas = tuple(float(b) for b in args.betas.split(",")) if args.betas else (1.0,)
    dgp = DgpSpec(
        n_entities=args.entities,
        n_periods=args.periods,
        rho=args.rho,
        exogenous_betas=betas,
        sigma_effect=args.sigma_effect,
        sigma_noise=args.sigma_noise,
        burn_in=args.burn_in,
        missingness=args.missingness,
        seed=args.seed,
    )
    n_x = len(betas)
    weighting = Weighting.parse(args.weighting, max_iter=args.max_iter, tol=args.tol)
    fresh = {
        c.name: c for c in fd_od_comparison_configs(n_x=n_x, weighting=weighting)
    }
    configs = []
    for spec in args.estimators.split(","):
        spec = spec.strip()
        if spec in ("od", "fd"):
            # fresh-lag bounded dynamic blocks: the canonical comparison sets
            configs.append(fresh[spec])
            continue
        transform = {
            "pooled": TransformKind.NONE,
            "fe": TransformKind.WITHIN,
            "re": TransformKind.QUASI_DEMEAN,
        }.get(spec)
        if transform is None:
            raise DataError(f"unknown estimator {spec!r}; choose from {SPEC_CHOICES}")
        configs.append(EstimatorConfig(spec, ar1_model(transform, n_x=n_x)))
    summary = run_experiment(dgp, configs, reps=args.reps)

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{args.out_prefix}_summary.csv"
    json_path = out_dir / f"{args.out_prefix}_summary.json"
    csv_path.write_text(summary.to_csv(), encoding="utf-8")
    json_path.write_text(summary.to_json() + "\n", encoding="utf-8")
    print(f"wrote {csv_path} and {json_path}")
    print(f"seed ledger: root seed {dgp.seed}, replications 0..{args.reps - 1}")
    for est in summary.estimators:
        focus = f"{'y(-1)'}"
        stats = est.coef_stats.get(focus)
        if stats:
            print(
                f"{est.name}: mean rho_hat {stats.mean:.4f} "
                f"(bias {stats.bias:+.4f}, rmse {stats.rmse:.4f}), "
                f"failures {est.n_failed}"
            )
    _write_manifest(args, "simulate", [], [str(csv_path), str(json_path)], args.seed)
    return 0


def cmd_describe(args) -> int:
    data = _load_dataset(args)
    variables = args.vars.split(",") if args.vars else list(data.variables)
    stats = {v: describe(data, v) for v in variables}
    if args.out == "json":
        print(json.dumps({v: s.to_json_dict() for v, s in stats.items()},
                         indent=2, sort_keys=True))
    else:
        cols = ["mean", "median", "max", "min", "sd", "skewness", "kurtosis", "n"]
        print(f"{'variable':<12}" + "".join(f"{c:>12}" for c in cols))
        for v, s in stats.items():
            d = s.to_json_dict()
            print(f"{v:<12}" + "".join(
                f"{d[c]:>12}" if c == "n" else f"{d[c]:>12.4f}" for c in cols
            ))
    return 0


def cmd_ratings(args) -> int:
    if args.export_csv:
        Path(args.export_csv).write_text(scale_as_csv(), encoding="utf-8")
        print(f"wrote {args.export_csv}")
        return 0
    if args.grade is not None:
        print(f"{grade_to_numeric(args.grade):.2f}")
        return 0
    if args.value is not None:
        print(numeric_to_grade(args.value))
        return 0
    raise DataError("ratings needs --grade, --value, or --export-csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynpanel",
        description="Dynamic panel estimation: pooled/FE/RE and Arellano-Bond "
                    "style GMM on FD/OD-transformed panels.",
    )
    parser.add_argument("--version", action="version", version=f"dynpanel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_weighting=True, max_iter=100):
        p.add_argument("--output-dir", default=os.environ.get("DYNPANEL_OUTPUT_DIR", "."),
                       help="directory for output files and the run manifest")
        if with_weighting:
            p.add_argument("--weighting", default="n-step",
                           choices=["one-step", "two-step", "n-step"])
            p.add_argument("--max-iter", type=int, default=max_iter)
            p.add_argument("--tol", type=float, default=1e-8)

    p_est = sub.add_parser("estimate", help="fit one specification")
    p_est.add_argument("--data", required=True, help="input CSV path")
    p_est.add_argument("--wide", metavar="VAR",
                       help="treat input as wide-format CSV holding VAR")
    p_est.add_argument("--spec", required=True, choices=SPEC_CHOICES)
    p_est.add_argument("--dep", required=True, help="dependent variable name")
    p_est.add_argument("--ar", type=int, default=1, help="lags of the dependent")
    p_est.add_argument("--exog", action="append", metavar="TERM",
                       help="exogenous term: name, name(-K), or name(0..K)")
    p_est.add_argument("--instruments", help="dyn(VAR,S[,B])[:collapse], "
                       "static(VAR,F..T), intercept; comma-separated")
    p_est.add_argument("--plain", action="store_true",
                       help="plain OLS/LSDV/GLS instead of instrumented GMM "
                            "for pooled/fe/re")
    p_est.add_argument("--intercept", action=argparse.BooleanOptionalAction,
                       default=None)
    p_est.add_argument("--fe-method", default="within", choices=["within", "lsdv"])
    p_est.add_argument("--on-singular", default="error", choices=["error", "pinv"])
    p_est.add_argument("--windmeijer", action="store_true")
    p_est.add_argument("--out", default="table", choices=["table", "csv", "json"])
    p_est.add_argument("--fitted-out", metavar="FILE.csv",
                       help="write the aligned actual/fitted table")
    add_common(p_est)
    p_est.set_defaults(func=cmd_estimate)

    p_rep = sub.add_parser("replicate",
                           help="five-column pooled/FE/RE/OD/FD comparison")
    p_rep.add_argument("--data", required=True)
    p_rep.add_argument("--wide", metavar="VAR")
    p_rep.add_argument("--dep", default="pp")
    p_rep.add_argument("--exog-vars", nargs="*", default=["bv", "bt"])
    p_rep.add_argument("--out", default="table", choices=["table", "csv", "json"])
    add_common(p_rep, max_iter=500)
    p_rep.set_defaults(func=cmd_replicate)

    p_sim = sub.add_parser("simulate", help="Monte Carlo experiment")
    p_sim.add_argument("--entities", type=int, default=100)
    p_sim.add_argument("--periods", type=int, default=10)
    p_sim.add_argument("--rho", type=float, default=0.5)
    p_sim.add_argument("--betas", default="1.0", help="comma-separated x coefficients")
    p_sim.add_argument("--sigma-effect", type=float, default=1.0)
    p_sim.add_argument("--sigma-noise", type=float, default=1.0)
    p_sim.add_argument("--burn-in", type=int, default=50)
    p_sim.add_argument("--missingness", type=float, default=0.0)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--estimators", default="od,fd")
    p_sim.add_argument("--out-prefix", default="mc")
    add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_desc = sub.add_parser("describe", help="descriptive statistics")
    p_desc.add_argument("--data", required=True)
    p_desc.add_argument("--wide", metavar="VAR")
    p_desc.add_argument("--vars", help="comma-separated variable names")
    p_desc.add_argument("--out", default="table", choices=["table", "json"])
    add_common(p_desc, with_weighting=False)
    p_desc.set_defaults(func=cmd_describe)

    p_rat = sub.add_parser("ratings", help="letter-grade codec")
    group = p_rat.add_mutually_exclusive_group()
    group.add_argument("--grade", help="letter grade to convert to its value")
    group.add_argument("--value", type=float, help="numeric value to convert to a grade")
    group.add_argument("--export-csv", metavar="PATH", help="dump the scale as CSV")
    add_common(p_rat, with_weighting=False)
    p_rat.set_defaults(func=cmd_ratings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except (DataError, RatingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DynpanelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
