"""Command-line interface.

Subcommands: ``estimate``, ``bootstrap``, ``mc``, ``pseudo-true`` and
``kde``. Each accepts ``--config FILE`` holding a JSON object of option
values; explicit flags override it. Errors are written to stderr as JSON.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 partial
results written.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .montecarlo import version_string
from .errors import BootstrapError, GelbootError, InputError

log = logging.getLogger("gelboot")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


class PartialResults(Exception):
    """Outputs were written but some cells are incomplete."""


def load_schema(name: str) -> dict:
    text = resources.files("gelboot").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(obj: dict, name: str) -> dict:
    jsonschema.validate(obj, load_schema(name))
    return obj


def _clean(x):
    """JSON-safe copy: numpy to builtin, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(obj, path, schema):
    obj = validate(_clean(obj), schema)
    text = json.dumps(obj, indent=2)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")
    return obj


def _workers(value):
    from .bootstrap import default_workers

    return default_workers() if value is None else max(1, int(value))


def _load(args):
    from .models import load_csv, model_from_descriptor

    data = load_csv(args.data)
    model = model_from_descriptor(args.model, data)
    return data, model


def _opts(args):
    from .gel import SolveOptions

    kw = {"seed": args.seed}
    if args.multistart is not None:
        kw["multistart"] = args.multistart
    if args.theta0 is not None:
        kw["theta0"] = tuple(float(v) for v in str(args.theta0).split(","))
    return SolveOptions(**kw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    from .gel import estimate, ubc_diagnostic
    from .inference import j_tests
    from .variance import covariance

    data, model = _load(args)
    dims = model.dims
    kinds = ["EL", "ET", "ETEL"] if args.kind.upper() == "ALL" else [args.kind.upper()]
    opts = _opts(args)
    out = []
    for kind in kinds:
        fit = estimate(kind, model, data, opts)
        cov = covariance(kind, model, data, fit)
        rec = {
            "kind": kind,
            "theta": fit.theta_hat,
            "lambda": fit.lambda_hat,
            "se_C": cov.se("C"),
            "se_MR": cov.se("MR"),
            "criterion": fit.criterion,
            "converged": fit.converged,
            "foc_residual": fit.foc_residual,
            "j_tests": [],
        }
        if kind == "ETEL":
            rec["kappa"], rec["tau"] = fit.kappa_hat, fit.tau_hat
        if kind == "EL":
            rec["ubc"] = ubc_diagnostic(fit, model, data, opts)
        if dims.overidentified:
            rec["j_tests"] = [
                {"variant": j.variant, "statistic": j.statistic, "df": j.df, "p_value": j.p_value} for j in j_tests(fit, model, data, opts)
            ]
        out.append(rec)
    report = {"tool": "gelboot", "version": version_string(), "n": data.n, "l_theta": dims.l_theta, "l_g": dims.l_g, "estimates": out}
    report = _write_json(report, args.out, "estimate_report")
    if args.out not in (None, "-"):
        _print_estimates(report)
    return EXIT_OK


def _print_estimates(report):
    print(f"n = {report['n']}, L_theta = {report['l_theta']}, L_g = {report['l_g']}")
    print(f"{'kind':<6}{'coef':>6}{'estimate':>14}{'s.e. C':>12}{'s.e. MR':>12}")
    for rec in report["estimates"]:
        for a, th in enumerate(rec["theta"]):
            print(f"{rec['kind']:<6}{a:>6}{th:>14.6f}{rec['se_C'][a]:>12.6f}{rec['se_MR'][a]:>12.6f}")
        for j in rec["j_tests"]:
            print(f"      {j['variant']:<8} stat = {j['statistic']}, p = {j['p_value']}")
        if "ubc" in rec and rec["ubc"]["flag"]:
            print("      warning: EL slack near zero; the moment function may be unbounded")


def _restriction(args, l_theta):
    from .inference import RestrictionFn

    if args.restriction is None:
        return None, None
    spec = json.loads(args.restriction) if str(args.restriction).strip().startswith("{") else json.loads(Path(args.restriction).read_text())
    try:
        R = np.atleast_2d(np.asarray(spec["R"], dtype=float))
        c = np.atleast_1d(np.asarray(spec.get("c", np.zeros(R.shape[0])), dtype=float))
    except (KeyError, ValueError) as exc:
        raise InputError(f"restriction needs R (and optionally c): {exc}") from None
    if R.shape[1] != l_theta:
        raise InputError(f"restriction matrix has {R.shape[1]} columns, expected {l_theta}")
    # eta(theta) = R theta; the null value is c
    return RestrictionFn.linear(R), c


def cmd_bootstrap(args) -> int:
    from .bootstrap import ResampleScheme, bootstrap_ci, bootstrap_t, bootstrap_wald, quantile
    from .gel import estimate
    from .inference import wald_form
    from .variance import covariance

    if args.B < 1:
        raise InputError("B must be at least 1")
    if not 0 < args.alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    data, model = _load(args)
    kind = args.kind.upper()
    opts = _opts(args)
    fit = estimate(kind, model, data, opts)
    cov = covariance(kind, model, data, fit)
    r = args.coord
    if not 0 <= r < model.dims.l_theta:
        raise InputError(f"coordinate {r} out of range")
    scheme = ResampleScheme.from_name(args.scheme, fit, args.epsilon)
    eta, null = _restriction(args, model.dims.l_theta)
    workers = _workers(args.workers)
    if eta is None:
        dist = bootstrap_t(fit, cov, model, data, scheme, args.B, r, args.seed, opts, workers)
    else:
        dist = bootstrap_wald(fit, cov, model, data, scheme, args.B, eta, args.seed, opts, workers, r)
    a = args.alpha
    se = float(np.sqrt(cov.sigma_mr[r, r] / cov.n))
    crit = {
        "z_T_alpha": quantile(dist, "T", a).value,
        "z_absT_alpha": quantile(dist, "|T|", a).value,
        "z_T_alpha_half": quantile(dist, "T", a / 2).value,
        "z_T_one_minus_alpha_half": quantile(dist, "T", 1 - a / 2).value,
    }
    shapes = [s.strip() for s in args.shapes.split(",") if s.strip()]
    intervals = {s: list(bootstrap_ci(fit, cov, dist, r, a, s)) for s in shapes}
    report = {
        "tool": "gelboot",
        "version": version_string(),
        "kind": kind,
        "scheme": scheme.kind.value,
        "B": args.B,
        "seed": args.seed,
        "coordinate": r,
        "theta_hat": float(fit.theta_hat[r]),
        "se_MR": se,
        "alpha": a,
        "critical_values": crit,
        "intervals": intervals,
        "replicates_used": int(dist.t_star.shape[0]),
        "failures": len(dist.failures),
    }
    if eta is not None:
        zW = quantile(dist, "W", a).value
        crit["z_W_alpha"] = zW
        stat = wald_form(eta(fit.theta_hat) - null, eta.jacobian(fit.theta_hat), cov.sigma_mr, cov.n)
        report["wald"] = {"statistic": stat, "critical_value": zW, "contains_null": bool(stat <= zW)}
    if args.t_star_out:
        dist.to_csv(args.t_star_out, "T")
        report["t_star_csv"] = str(args.t_star_out)
    _write_json(report, args.out, "bootstrap_report")
    return EXIT_OK


def _mc_config(args):
    from .montecarlo import McConfig

    try:
        raw = json.loads(Path(args.config_file).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {args.config_file}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.config_file}: invalid JSON: {exc}") from None
    for key in ("reps", "seed", "workers", "multistart"):
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    if "workers" not in raw:
        raw["workers"] = _workers(None)
    validate(raw, "mc_config")
    return McConfig.from_dict(raw), raw


def cmd_mc(args) -> int:
    from .montecarlo import emit_table, run_warp_speed, write_manifest

    cfg, _ = _mc_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    table = run_warp_speed(cfg)
    paths = [emit_table(table, out / "table.csv", "csv"), emit_table(table, out / "table.md", "markdown")]
    manifest = write_manifest(table, out / "manifest.json", paths, started)
    validate(_clean(manifest), "manifest")
    print((out / "table.md").read_text())
    if manifest["flagged_rows"]:
        raise PartialResults(f"rows with more than 5% failed repetitions: {', '.join(manifest['flagged_rows'])}")
    return EXIT_OK


def cmd_pseudo_true(args) -> int:
    from .dgp import DgpSpec, pseudo_true

    spec = DgpSpec(args.dgp, args.T, args.n or 100, rho1=args.rho1, rho2=args.rho2, seed=args.seed)
    kinds = [k.strip().upper() for k in args.kinds.split(",")]
    res = pseudo_true(spec, kinds, n=args.n_large, cache_dir=args.cache_dir)
    report = {"tool": "gelboot", "version": version_string(), "dgp": {"name": spec.name, "T": spec.T, "rho1": spec.rho1, "rho2": spec.rho2, "seed": spec.seed}}
    report.update(res.to_dict())
    _write_json(report, args.out, "pseudo_true_report")
    return EXIT_OK


def cmd_kde(args) -> int:
    from .kde import kde_grid, read_draws_csv, write_kde_csv

    draws = read_draws_csv(args.input)
    grid, dens, h = kde_grid(draws, args.bandwidth)
    if args.out in (None, "-"):
        print("x,density")
        for a, b in zip(grid, dens):
            print(f"{a!r},{b!r}")
    else:
        write_kde_csv(args.out, grid, dens)
        log.info("bandwidth %.6g, %d grid points written to %s", h, grid.shape[0], args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, with_data=True):
    p.add_argument("--config", help="JSON file of option values; flags override it")
    if with_data:
        p.add_argument("data", help="CSV data file with a header row")
        p.add_argument("model", help="JSON model descriptor")
        p.add_argument("--kind", default="EL", help="EL, ET or ETEL")
        p.add_argument("--multistart", type=int, default=None)
        p.add_argument("--theta0", default=None, help="comma-separated starting value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path ('-' or omitted: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gelboot", description="GEL estimation and misspecification-robust bootstrap inference")
    parser.add_argument("--version", action="version", version=f"gelboot {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit EL, ET and/or ETEL")
    _common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bootstrap", help="percentile-t bootstrap intervals")
    _common(p)
    p.add_argument("--B", type=int, default=999)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--shapes", default="one_sided,symmetric,equal_tailed")
    p.add_argument("--scheme", default="IID", help="IID, BN or SHRINKAGE")
    p.add_argument("--epsilon", type=float, default=None, help="shrinkage weight on the implied probabilities")
    p.add_argument("--coord", type=int, default=0)
    p.add_argument("--restriction", default=None, help='JSON {"R": [[...]], "c": [...]} or a path to one')
    p.add_argument("--t-star-out", dest="t_star_out", default=None)
    p.add_argument("--workers", type=int, default=None, help="default: GELBOOT_THREADS or 1")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("mc", help="warp-speed Monte Carlo")
    p.add_argument("config_file", help="JSON Monte Carlo configuration")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--out-dir", dest="out_dir", default="mc_out")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--multistart", type=int, default=None)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("pseudo-true", help="large-sample pseudo-true values")
    _common(p, with_data=False)
    p.add_argument("--dgp", default="M1")
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--n", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--n-large", dest="n_large", type=int, default=None, help="default: 30000 (T=4), 20000 (T>4)")
    p.add_argument("--rho1", type=float, default=0.6)
    p.add_argument("--rho2", type=float, default=0.2)
    p.add_argument("--kinds", default="EL,ET,ETEL,GMM")
    p.add_argument("--cache-dir", dest="cache_dir", default=None)
    p.set_defaults(func=cmd_pseudo_true)

    p = sub.add_parser("kde", help="kernel density of bootstrap draws")
    p.add_argument("input", help="single-column CSV of draws")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", help="JSON file of option values")
    p.set_defaults(func=cmd_kde)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(conf, dict):
            raise InputError("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(conf) - known
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in conf.items()})
        args = parser.parse_args(argv)
    return args


def _fail(exc, code):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(validate(err, "error")), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except InputError as exc:
        return _fail(exc, EXIT_INPUT)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PartialResults as exc:
        return _fail(exc, EXIT_PARTIAL)
    except (InputError, FileNotFoundError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        if isinstance(exc, jsonschema.ValidationError):
            exc = InputError(f"configuration does not match its schema: {exc.message}")
        return _fail(exc, EXIT_INPUT)
    except (BootstrapError, GelbootError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERIC)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
