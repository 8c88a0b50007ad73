"""Warp-speed Monte Carlo for coverage, width and J-test rejection rates.

Each repetition simulates one panel, fits every estimator, records the
studentized statistics and draws a single bootstrap sample per resampling
scheme. Bootstrap critical values pool the ``R`` single draws; bootstrap
and asymptotic coverage use the same per-repetition statistics and differ
only in the critical value.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import subprocess
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from . import rng as rngmod
from .bootstrap import RETRY_BUDGET, ResampleScheme, discrete_quantile, replicate_fit, resample_indices
from .dgp import DgpSpec, pseudo_true, simulate
from .errors import GelbootError, InputError
from .gel import SolveOptions, estimate
from .gmm import GmmOptions, gmm_estimate
from .inference import j_test
from .models import PanelMomentModel, RecenteredModel, evaluate
from .rho import Kind
from .variance import covariance

__all__ = [
    "McConfig",
    "McRow",
    "JRow",
    "McTable",
    "run_warp_speed",
    "emit_table",
    "read_table_csv",
    "version_string",
    "write_manifest",
]

log = logging.getLogger(__name__)

GEL_KINDS = ("EL", "ET", "ETEL")
FAIL_FLAG_SHARE = 0.05
_NUMERIC = (GelbootError, np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class McConfig:
    dgp: DgpSpec
    reps: int = 5000
    kinds: tuple = ("GMM", "EL", "ET", "ETEL")
    levels: tuple = (0.90, 0.95)
    schemes: tuple = ("L", "BN")
    seed: int = 0
    workers: int = 1
    multistart: int = 1
    true_values: dict | None = None
    pseudo_true_cache: str | None = None

    def __post_init__(self):
        if self.reps < 1:
            raise InputError("reps must be at least 1")
        kinds = tuple(str(k).upper() for k in self.kinds)
        for k in kinds:
            if k != "GMM":
                Kind.parse(k)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "schemes", tuple(str(s).upper() for s in self.schemes))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        for s in self.schemes:
            if s not in ("L", "BN"):
                raise InputError(f"unknown Monte Carlo scheme {s!r}; use L or BN")
        if any(not 0 < v < 1 for v in self.levels):
            raise InputError("levels must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dgp"] = asdict(self.dgp)
        d["kinds"], d["levels"], d["schemes"] = list(self.kinds), list(self.levels), list(self.schemes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "McConfig":
        d = dict(d)
        dgp = d.pop("dgp")
        for key in ("kinds", "levels", "schemes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(dgp=DgpSpec(**dgp), **d)


@dataclass
class McRow:
    source: str  # Boot | Asymp
    estimator: str
    flavor: str  # MR | C
    scheme: str  # L | BN | HH | -
    coverage: dict
    width: dict
    mc_se: dict
    n_used: int
    n_failed: int
    flagged: bool

    @property
    def key(self) -> tuple:
        return (self.source, self.estimator, self.flavor, self.scheme)

    @property
    def label(self) -> str:
        parts = [self.source, self.estimator, self.flavor] + ([self.scheme] if self.scheme != "-" else [])
        return "-".join(parts)


@dataclass
class JRow:
    test: str
    rejection: dict
    mc_se: dict
    n_used: int
    n_failed: int
    flagged: bool


@dataclass
class McTable:
    config: dict
    rows: list
    j_rows: list
    seed: int
    version: str
    failures: list = field(default_factory=list)
    elapsed: float = 0.0

    def row(self, label: str) -> McRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def j_row(self, test: str) -> JRow:
        for r in self.j_rows:
            if r.test == test:
                return r
        raise KeyError(test)


def version_string() -> str:
    """``git describe`` of the source tree, or ``v<package version>``."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True, text=True, timeout=5
        )
        desc = out.stdout.strip()
        if out.returncode == 0 and desc:
            return desc if desc.startswith("v") else f"v{__version__}-g{desc}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# ---------------------------------------------------------------------------
# one repetition


def _true_values(cfg: McConfig) -> dict:
    if cfg.true_values:
        return {str(k).upper(): float(v) for k, v in cfg.true_values.items()}
    spec = cfg.dgp
    if spec.correctly_specified:
        return {k: spec.rho0 for k in cfg.kinds}
    res = pseudo_true(spec, cfg.kinds, cache_dir=cfg.pseudo_true_cache)
    return dict(res.values)


@dataclass(frozen=True)
class _RepJob:
    cfg: McConfig
    truth: dict

    def _boot_t(self, kind, model, data, fit, scheme, stream_id, r, k_index, opts):
        n = data.n
        reasons = []
        for attempt in range(RETRY_BUDGET + 1):
            g = rngmod.stream(self.cfg.seed, r, stream_id, k_index, attempt)
            idx = resample_indices(n, scheme, g)
            try:
                bf, bc = replicate_fit(kind, model, data.take(idx), fit.theta_hat, opts, rngmod.child_seed(g))
                return float((bf.theta_hat[0] - fit.theta_hat[0]) / np.sqrt(bc.sigma_mr[0, 0] / n)), reasons
            except _NUMERIC as exc:
                reasons.append(f"{kind}/{stream_id}/{attempt}: {exc}")
        return None, reasons

    def __call__(self, r: int) -> dict:
        cfg = self.cfg
        spec = cfg.dgp
        data = simulate(spec, rngmod.stream(cfg.seed, r, rngmod.SIMULATE))
        model = PanelMomentModel(spec.T)
        n = data.n
        out: dict = {"rep": r, "errors": []}
        opts = SolveOptions(multistart=cfg.multistart, seed=cfg.seed)
        iid = ResampleScheme.iid()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for k_index, kind in enumerate(cfg.kinds):
                truth = self.truth[kind]
                if kind == "GMM":
                    try:
                        gf = gmm_estimate(model, data)
                        se = float(np.sqrt(gf.sigma_c[0, 0] / n))
                        out["GMM"] = {"t_C": (gf.theta_hat[0] - truth) / se, "se_C": se, "J": gf.j_stat}
                    except _NUMERIC as exc:
                        out["errors"].append(f"GMM fit: {exc}")
                        continue
                    # one recentered draw on the common iid sample
                    for attempt in range(RETRY_BUDGET + 1):
                        g = rngmod.stream(cfg.seed, r, rngmod.BOOT_IID, 0, attempt)
                        boot = data.take(resample_indices(n, iid, g))
                        try:
                            shift = evaluate(model, data, gf.theta_hat).g.mean(axis=0)
                            bf = gmm_estimate(RecenteredModel(model, shift), boot, GmmOptions(theta0=tuple(gf.theta_hat)))
                            out["GMM"]["t_star_HH"] = (bf.theta_hat[0] - gf.theta_hat[0]) / np.sqrt(bf.sigma_c[0, 0] / n)
                            out["GMM"]["J_star_HH"] = bf.j_stat
                            break
                        except _NUMERIC as exc:
                            out["errors"].append(f"GMM HH {attempt}: {exc}")
                    continue
                try:
                    fit = estimate(kind, model, data, opts)
                    if not fit.converged:
                        raise GelbootError(f"FOC residual {fit.foc_residual:.3g}")
                    cov = covariance(kind, model, data, fit)
                except _NUMERIC as exc:
                    out["errors"].append(f"{kind} fit: {exc}")
                    continue
                se_mr = float(np.sqrt(cov.sigma_mr[0, 0] / n))
                se_c = float(np.sqrt(cov.sigma_c[0, 0] / n))
                d = out[kind] = {
                    "t_MR": (fit.theta_hat[0] - truth) / se_mr,
                    "t_C": (fit.theta_hat[0] - truth) / se_c,
                    "se_MR": se_mr,
                    "se_C": se_c,
                }
                try:
                    d["J"] = j_test(fit, model, data, f"LR-{kind}").statistic
                except _NUMERIC:
                    pass
                if "L" in cfg.schemes:
                    # the iid draw is shared by every estimator in this repetition
                    t, why = self._boot_t(kind, model, data, fit, iid, rngmod.BOOT_IID, r, 0, opts)
                    out["errors"] += why
                    if t is not None:
                        d["t_star_L"] = t
                if "BN" in cfg.schemes:
                    t, why = self._boot_t(kind, model, data, fit, ResampleScheme.brown_newey(fit), rngmod.BOOT_WEIGHTED, r, k_index, opts)
                    out["errors"] += why
                    if t is not None:
                        d["t_star_BN"] = t
        return out


# ---------------------------------------------------------------------------
# aggregation


def _coverage_row(source, est, flavor, scheme, stats_, levels, R, boot_draws=None):
    """``stats_`` is a list of (|T_r|, se_r); ``boot_draws`` pools |T*_r|."""
    n_used = len(stats_)
    cov, wid, mcse = {}, {}, {}
    tt = np.array([s[0] for s in stats_], dtype=float)
    se = np.array([s[1] for s in stats_], dtype=float)
    for lv in levels:
        key = f"{lv:g}"
        if n_used == 0:
            cov[key] = wid[key] = mcse[key] = float("nan")
            continue
        if boot_draws is None:
            z = float(stats.norm.ppf(0.5 + lv / 2))
        else:
            z = discrete_quantile(np.abs(boot_draws), lv)
        p = float(np.mean(np.abs(tt) <= z))
        cov[key] = p
        wid[key] = float(np.mean(2.0 * z * se))
        mcse[key] = math.sqrt(p * (1 - p) / n_used)
    failed = R - n_used
    return McRow(source, est, flavor, scheme, cov, wid, mcse, n_used, failed, failed > FAIL_FLAG_SHARE * R)


def _j_row(test, stats_, levels, R, crit_fn):
    n_used = len(stats_)
    rej, mcse = {}, {}
    x = np.array(stats_, dtype=float)
    for lv in levels:
        key = f"{lv:g}"
        if n_used == 0:
            rej[key] = mcse[key] = float("nan")
            continue
        p = float(np.mean(x > crit_fn(lv)))
        rej[key] = p
        mcse[key] = math.sqrt(p * (1 - p) / n_used)
    failed = R - n_used
    return JRow(test, rej, mcse, n_used, failed, failed > FAIL_FLAG_SHARE * R)


def _aggregate(cfg: McConfig, reps: list) -> tuple[list, list]:
    R = cfg.reps
    df = PanelMomentModel.moment_count(cfg.dgp.T) - 1
    rows, jrows = [], []
    lv = cfg.levels
    chi2 = lambda level: float(stats.chi2.ppf(level, df))  # noqa: E731
    for kind in cfg.kinds:
        got = [rep[kind] for rep in reps if kind in rep]
        if kind == "GMM":
            hh = [d for d in got if "t_star_HH" in d]
            rows.append(_coverage_row("Boot", "GMM", "C", "HH", [(d["t_C"], d["se_C"]) for d in hh], lv, R, [d["t_star_HH"] for d in hh]))
            rows.append(_coverage_row("Asymp", "GMM", "C", "-", [(d["t_C"], d["se_C"]) for d in got], lv, R))
            jstar = np.array([d["J_star_HH"] for d in hh], dtype=float)
            jrows.append(_j_row("Boot-J-HH", [d["J"] for d in hh], lv, R, lambda level: discrete_quantile(jstar, level) if jstar.size else np.inf))
            jrows.append(_j_row("Asymp-J", [d["J"] for d in got], lv, R, chi2))
            continue
        for scheme in cfg.schemes:
            sub = [d for d in got if f"t_star_{scheme}" in d]
            rows.append(_coverage_row("Boot", kind, "MR", scheme, [(d["t_MR"], d["se_MR"]) for d in sub], lv, R, [d[f"t_star_{scheme}"] for d in sub]))
        rows.append(_coverage_row("Asymp", kind, "MR", "-", [(d["t_MR"], d["se_MR"]) for d in got], lv, R))
        rows.append(_coverage_row("Asymp", kind, "C", "-", [(d["t_C"], d["se_C"]) for d in got], lv, R))
        jrows.append(_j_row(f"LR-{kind}", [d["J"] for d in got if "J" in d], lv, R, chi2))
    return rows, jrows


def run_warp_speed(cfg: McConfig, progress=None) -> McTable:
    """Run the experiment; results do not depend on ``cfg.workers``."""
    t0 = time.perf_counter()
    truth = _true_values(cfg)
    job = _RepJob(cfg, truth)
    if cfg.workers > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            reps = list(ex.map(job, range(cfg.reps), chunksize=max(1, cfg.reps // (8 * cfg.workers))))
    else:
        reps = []
        for r in range(cfg.reps):
            reps.append(job(r))
            if progress is not None:
                progress(r + 1, cfg.reps)
    reps.sort(key=lambda d: d["rep"])
    rows, jrows = _aggregate(cfg, reps)
    failures = [{"rep": d["rep"], "errors": d["errors"]} for d in reps if d["errors"]]
    conf = cfg.to_dict()
    conf["true_values"] = truth
    return McTable(conf, rows, jrows, cfg.seed, version_string(), failures, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# output

_CSV_FIELDS = ["section", "source", "estimator", "flavor", "scheme", "level", "value", "width", "mc_se", "n_used", "n_failed", "flagged"]


def _header(table: McTable) -> list:
    return [
        f"# gelboot {table.version} seed={table.seed}",
        "# config " + json.dumps(table.config, sort_keys=True),
    ]


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_table(table: McTable, path, fmt: str = "csv") -> Path:
    """Write the table as CSV (lossless) or markdown."""
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        for line in _header(table):
            buf.write(line + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for row in table.rows:
            for key in row.coverage:
                w.writerow(["coverage", row.source, row.estimator, row.flavor, row.scheme, key, _fmt(row.coverage[key]), _fmt(row.width[key]), _fmt(row.mc_se[key]), row.n_used, row.n_failed, int(row.flagged)])
        for row in table.j_rows:
            for key in row.rejection:
                w.writerow(["jtest", "-", row.test, "-", "-", key, _fmt(row.rejection[key]), "", _fmt(row.mc_se[key]), row.n_used, row.n_failed, int(row.flagged)])
        path.write_text(buf.getvalue())
        return path
    if fmt == "markdown":
        levels = [f"{v:g}" for v in table.config["levels"]]
        lines = [f"<!-- gelboot {table.version} seed={table.seed} -->", ""]
        head = ["CI", "estimator", "s.e.", "bootstrap"] + [f"cov {k}" for k in levels] + [f"width {k}" for k in levels] + ["MC s.e. (max)", "reps used", "flag"]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "---|" * len(head))
        for row in table.rows:
            cells = [row.source, row.estimator, row.flavor, row.scheme]
            cells += [f"{row.coverage[k]:.3f}" for k in levels] + [f"{row.width[k]:.3f}" for k in levels]
            cells += [f"{max(row.mc_se.values()):.3f}", str(row.n_used), "!" if row.flagged else ""]
            lines.append("| " + " | ".join(cells) + " |")
        lines += ["", "| J test | " + " | ".join(f"reject at {1 - float(k):.2g}" for k in levels) + " | reps used |", "|" + "---|" * (len(levels) + 2)]
        for row in table.j_rows:
            lines.append(f"| {row.test} | " + " | ".join(f"{row.rejection[k]:.3f}" for k in levels) + f" | {row.n_used} |")
        path.write_text("\n".join(lines) + "\n")
        return path
    raise InputError(f"unknown table format {fmt!r}")


def read_table_csv(path) -> McTable:
    """Parse a CSV written by :func:`emit_table`."""
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    version = head[2]
    seed = int(head[3].split("=", 1)[1])
    config = json.loads(text[1][len("# config ") :])
    reader = csv.DictReader(text[2:])
    rows: dict = {}
    jrows: dict = {}
    for rec in reader:
        key = rec["level"]
        if rec["section"] == "coverage":
            k = (rec["source"], rec["estimator"], rec["flavor"], rec["scheme"])
            row = rows.get(k)
            if row is None:
                row = rows[k] = McRow(*k, {}, {}, {}, int(rec["n_used"]), int(rec["n_failed"]), bool(int(rec["flagged"])))
            row.coverage[key] = float(rec["value"])
            row.width[key] = float(rec["width"])
            row.mc_se[key] = float(rec["mc_se"])
        else:
            row = jrows.get(rec["estimator"])
            if row is None:
                row = jrows[rec["estimator"]] = JRow(rec["estimator"], {}, {}, int(rec["n_used"]), int(rec["n_failed"]), bool(int(rec["flagged"])))
            row.rejection[key] = float(rec["value"])
            row.mc_se[key] = float(rec["mc_se"])
    return McTable(config, list(rows.values()), list(jrows.values()), seed, version)


def write_manifest(table: McTable, path, outputs: list, started: float | None = None) -> dict:
    manifest = {
        "tool": "gelboot",
        "version": table.version,
        "seed": table.seed,
        "config": table.config,
        "elapsed_seconds": table.elapsed,
        "outputs": [str(p) for p in outputs],
        "failures": table.failures,
        "flagged_rows": [r.label for r in table.rows if r.flagged],
    }
    if started is not None:
        manifest["started_unix"] = started
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
