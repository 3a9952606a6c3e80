"""Command-line interface: ``rmst-nma {ingest,analyze,simulate}``.

Every subcommand also reads a JSON config (``--config``) whose keys are the
long flag names with dashes replaced by underscores; explicit flags win.
Errors are reported on stderr as one JSON object and exit with status 2
(invalid input or request) or 1 (unexpected failure).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import read_csv, summarize
from .errors import RmstNmaError
from .pipeline import Method, NmaFit, Z95, all_contrasts, contrast, fit
from .simulation import ScenarioConfig, run_scenario

logger = logging.getLogger("rmstnma")

METHODS = [m.value for m in Method]


class UsageError(RmstNmaError):
    pass


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmst-nma", description="RMST network meta-analysis of IPD")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="validate a dataset CSV and print a summary")
    ing.add_argument("--input", required=True)
    ing.add_argument("--t-star", type=float)
    ing.add_argument("--covariates", type=_csv_list)

    ana = sub.add_parser("analyze", help="fit NMA models to a dataset CSV")
    ana.add_argument("--config")
    ana.add_argument("--input")
    ana.add_argument("--t-star", type=float)
    ana.add_argument("--method", choices=METHODS + ["all"])
    ana.add_argument("--covariates", type=_csv_list, help="comma-separated covariate columns")
    ana.add_argument("--center", type=_csv_list, help="covariates to center at the pooled mean, or 'all'")
    ana.add_argument("--random-structure", choices=["full", "intercepts", "none"])
    ana.add_argument("--cov-structure", choices=["diagonal", "arm"])
    ana.add_argument("--phi", help="one-stage dispersion: a number or 'pearson'")
    ana.add_argument("--contrast", action="append", help="pair 'A,B'; repeatable (default: all pairs)")
    ana.add_argument("--at", action="append", help="covariate value 'name=value' for contrasts; repeatable")
    ana.add_argument("--out")
    ana.add_argument("--format", type=_csv_list, help="csv, json or both (comma-separated)")

    sim = sub.add_parser("simulate", help="run one simulation cell")
    sim.add_argument("--config")
    sim.add_argument("--scenario", choices=["S1", "S2", "S3"])
    sim.add_argument("--n", type=int)
    sim.add_argument("--nt", type=int)
    sim.add_argument("--tau", type=float)
    sim.add_argument("--network", choices=["N1", "N2", "N3"])
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--methods", type=_csv_list)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out")
    sim.add_argument("--format", type=_csv_list)
    return parser


ANALYZE_DEFAULTS = {
    "method": "two-stage",
    "random_structure": "full",
    "cov_structure": "diagonal",
    "phi": "1",
    "out": "results",
    "format": ["csv", "json"],
    "center": [],
    "contrast": None,
    "at": None,
    "covariates": None,
}

SIMULATE_DEFAULTS = {
    "scenario": "S1",
    "tau": 0.1,
    "reps": 200,
    "seed": 2024,
    "methods": ["two-stage", "one-stage", "npf"],
    "out": "simulation",
    "format": ["csv", "json"],
    "workers": None,
}


def _merge(args, defaults: dict) -> dict:
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        known = set(vars(args)) - {"config", "command", "verbose"}
        bad = sorted(set(cfg) - known)
        if bad:
            raise UsageError(f"unknown config keys: {bad}")
        for key, value in cfg.items():
            if key in ("covariates", "center", "format", "methods") and isinstance(value, str):
                value = _csv_list(value)
            merged[key] = value
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose"):
            continue
        if value is not None:
            merged[key] = value
        else:
            merged.setdefault(key, None)
    return merged


def _formats(opts) -> list[str]:
    fmts = opts["format"] or ["csv", "json"]
    bad = [f for f in fmts if f not in ("csv", "json")]
    if bad:
        raise UsageError(f"unknown output formats: {bad}")
    return fmts


# ---------------------------------------------------------------- tables

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_table(path, rows: list[dict], columns: list[str]) -> None:
    """CSV with LF line endings and round-trippable float formatting."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: format_value(r.get(c)) for c in columns})
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_table(path) -> list[dict]:
    """Inverse of :func:`write_table`: numeric-looking cells become floats."""

    def parse(v):
        if v == "":
            return None
        if v in ("true", "false"):
            return v == "true"
        try:
            return float(v)
        except ValueError:
            return v

    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def contrast_rows(fit_: NmaFit, pairs, at) -> list[dict]:
    x = None if at is None else at
    if pairs:
        results = [contrast(fit_, a, b, x) for a, b in pairs]
    else:
        results = all_contrasts(fit_, x)
    cov_values = fit_.covariate_centers if at is None else np.asarray(at, dtype=float)
    rows = []
    for c in results:
        row = {
            "treatment_a": c.treatment_a,
            "treatment_b": c.treatment_b,
            "log_rmst_diff": c.log_rmst_diff,
            "se": c.se,
            "ci_low": c.ci_low,
            "ci_high": c.ci_high,
            "p_value": c.p_value,
            "rmst_ratio": c.rmst_ratio,
            "rmst_ratio_ci_low": float(np.exp(c.ci_low)),
            "rmst_ratio_ci_high": float(np.exp(c.ci_high)),
        }
        row.update({name: float(v) for name, v in zip(fit_.covariate_names, cov_values)})
        rows.append(row)
    return rows


def rmst_grid(fit_: NmaFit, covariates: np.ndarray, n_points: int = 41) -> list[dict]:
    """Predicted RMST by treatment over a covariate grid (plot-ready).

    Binary covariates take both values; the first continuous covariate spans
    its observed range; remaining continuous covariates sit at their mean.
    """
    names = fit_.covariate_names
    axes = []
    swept = False
    for j, name in enumerate(names):
        col = covariates[:, j]
        if np.all(np.isin(col, (0.0, 1.0))):
            axes.append([0.0, 1.0])
        elif not swept:
            axes.append(np.linspace(col.min(), col.max(), n_points).tolist())
            swept = True
        else:
            axes.append([float(col.mean())])
    arms = [lab.arm for lab in fit_.labels if lab.is_intercept]
    rows = []
    for k in arms:
        for combo in itertools.product(*axes) if names else [()]:
            point, se = fit_.predict(k, list(combo) if names else None)
            row = {"treatment": fit_.treatment_labels[k]}
            row.update({n: float(v) for n, v in zip(names, combo)})
            row.update({
                "log_rmst": point,
                "se": se,
                "rmst": float(np.exp(point)),
                "rmst_ci_low": float(np.exp(point - Z95 * se)),
                "rmst_ci_high": float(np.exp(point + Z95 * se)),
            })
            rows.append(row)
    return rows


COEF_COLUMNS = ["parameter", "estimate", "se", "ci_low", "ci_high", "p_value", "between_sd"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_fit(fit_: NmaFit, data, out: Path, fmts, pairs, at, t_star) -> list[Path]:
    stem = fit_.method.value
    coef = fit_.coefficient_table()
    contrasts = contrast_rows(fit_, pairs, at)
    grid = rmst_grid(fit_, data.covariates)
    written = []
    if "csv" in fmts:
        cov_cols = list(fit_.covariate_names)
        for name, rows, cols in (
            ("coefficients", coef, COEF_COLUMNS),
            ("contrasts", contrasts, list(contrasts[0]) if contrasts else ["treatment_a", "treatment_b"]),
            ("rmst_grid", grid, ["treatment"] + cov_cols + ["log_rmst", "se", "rmst", "rmst_ci_low", "rmst_ci_high"]),
        ):
            path = out / f"{stem}_{name}.csv"
            write_table(path, rows, cols)
            written.append(path)
    if "json" in fmts:
        diag = {k: v for k, v in fit_.diagnostics.items()}
        payload = {
            "method": stem,
            "t_star": t_star,
            "converged": fit_.converged,
            "treatments": fit_.treatment_labels,
            "covariates": fit_.covariate_names,
            "covariate_centers": fit_.covariate_centers,
            "coefficients": coef,
            "contrasts": contrasts,
            "rmst_grid": grid,
            "diagnostics": diag,
        }
        path = out / f"{stem}.json"
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    return written


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    data = read_csv(args.input, covariates=args.covariates)
    report = summarize(data, args.t_star)
    for w in report["warnings"]:
        logger.warning(w)
    json.dump(_jsonable(report), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _parse_at(items, names):
    if not items:
        return None
    values = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--at expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in names:
            raise UsageError(f"--at names unknown covariate {k!r}")
        try:
            values[k] = float(v)
        except ValueError:
            raise UsageError(f"--at value for {k!r} is not a number") from None
    missing = [n for n in names if n not in values]
    if missing:
        raise UsageError(f"--at must give every covariate; missing {missing}")
    return [values[n] for n in names]


def cmd_analyze(args) -> int:
    opts = _merge(args, ANALYZE_DEFAULTS)
    if not opts.get("input"):
        raise UsageError("--input is required")
    t_star = opts.get("t_star")
    if t_star is None or not t_star > 0:
        raise UsageError("--t-star must be a positive number")
    fmts = _formats(opts)
    data = read_csv(opts["input"], covariates=opts["covariates"])
    report = summarize(data, t_star)
    for w in report["warnings"]:
        logger.warning(w)
    center = opts["center"] or False
    if center == ["all"]:
        center = True
    elif center:
        unknown = [c for c in center if c not in data.covariate_names]
        if unknown:
            raise UsageError(f"--center names unknown covariates: {unknown}")
    pairs = []
    for item in opts["contrast"] or []:
        parts = _csv_list(item)
        if len(parts) != 2:
            raise UsageError(f"--contrast expects 'A,B', got {item!r}")
        for p in parts:
            if p not in data.treatment_labels:
                raise UsageError(f"--contrast names treatment {p!r} not present in the data")
        pairs.append(tuple(parts))
    at = _parse_at(opts["at"], data.covariate_names)
    phi = opts["phi"]
    phi = None if str(phi).lower() == "pearson" else float(phi)

    methods = METHODS if opts["method"] == "all" else [opts["method"]]
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    for method in methods:
        kwargs = {}
        if method != Method.NPF.value:
            kwargs = {"covariates": data.covariate_names, "center": center}
        if method == Method.ONE_STAGE.value:
            kwargs.update(random_structure=opts["random_structure"], cov_structure=opts["cov_structure"], phi=phi)
        logger.info("fitting %s", method)
        result = fit(data, method, t_star, **kwargs)
        if not result.converged:
            logger.warning("%s: optimizer did not report convergence", method)
        for path in write_fit(result, data, out, fmts, pairs, at, t_star):
            logger.info("wrote %s", path)
    return 0


def cmd_simulate(args) -> int:
    opts = _merge(args, SIMULATE_DEFAULTS)
    fmts = _formats(opts)
    try:
        config = ScenarioConfig.for_scenario(
            opts["scenario"], n=opts.get("n"), nt=opts.get("nt"), tau=opts["tau"],
            network=opts.get("network"), replications=opts["reps"], base_seed=opts["seed"],
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None

    def progress(done, total):
        if done == total or done % max(1, total // 10) == 0:
            logger.info("replication %d/%d", done, total)

    table = run_scenario(config, opts["methods"], workers=opts["workers"], progress=progress)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    if "csv" in fmts:
        table.to_csv(out / "metrics.csv")
    if "json" in fmts:
        table.to_json(out / "metrics.json")
    for r in table.rows:
        if not r["valid"]:
            logger.warning("cell invalid for %s (%d failures)", r["method"], r["failures"])
    return 0


COMMANDS = {"ingest": cmd_ingest, "analyze": cmd_analyze, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except RmstNmaError as exc:
        json.dump({"error": str(exc), "type": type(exc).__name__}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        json.dump({"error": str(exc), "type": type(exc).__name__}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
