"""Command-line front end: ``fit``, ``tune``, ``simulate``, ``evaluate`` and ``expand``.

Exit codes: 0 success, 1 input error, 2 the solver ran but did not converge.
Every command writes a ``manifest.json`` next to its outputs. Configuration
files are JSON objects; see the README for the accepted keys.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, admm, simstudy, tuning
from .msm_core import (aml_structure, expand_wide, load_structure, read_long_csv, stack_design,
                       standardize, validate, write_long_csv)
from .penalty import build_structure

log = logging.getLogger("fsgl_mstate")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
FLOAT_FMT = "%.17g"

_FIT_CONFIG_KEYS = {"solver", "standardize", "unpenalized", "grid"}


class InputError(Exception):
    """Raised for user-facing input problems (exit code 1)."""


def _csv_list(text: str | None, cast=str) -> list:
    if text is None:
        return []
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        return [cast(s) for s in items]
    except ValueError as exc:
        raise InputError(f"cannot parse list '{text}': {exc}") from exc


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc)
    return t.replace(microsecond=0).isoformat()


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: dict,
                   outputs: list, params: dict) -> Path:
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(Path(p).name for p in outputs),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "timestamp": _timestamp(),
        "parameters": params,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: expected a JSON object")
    return cfg


def _fit_config(args) -> dict:
    cfg = _read_json(args.config) if args.config else {}
    for k in cfg:
        if k not in _FIT_CONFIG_KEYS:
            raise InputError(f"invalid config key '{k}'")
    sv = cfg.get("solver", {})
    for k in sv:
        if k not in admm.SolverConfig.__dataclass_fields__:
            raise InputError(f"invalid config key 'solver.{k}'")
    cfg["solver_config"] = admm.SolverConfig(**sv)
    return cfg


def _load_inputs(args, cfg):
    if args.structure:
        structure, unpen_cfg = load_structure(args.structure)
    else:
        structure, unpen_cfg = aml_structure(), []
    unpen = _csv_list(args.unpenalized) or list(cfg.get("unpenalized", [])) or unpen_cfg
    ds = read_long_csv(args.data, unpenalized=unpen)
    report = validate(ds, structure)
    if not report.ok:
        raise InputError("invalid long-format data:\n  " + "\n  ".join(report.violations))
    design = stack_design(ds, structure)
    if cfg.get("standardize", True):
        design = standardize(design)
    ps = build_structure(structure, ds.n_covariates, ds.penalized, ds.covariate_names)
    return structure, ds, design, ps


def coef_frame(design, beta_hat) -> pd.DataFrame:
    P, Q = design.n_covariates, design.n_transitions
    return pd.DataFrame({
        "covariate": np.repeat(design.covariate_names, Q),
        "transition": np.tile(np.arange(1, Q + 1), P),
        "beta_hat": beta_hat,
        "selected": beta_hat != 0,
    })


def _write_fit(out: Path, design, res: admm.FitResult, prefix: str = "") -> list:
    paths = [out / f"{prefix}coefficients.csv", out / f"{prefix}baseline.csv", out / f"{prefix}trace.csv"]
    coef_frame(design, res.beta_hat).to_csv(paths[0], index=False, float_format=FLOAT_FMT)
    res.baseline.to_csv(paths[1])
    res.trace_to_csv(paths[2])
    return paths


def cmd_fit(args) -> int:
    cfg = _fit_config(args)
    structure, ds, design, ps = _load_inputs(args, cfg)
    lam = args.lam
    if lam < 0:
        raise InputError("--lambda must be non-negative")
    for name in ("alpha", "gamma"):
        if not 0 <= getattr(args, name) <= 1:
            raise InputError(f"--{name} must lie in [0, 1]")
    res = admm.fit(design, ps, lam, args.alpha, args.gamma, config=cfg["solver_config"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = _write_fit(out, design, res)
    params = {"lambda": lam, "alpha": args.alpha, "gamma": args.gamma,
              "unpenalized": [c for c, p in zip(ds.covariate_names, ds.penalized) if not p],
              "solver": cfg["solver_config"].__dict__, "converged": res.converged,
              "iterations": res.iterations}
    write_manifest(out, "fit", args, {"data": args.data, "structure": args.structure}, paths, params)
    if not res.converged:
        log.error("ADMM did not converge in %d iterations", res.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _parse_grid(args, cfg) -> tuning.TuningGrid:
    g = dict(cfg.get("grid", {}))
    for k in g:
        if k not in tuning.TuningGrid.__dataclass_fields__:
            raise InputError(f"invalid config key 'grid.{k}'")
    if args.alphas:
        g["alphas"] = _csv_list(args.alphas, float)
    if args.gammas:
        g["gammas"] = _csv_list(args.gammas, float)
    if args.grid is not None:
        spec = args.grid.strip()
        if not spec:
            raise InputError("empty lambda grid")
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) != 3:
                raise InputError("--grid must be 'min:max:n' or a comma list of lambda values")
            try:
                g.update(lambda_min=float(parts[0]), lambda_max=float(parts[1]), n_lambda=int(parts[2]))
            except ValueError as exc:
                raise InputError(f"cannot parse --grid '{spec}'") from exc
            g.pop("lambdas", None)
        else:
            lams = _csv_list(spec, float)
            if not lams:
                raise InputError("empty lambda grid")
            g["lambdas"] = lams
    if "lambdas" in g and not g["lambdas"]:
        raise InputError("empty lambda grid")
    for k in ("alphas", "gammas", "lambdas"):
        if k in g and g[k] is not None:
            g[k] = tuple(g[k])
    try:
        return tuning.TuningGrid(**g)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_tune(args) -> int:
    cfg = _fit_config(args)
    grid = _parse_grid(args, cfg)
    structure, ds, design, ps = _load_inputs(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = tuning.tune(design, ps, grid, cfg["solver_config"], refine=not args.no_refine,
                          jobs=args.jobs)
    except RuntimeError as exc:
        log.error("%s", exc)
        write_manifest(out, "tune", args, {"data": args.data, "structure": args.structure}, [],
                       {"grid": grid.__dict__, "converged": False})
        return EXIT_NOT_CONVERGED
    paths = [out / "tuning.csv", out / "gcv_curves.csv"]
    res.to_csv(paths[0])
    res.curves().to_csv(paths[1], index=False, float_format=FLOAT_FMT)
    paths += _write_fit(out, design, res.best.fit, prefix="best_")
    b = res.best
    params = {"grid": grid.__dict__, "solver": cfg["solver_config"].__dict__,
              "best": {"lambda": b.lam, "alpha": b.alpha, "gamma": b.gamma, "gcv": b.gcv, "edf": b.edf},
              "unpenalized": [c for c, p in zip(ds.covariate_names, ds.penalized) if not p],
              "refine": not args.no_refine}
    write_manifest(out, "tune", args, {"data": args.data, "structure": args.structure}, paths, params)
    return EXIT_OK


def cmd_simulate(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    if args.n_sim is not None:
        raw["n_sim"] = args.n_sim
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.methods:
        raw["methods"] = _csv_list(args.methods)
    base = Path(args.config).parent if args.config else None
    try:
        cfg = simstudy.study_config_from_dict(raw, base_dir=base)
    except KeyError as exc:
        raise InputError(exc.args[0]) from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid study config: {exc}") from exc
    res = simstudy.run_study(cfg, jobs=args.jobs)
    out = Path(args.out_dir)
    paths = res.write(out)
    params = {"n_sim": cfg.n_sim, "seed": cfg.seed, "methods": list(cfg.methods),
              "grid": cfg.grid.__dict__, "solver": cfg.solver.__dict__,
              "n_individuals": cfg.dgm.n_individuals, "failed_replicates": res.n_failed}
    args.seed = cfg.seed
    write_manifest(out, "simulate", args, {}, paths, params)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = pd.read_csv(args.estimates, float_precision="round_trip")
    truth = pd.read_csv(args.truth, float_precision="round_trip")
    for name, df, col in (("estimates", est, "beta_hat"), ("truth", truth, "beta")):
        for c in ("covariate", "transition", col):
            if c not in df.columns:
                raise InputError(f"{name} file: missing required column '{c}'")
    key = ["covariate", "transition"]
    for name, df in (("estimates", est), ("truth", truth)):
        dup = df.duplicated(key)
        if dup.any():
            raise InputError(f"{name} file: duplicate key {tuple(df.loc[dup, key].iloc[0])}")
    m = est[key + ["beta_hat"]].merge(truth[key + ["beta"]], on=key, how="outer", indicator=True)
    unmatched = m[m["_merge"] != "both"]
    if len(unmatched):
        keys = ", ".join(f"({r.covariate}, {r.transition})" for r in unmatched.itertuples())
        raise InputError(f"unmatched keys: {keys}")
    m = m.sort_values(key, kind="stable")
    b, t = m.beta_hat.to_numpy(float), m.beta.to_numpy(float)
    sc = simstudy.selection_metrics(b, t)
    row = {"tp": sc.tp, "tn": sc.tn, "fp": sc.fp, "fn": sc.fn, "tpr": sc.tpr, "fdr": sc.fdr}
    if np.any(t != 0):
        acc = simstudy.accuracy_metrics(b, t)
        row.update(bias=acc.bias_mean, abs_bias=acc.abs_bias_mean, mse_nz=acc.mse_nz_mean)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    pd.DataFrame([row]).to_csv(path, index=False, float_format=FLOAT_FMT)
    write_manifest(out, "evaluate", args, {"estimates": args.estimates, "truth": args.truth}, [path], row)
    return EXIT_OK


def cmd_expand(args) -> int:
    structure = load_structure(args.structure)[0] if args.structure else aml_structure()
    wide = pd.read_csv(args.data, dtype={"id": str}, float_precision="round_trip")
    ds = expand_wide(wide, structure)
    report = validate(ds, structure)
    if not report.ok:
        raise InputError("expanded data failed validation:\n  " + "\n  ".join(report.violations))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "long.csv"
    write_long_csv(ds, structure, path)
    write_manifest(out, "expand", args, {"data": args.data, "structure": args.structure}, [path],
                   {"n_individuals": ds.n_individuals, "n_rows": ds.n_rows})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsgl-mstate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, lam=False):
        sp.add_argument("--data", required=True, help="long-format CSV")
        sp.add_argument("--structure", help="structure JSON (default: 9-state leukemia model)")
        sp.add_argument("--config", help="JSON config with solver/grid settings")
        sp.add_argument("--unpenalized", help="comma-separated covariates left unpenalized")
        sp.add_argument("--out-dir", required=True)

    f = sub.add_parser("fit", help="fit at fixed (lambda, alpha, gamma)")
    common(f)
    f.add_argument("--lambda", dest="lam", type=float, required=True)
    f.add_argument("--alpha", type=float, default=1.0)
    f.add_argument("--gamma", type=float, default=1.0)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("tune", help="GCV tuning over (alpha, gamma, lambda)")
    common(t)
    t.add_argument("--alpha", dest="alphas", help="comma list of alpha values")
    t.add_argument("--gamma", dest="gammas", help="comma list of gamma values")
    t.add_argument("--grid", help="lambda grid as 'min:max:n' or a comma list")
    t.add_argument("--no-refine", action="store_true", help="skip Brent refinement")
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_tune)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--config", help="study JSON config")
    s.add_argument("--n-sim", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--methods", help="comma list of unpenalized,lasso_mstate,fsgl_mstate")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="selection and accuracy metrics for given estimates")
    e.add_argument("--estimates", required=True, help="CSV covariate,transition,beta_hat")
    e.add_argument("--truth", required=True, help="CSV covariate,transition,beta")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("expand", help="wide (one row per individual) to long format")
    x.add_argument("--data", required=True, help="wide CSV")
    x.add_argument("--structure")
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_expand)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ValueError, KeyError, FileNotFoundError, pd.errors.ParserError,
            pd.errors.EmptyDataError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
