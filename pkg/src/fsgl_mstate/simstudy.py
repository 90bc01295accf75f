"""Simulation study: competing-risks data generation and performance measures.

Paths are generated as a nested series of competing-risks experiments under
constant transition hazards ``h_q(x) = h0_q * exp(beta_q'x)`` in clock-forward
(Markov) time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .admm import SolverConfig, unpenalized_fit
from .msm_core import (LongFormatDataset, TransitionStructure, aml_structure, load_structure,
                       stack_design, standardize)
from .penalty import build_structure
from .tuning import TuningGrid, tune

log = logging.getLogger(__name__)

METHODS = ("unpenalized", "lasso_mstate", "fsgl_mstate")


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    dist: str = "bernoulli"
    p: float = 0.5
    mean: float = 0.0
    sd: float = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.dist == "bernoulli":
            return rng.binomial(1, self.p, size=n).astype(float)
        if self.dist == "normal":
            return rng.normal(self.mean, self.sd, size=n)
        raise ValueError(f"unknown covariate distribution '{self.dist}'")


@dataclass(frozen=True)
class DgmSpec:
    """Data-generating mechanism.

    ``true_beta`` is ``P x Q`` (row ``p`` = covariate, column ``q`` = transition).
    """

    structure: TransitionStructure
    baseline_hazards: tuple[float, ...]
    covariates: tuple[CovariateSpec, ...]
    true_beta: np.ndarray
    n_individuals: int = 1000
    censoring_time: float | None = None
    seed: int | None = None

    def __post_init__(self):
        Q = self.structure.n_transitions
        B = np.asarray(self.true_beta, dtype=float)
        object.__setattr__(self, "true_beta", B)
        object.__setattr__(self, "baseline_hazards", tuple(float(h) for h in self.baseline_hazards))
        if len(self.baseline_hazards) != Q:
            raise ValueError(f"need {Q} baseline hazards, got {len(self.baseline_hazards)}")
        if any(not h > 0 for h in self.baseline_hazards):
            raise ValueError("baseline hazards must be positive")
        if B.shape != (len(self.covariates), Q):
            raise ValueError(f"true_beta must be {len(self.covariates)} x {Q}, got {B.shape}")
        if not np.all(np.isfinite(B)):
            raise ValueError("true_beta must be finite")
        if self.censoring_time is not None and self.censoring_time < 0:
            raise ValueError("censoring_time must be non-negative")

    @property
    def P(self) -> int:
        return len(self.covariates)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def true_stacked(self) -> np.ndarray:
        """True coefficients in stacked covariate-major order."""
        return self.true_beta.ravel()


def aml_dgm(n_individuals: int = 1000, seed: int | None = None) -> DgmSpec:
    """The 9-state leukemia design: h0 = 0.05, two Bernoulli(0.5) markers."""
    B = np.zeros((2, 8))
    B[0, 0] = 1.5
    B[0, 2] = B[0, 6] = 1.2
    B[0, 3] = B[0, 7] = -0.8
    return DgmSpec(
        structure=aml_structure(),
        baseline_hazards=(0.05,) * 8,
        covariates=(CovariateSpec("X1"), CovariateSpec("X2")),
        true_beta=B,
        n_individuals=n_individuals,
        seed=seed,
    )


def generate_path(spec: DgmSpec, x, rng: np.random.Generator, start_state: int = 1):
    """Simulate one event history.

    Returns a list of sojourns ``(state, entry, exit, next_state)``; the last
    sojourn has ``next_state=None`` when it ends in censoring, and absorbing
    states contribute no sojourn.
    """
    st = spec.structure
    x = np.asarray(x, dtype=float)
    h0 = np.asarray(spec.baseline_hazards)
    rel = np.exp(x @ spec.true_beta)
    C = spec.censoring_time
    path = []
    state, t = start_state, 0.0
    while True:
        exits = st.exits(state)
        if not exits:
            if not st.is_absorbing(state):
                raise ValueError(f"state {state} has no exits and is not marked absorbing")
            return path
        if C is not None and t >= C:
            return path
        q_ids = np.array([e.id for e in exits])
        h = h0[q_ids - 1] * rel[q_ids - 1]
        total = h.sum()
        wait = rng.exponential(1.0 / total)
        k = rng.choice(len(exits), p=h / total) if len(exits) > 1 else 0
        if C is not None and t + wait > C:
            path.append((state, t, C, None))
            return path
        nxt = exits[k].to_state
        path.append((state, t, t + wait, nxt))
        state, t = nxt, t + wait


def generate_dataset(spec: DgmSpec, rng: np.random.Generator | None = None) -> LongFormatDataset:
    """Simulate ``spec.n_individuals`` histories and return them in long format."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    N, P = spec.n_individuals, spec.P
    X = np.column_stack([c.draw(rng, N) for c in spec.covariates]) if P else np.zeros((N, 0))
    st = spec.structure
    exits_of = {s: st.exits(s) for s in range(1, st.n_states + 1)}
    ids, trans, t0, t1, status, rows_x = [], [], [], [], [], []
    for i in range(N):
        for state, entry, exit_, nxt in generate_path(spec, X[i], rng):
            for e in exits_of[state]:
                ids.append(i + 1)
                trans.append(e.id)
                t0.append(entry)
                t1.append(exit_)
                status.append(int(nxt == e.to_state))
                rows_x.append(i)
    return LongFormatDataset(
        ids=np.array(ids, dtype=int),
        trans=np.array(trans, dtype=int),
        t_start=np.array(t0, dtype=float),
        t_stop=np.array(t1, dtype=float),
        status=np.array(status, dtype=int),
        covariates=X[np.array(rows_x, dtype=int)] if rows_x else np.zeros((0, P)),
        covariate_names=spec.covariate_names,
    )


@dataclass(frozen=True)
class SelectionCounts:
    tp: int
    tn: int
    fp: int
    fn: int
    tpr: float
    fdr: float


def selection_metrics(beta_hat, true_beta, penalized=None) -> SelectionCounts:
    """Selection counts for exactly-nonzero estimates against the true support.

    FDR is 0 when nothing is selected; TPR is NaN when the truth has no
    non-zero coefficient.
    """
    b = np.asarray(beta_hat, dtype=float).ravel()
    t = np.asarray(true_beta, dtype=float).ravel()
    if b.shape != t.shape:
        raise ValueError(f"shape mismatch: {b.shape} vs {t.shape}")
    mask = np.ones_like(b, dtype=bool) if penalized is None else np.asarray(penalized, bool).ravel()
    sel, truth = (b != 0)[mask], (t != 0)[mask]
    tp = int(np.sum(sel & truth))
    fp = int(np.sum(sel & ~truth))
    fn = int(np.sum(~sel & truth))
    tn = int(np.sum(~sel & ~truth))
    tpr = tp / (tp + fn) if tp + fn else float("nan")
    fdr = fp / (tp + fp) if tp + fp else 0.0
    return SelectionCounts(tp, tn, fp, fn, tpr, fdr)


@dataclass(frozen=True)
class AccuracySummary:
    bias_mean: float
    abs_bias_mean: float
    mse_nz_mean: float
    mcse_bias: float
    mcse_abs_bias: float
    mcse_mse: float
    per_replicate: pd.DataFrame = field(repr=False, default=None)


def _mcse(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


def accuracy_metrics(estimates, true_beta) -> AccuracySummary:
    """Bias and MSE over the true non-zero coefficients, averaged over replicates.

    Parameters
    ----------
    estimates : array_like
        ``n_sim x PQ`` (or a single length-``PQ`` vector).
    true_beta : array_like
        True coefficients in the same layout.
    """
    E = np.atleast_2d(np.asarray(estimates, dtype=float))
    t = np.asarray(true_beta, dtype=float).ravel()
    E = E.reshape(E.shape[0], -1)
    nz = t != 0
    if not nz.any():
        raise ValueError("no true non-zero coefficients (d = 0)")
    err = E[:, nz] - t[nz]
    bias = err.mean(axis=1)
    abs_bias = np.abs(err).mean(axis=1)
    mse = (err ** 2).mean(axis=1)
    per = pd.DataFrame({"bias": bias, "abs_bias": abs_bias, "mse_nz": mse})
    return AccuracySummary(
        bias_mean=float(bias.mean()),
        abs_bias_mean=float(abs_bias.mean()),
        mse_nz_mean=float(mse.mean()),
        mcse_bias=_mcse(bias),
        mcse_abs_bias=_mcse(abs_bias),
        mcse_mse=_mcse(mse),
        per_replicate=per,
    )


def required_nsim(target_rate: float | None = None, mcse_cap: float = 0.02,
                  sd: float | None = None) -> int:
    """Replicates needed so that the Monte Carlo SE stays below ``mcse_cap``.

    Uses ``p(1-p)/cap^2`` for a rate ``p``, or ``sd^2/cap^2`` when ``sd`` is given.
    """
    if not mcse_cap > 0:
        raise ValueError("mcse_cap must be positive")
    if sd is not None:
        var = sd ** 2
    else:
        if target_rate is None or not 0 < target_rate < 1:
            raise ValueError("target_rate must lie in (0, 1)")
        var = target_rate * (1 - target_rate)
    # guard against 0.9*0.1/0.02**2 = 225.00000000000003
    return int(math.ceil(round(var / mcse_cap ** 2, 9)))


# --------------------------------------------------------------------------
# study harness


@dataclass(frozen=True)
class StudyConfig:
    """Everything needed to reproduce a simulation study."""

    dgm: DgmSpec
    methods: tuple[str, ...] = METHODS
    grid: TuningGrid = field(default_factory=TuningGrid)
    n_sim: int = 25
    seed: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)
    refine: bool = True
    fused_atoms: str = "constraint"
    gcv_n: str = "individuals"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not self.methods:
            raise ValueError("no methods requested")
        if self.n_sim < 1:
            raise ValueError("n_sim must be at least 1")


_TOP_KEYS = {"dgm", "methods", "grid", "n_sim", "seed", "solver", "refine", "fused_atoms", "gcv_n"}
_DGM_KEYS = {"structure", "baseline_hazards", "covariates", "true_beta", "n_individuals",
             "censoring_time"}
_GRID_KEYS = {"alphas", "gammas", "lambda_min", "lambda_max", "n_lambda", "lambdas"}
_COV_KEYS = {"name", "dist", "p", "mean", "sd"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    for k in d:
        if k not in allowed:
            raise KeyError(f"invalid config key '{where}{k}'")


def study_config_from_dict(cfg: dict, base_dir=None) -> StudyConfig:
    """Build a ``StudyConfig`` from a parsed JSON document.

    Missing sections fall back to the leukemia design and the default grid.
    ``dgm.structure`` may be an inline structure or a path to a structure file.
    """
    from pathlib import Path

    _reject_unknown(cfg, _TOP_KEYS, "")
    d = dict(cfg.get("dgm", {}))
    _reject_unknown(d, _DGM_KEYS, "dgm.")
    base = aml_dgm()
    structure = base.structure
    if "structure" in d:
        s = d["structure"]
        if isinstance(s, str):
            p = Path(s)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            structure = load_structure(p)[0]
        else:
            structure = TransitionStructure.from_dict(s)
    Q = structure.n_transitions
    if "covariates" in d:
        covs = []
        for c in d["covariates"]:
            _reject_unknown(c, _COV_KEYS, "dgm.covariates.")
            covs.append(CovariateSpec(**c))
        covs = tuple(covs)
    else:
        covs = base.covariates
    if "true_beta" in d:
        tb = np.asarray(d["true_beta"], dtype=float)
    elif structure == base.structure and len(covs) == base.P:
        tb = base.true_beta
    else:
        raise KeyError("config key 'dgm.true_beta' is required for a custom structure")
    spec = DgmSpec(
        structure=structure,
        baseline_hazards=tuple(d.get("baseline_hazards", (0.05,) * Q)),
        covariates=covs,
        true_beta=tb,
        n_individuals=int(d.get("n_individuals", 1000)),
        censoring_time=d.get("censoring_time"),
    )
    g = dict(cfg.get("grid", {}))
    _reject_unknown(g, _GRID_KEYS, "grid.")
    grid = TuningGrid(**{k: tuple(v) if isinstance(v, list) else v for k, v in g.items()})
    solver_keys = set(SolverConfig.__dataclass_fields__)
    sv = dict(cfg.get("solver", {}))
    _reject_unknown(sv, solver_keys, "solver.")
    return StudyConfig(
        dgm=spec,
        methods=tuple(cfg.get("methods", METHODS)),
        grid=grid,
        n_sim=int(cfg.get("n_sim", 25)),
        seed=int(cfg.get("seed", 1)),
        solver=SolverConfig(**sv),
        refine=bool(cfg.get("refine", True)),
        fused_atoms=cfg.get("fused_atoms", "constraint"),
        gcv_n=cfg.get("gcv_n", "individuals"),
    )


def load_study_config(path) -> StudyConfig:
    import json
    from pathlib import Path

    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    return study_config_from_dict(cfg, base_dir=path.parent)


def _beta_columns(spec: DgmSpec) -> list[str]:
    Q = spec.structure.n_transitions
    return [f"b_{name}.{q}" for name in spec.covariate_names for q in range(1, Q + 1)]


def run_replicate(cfg: StudyConfig, rep: int, seed_seq: np.random.SeedSequence) -> dict:
    """One replicate: simulate, fit every requested method, score the estimates."""
    spec = cfg.dgm
    rng = np.random.default_rng(seed_seq)
    truth = spec.true_stacked
    rows, curves, pair_rows = [], [], []
    ds = generate_dataset(spec, rng)
    design = standardize(stack_design(ds, spec.structure))
    ps = build_structure(spec.structure, spec.P, covariate_names=spec.covariate_names)

    def score(method, beta, extra):
        acc = accuracy_metrics(beta, truth)
        row = {"rep": rep, "method": method, "status": "ok", **extra,
               "bias": acc.bias_mean, "abs_bias": acc.abs_bias_mean, "mse_nz": acc.mse_nz_mean}
        if method == "unpenalized":
            row.update(tp=np.nan, tn=np.nan, fp=np.nan, fn=np.nan, tpr=np.nan, fdr=np.nan)
        else:
            sc = selection_metrics(beta, truth)
            row.update(tp=sc.tp, tn=sc.tn, fp=sc.fp, fn=sc.fn, tpr=sc.tpr, fdr=sc.fdr)
        row.update(zip(_beta_columns(spec), beta))
        rows.append(row)

    def failed(method, exc):
        log.warning("replicate %d, %s failed: %s", rep, method, exc)
        rows.append({"rep": rep, "method": method, "status": f"failed: {exc}"})

    if "unpenalized" in cfg.methods:
        try:
            f = unpenalized_fit(design, cfg.solver)
            score("unpenalized", f.beta_hat, {"alpha": np.nan, "gamma": np.nan, "lambda": 0.0,
                                              "gcv": np.nan, "edf": float(spec.true_stacked.size),
                                              "converged": f.converged})
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            failed("unpenalized", exc)

    penalized = [m for m in cfg.methods if m != "unpenalized"]
    if penalized:
        grid = cfg.grid
        if "fsgl_mstate" not in penalized:
            grid = replace(grid, alphas=(1.0,), gammas=(1.0,))
        elif "lasso_mstate" in penalized and (1.0, 1.0) not in grid.pairs:
            raise ValueError("the FSGL grid must contain (alpha, gamma) = (1, 1) to report the lasso")
        try:
            res = tune(design, ps, grid, cfg.solver, refine=cfg.refine, fused=cfg.fused_atoms,
                       gcv_n=cfg.gcv_n)
        except RuntimeError as exc:
            for m in penalized:
                failed(m, exc)
        else:
            tab = res.to_frame()
            tab.insert(0, "rep", rep)
            curves.append(tab)
            for a, g in grid.pairs:
                try:
                    r = res.best_for(a, g)
                except KeyError:
                    continue
                if r.fit is None:
                    continue
                pr = {"rep": rep, "alpha": a, "gamma": g, "lambda": r.lam, "gcv": r.gcv,
                      "edf": r.edf, "converged": r.converged}
                pr.update(zip(_beta_columns(spec), r.fit.beta_hat))
                pair_rows.append(pr)
            picks = {"fsgl_mstate": res.best}
            if "lasso_mstate" in penalized:
                picks["lasso_mstate"] = res.best_for(1.0, 1.0)
            for m in penalized:
                r = picks[m]
                if r.fit is None or not np.isfinite(r.gcv):
                    failed(m, RuntimeError("no converged fit"))
                    continue
                score(m, r.fit.beta_hat, {"alpha": r.alpha, "gamma": r.gamma, "lambda": r.lam,
                                          "gcv": r.gcv, "edf": r.edf, "converged": r.converged})
    return {"rows": rows, "curves": curves, "pairs": pair_rows}


@dataclass
class StudyResult:
    config: StudyConfig
    replicates: pd.DataFrame
    summary: pd.DataFrame
    gcv_curves: pd.DataFrame
    pair_best: pd.DataFrame
    n_failed: int = 0

    def estimates(self, method: str) -> np.ndarray:
        df = self.replicates[(self.replicates.method == method) & (self.replicates.status == "ok")]
        return df[_beta_columns(self.config.dgm)].to_numpy(float)

    def modal_pair(self) -> tuple[float, float]:
        """Most frequent GCV-winning ``(alpha, gamma)`` over replicates (ties: first in grid order)."""
        df = self.replicates[(self.replicates.method == "fsgl_mstate") & (self.replicates.status == "ok")]
        if df.empty:
            raise ValueError("no successful FSGL replicates")
        counts = df.groupby(["alpha", "gamma"], sort=False).size()
        order = {p: i for i, p in enumerate(self.config.grid.pairs)}
        best = max(counts.index, key=lambda p: (counts[p], -order.get(p, 0)))
        return float(best[0]), float(best[1])

    def write(self, out_dir) -> list:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, df in (("replicates.csv", self.replicates), ("summary.csv", self.summary),
                         ("gcv_curves.csv", self.gcv_curves), ("pair_best.csv", self.pair_best)):
            p = out / name
            df.to_csv(p, index=False, float_format="%.17g")
            paths.append(p)
        return paths


def summarize(replicates: pd.DataFrame, methods) -> pd.DataFrame:
    """Per-method medians of TPR/FDR and means of bias/MSE with Monte Carlo SEs."""
    out = []
    for m in methods:
        df = replicates[(replicates.method == m) & (replicates.status == "ok")]
        row = {"method": m, "n_ok": len(df)}
        sel = m != "unpenalized"
        row["tpr_median"] = float(df.tpr.median()) if sel and len(df) else np.nan
        row["fdr_median"] = float(df.fdr.median()) if sel and len(df) else np.nan
        row["bias_mean"] = float(df.bias.mean()) if len(df) else np.nan
        row["mse_mean"] = float(df.mse_nz.mean()) if len(df) else np.nan
        row["mcse_bias"] = _mcse(df.bias.to_numpy(float)) if len(df) else np.nan
        row["mcse_mse"] = _mcse(df.mse_nz.to_numpy(float)) if len(df) else np.nan
        row["abs_bias_mean"] = float(df.abs_bias.mean()) if len(df) else np.nan
        row["mcse_abs_bias"] = _mcse(df.abs_bias.to_numpy(float)) if len(df) else np.nan
        row["tpr_mean"] = float(df.tpr.mean()) if sel and len(df) else np.nan
        row["fdr_mean"] = float(df.fdr.mean()) if sel and len(df) else np.nan
        row["mcse_tpr"] = _mcse(df.tpr.to_numpy(float)) if sel and len(df) else np.nan
        row["mcse_fdr"] = _mcse(df.fdr.to_numpy(float)) if sel and len(df) else np.nan
        out.append(row)
    summary = pd.DataFrame(out)
    if all(m == "unpenalized" for m in methods):
        summary = summary.drop(columns=[c for c in summary.columns if c.startswith(("tpr", "fdr", "mcse_tpr", "mcse_fdr"))])
    return summary


def run_study(cfg: StudyConfig, jobs: int = 1) -> StudyResult:
    """Run ``cfg.n_sim`` independent replicates.

    Replicate ``r`` draws from child ``r`` of ``SeedSequence(cfg.seed)``, so
    results do not depend on execution order or ``jobs``.

    Raises
    ------
    RuntimeError
        When more than half of the replicates have a failed method.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_sim)
    if jobs != 1 and cfg.n_sim > 1:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=jobs)(delayed(run_replicate)(cfg, r + 1, s) for r, s in enumerate(children))
    else:
        parts = [run_replicate(cfg, r + 1, s) for r, s in enumerate(children)]
    rows = [row for p in parts for row in p["rows"]]
    reps = pd.DataFrame(rows)
    failed_reps = set(reps.loc[reps.status != "ok", "rep"]) if "status" in reps else set()
    if len(failed_reps) > cfg.n_sim / 2:
        raise RuntimeError(f"{len(failed_reps)} of {cfg.n_sim} replicates failed")
    curves = [c for p in parts for c in p["curves"]]
    gcv_curves = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame(
        columns=["rep", "alpha", "gamma", "lambda", "gcv", "edf", "converged", "source"])
    pairs = pd.DataFrame([r for p in parts for r in p["pairs"]])
    return StudyResult(cfg, reps, summarize(reps, cfg.methods), gcv_curves, pairs, len(failed_reps))
