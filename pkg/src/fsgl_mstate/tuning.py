"""Selection of the penalty level by generalized cross-validation.

For every ``(alpha, gamma)`` pair a warm-started path is fitted from the
largest to the smallest ``lambda``; an interior grid minimum of GCV is then
refined by bounded Brent search on ``log(lambda)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from . import admm, coxlik
from .msm_core import StackedDesign
from .penalty import PenaltyStructure, row_tuning

log = logging.getLogger(__name__)

ATOM_TOL = 1e-8
DEFAULT_WEIGHTS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class TuningGrid:
    """Grid of mixing weights and log-spaced penalty levels.

    ``lambdas`` overrides the generated sequence when given (any length >= 1).
    """

    alphas: tuple[float, ...] = DEFAULT_WEIGHTS
    gammas: tuple[float, ...] = DEFAULT_WEIGHTS
    lambda_min: float = 0.01
    lambda_max: float = 500.0
    n_lambda: int = 25
    lambdas: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if not self.alphas or not self.gammas:
            raise ValueError("alphas and gammas must be non-empty")
        for v in self.alphas + self.gammas:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"mixing weights must lie in [0, 1], got {v}")
        if self.lambdas is not None:
            lam = tuple(float(x) for x in self.lambdas)
            if not lam:
                raise ValueError("lambda grid is empty")
            if any(not x > 0 for x in lam):
                raise ValueError("lambda values must be positive")
            object.__setattr__(self, "lambdas", lam)
            return
        if not 0 < self.lambda_min < self.lambda_max:
            raise ValueError("need 0 < lambda_min < lambda_max")
        if self.n_lambda < 2:
            raise ValueError("n_lambda must be at least 2")

    @property
    def lambda_values(self) -> np.ndarray:
        """Penalty levels in decreasing order (path direction)."""
        if self.lambdas is not None:
            return np.sort(np.unique(self.lambdas))[::-1]
        return np.geomspace(self.lambda_max, self.lambda_min, self.n_lambda)

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return [(a, g) for a in self.alphas for g in self.gammas]


@dataclass
class GcvRecord:
    alpha: float
    gamma: float
    lam: float
    gcv: float
    edf: float
    converged: bool
    fit: admm.FitResult | None = field(default=None, repr=False)
    source: str = "grid"


def effective_df(design: StackedDesign, ps: PenaltyStructure, beta_hat, lam: float,
                 alpha: float, gamma: float, fused: str = "constraint") -> float:
    """Effective number of parameters ``tr[(H + S)^-1 H]`` over the active coordinates.

    ``H`` is the Hessian ``X'WX`` of the negative log partial likelihood and
    ``S`` the local quadratic approximation of the penalty: every scalar atom
    contributes ``kappa_m / |K_m b| K_m'K_m`` and every group block
    ``kappa_g / ||G_g b|| G_g'G_g``. Coordinates with ``|b_j| < 1e-8`` are
    inactive and atoms with ``|K_m b| < 1e-8`` are dropped.

    Parameters
    ----------
    beta_hat : array_like
        Coefficients on the (standardized) scale of ``design``.
    fused : {"constraint", "inactive"}
        Treatment of exactly fused pairs of active coordinates: as equality
        constraints (a fused pair counts as one parameter) or by marking both
        coordinates inactive.
    """
    if fused not in ("constraint", "inactive"):
        raise ValueError("fused must be 'constraint' or 'inactive'")
    b = np.asarray(beta_hat, dtype=float)
    thr = row_tuning(ps, lam, alpha, gamma)
    if thr.all_zero:
        return float(ps.n_coef)
    active = np.abs(b) >= ATOM_TOL
    K = ps.K
    ns = ps.n_scalar
    Kb = K @ b
    constraints = []
    for m in range(ps.n_coef, ns):
        if thr.scalar[m] > 0 and abs(Kb[m]) < ATOM_TOL:
            cols = np.flatnonzero(K[m])
            if active[cols].all():
                if fused == "inactive":
                    active[cols] = False
                else:
                    constraints.append(K[m])
    A = np.flatnonzero(active)
    if A.size == 0:
        return 0.0
    H = coxlik.hessian(design, b)[np.ix_(A, A)]
    S = np.zeros((A.size, A.size))
    for m in np.flatnonzero(thr.scalar[:ns] > 0):
        if abs(Kb[m]) >= ATOM_TOL:
            k = K[m, A]
            S += thr.scalar[m] / abs(Kb[m]) * np.outer(k, k)
    for g in np.flatnonzero(thr.group > 0):
        G = K[ps.group_rows(g)][:, A]
        norm = np.linalg.norm(Kb[ps.group_rows(g)])
        if norm >= ATOM_TOL:
            S += thr.group[g] / norm * (G.T @ G)
    if constraints:
        C = np.array(constraints)[:, A]
        Z = linalg.null_space(C)
        if Z.shape[1] == 0:
            return 0.0
        H = Z.T @ H @ Z
        S = Z.T @ S @ Z
    M = H + S
    try:
        T = np.linalg.solve(M, H)
    except np.linalg.LinAlgError:
        T = np.linalg.pinv(M) @ H
    return float(np.clip(np.trace(T), 0.0, ps.n_coef))


def gcv_value(neg_log_lik: float, edf: float, n: int) -> float:
    """``L / (N (1 - e/N)^2)``, infinite when ``e >= N``."""
    N = n
    if edf >= N:
        return np.inf
    return neg_log_lik / (N * (1.0 - edf / N) ** 2)


def gcv_sample_size(design: StackedDesign, kind: str = "individuals") -> int:
    """``N`` of the GCV denominator: individuals (default), long-format rows or events."""
    if kind == "individuals":
        return design.n_individuals
    if kind == "rows":
        return design.n_rows
    if kind == "events":
        return design.n_events
    raise ValueError("gcv_n must be 'individuals', 'rows' or 'events'")


def gcv(design: StackedDesign, ps: PenaltyStructure, fit: admm.FitResult, lam: float,
        alpha: float, gamma: float, fused: str = "constraint",
        gcv_n: str = "individuals") -> tuple[float, float]:
    """GCV statistic and effective degrees of freedom of a fit.

    ``N`` is the number of individuals unless ``gcv_n`` says otherwise. A
    non-converged fit scores ``+inf``.
    """
    if not fit.converged:
        return np.inf, np.nan
    e = effective_df(design, ps, fit.beta_scaled, lam, alpha, gamma, fused=fused)
    return gcv_value(fit.neg_log_lik, e, gcv_sample_size(design, gcv_n)), e


@dataclass
class TuneResult:
    best: GcvRecord
    records: list[GcvRecord]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.alpha, r.gamma, r.lam, r.gcv, r.edf, r.converged, r.source) for r in self.records],
            columns=["alpha", "gamma", "lambda", "gcv", "edf", "converged", "source"],
        )

    def to_csv(self, path) -> None:
        df = self.to_frame().drop(columns="source")
        df.to_csv(path, index=False, float_format="%.17g")

    def curves(self) -> pd.DataFrame:
        """GCV curves per ``(alpha, gamma)`` sorted by ``lambda`` (plot-ready)."""
        df = self.to_frame()
        return df.sort_values(["alpha", "gamma", "lambda"], kind="stable").reset_index(drop=True)

    def best_for(self, alpha: float, gamma: float) -> GcvRecord:
        recs = [r for r in self.records if r.alpha == alpha and r.gamma == gamma]
        if not recs:
            raise KeyError(f"no records for (alpha, gamma) = ({alpha}, {gamma})")
        return _select(recs)


def _rank_key(r: GcvRecord):
    # minimal GCV; ties go to the larger lambda
    return (r.gcv, -r.lam)


def _select(records: list[GcvRecord]) -> GcvRecord:
    return min(records, key=_rank_key)


def _record(design, ps, fit, lam, alpha, gamma, fused, source, gcv_n="individuals") -> GcvRecord:
    g, e = gcv(design, ps, fit, lam, alpha, gamma, fused=fused, gcv_n=gcv_n)
    return GcvRecord(alpha, gamma, float(lam), float(g), float(e), bool(fit.converged), fit, source)


def _fit_or_none(design, ps, lam, alpha, gamma, config, warm):
    try:
        return admm.fit(design, ps, lam, alpha, gamma, config=config, warm_start=warm)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("fit failed at lambda=%.4g (alpha=%g, gamma=%g): %s", lam, alpha, gamma, exc)
        return None


def _failed(alpha, gamma, lam, source):
    return GcvRecord(alpha, gamma, float(lam), np.inf, np.nan, False, None, source)


def tune_pair(design: StackedDesign, ps: PenaltyStructure, alpha: float, gamma: float,
              lambdas, config: admm.SolverConfig | None = None, refine: bool = True,
              fused: str = "constraint", xatol: float = 1e-3, max_eval: int = 50,
              gcv_n: str = "individuals") -> list[GcvRecord]:
    """Warm-started path over ``lambdas`` (descending) plus optional Brent refinement."""
    lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
    records = []
    warm = None
    for lam in lambdas:
        fit = _fit_or_none(design, ps, lam, alpha, gamma, config, warm)
        if fit is None:
            records.append(_failed(alpha, gamma, lam, "grid"))
            warm = None
            continue
        warm = fit if fit.converged else None
        records.append(_record(design, ps, fit, lam, alpha, gamma, fused, "grid", gcv_n))

    if alpha == 1.0 and gamma == 1.0:
        e = np.array([r.edf for r in records if r.converged])
        if e.size > 1 and np.any(np.diff(e) < -1e-8):
            log.info("effective df not monotone along the lasso path")

    k = min(range(len(records)), key=lambda i: _rank_key(records[i]))
    if not refine or len(records) < 3 or k in (0, len(records) - 1) or not np.isfinite(records[k].gcv):
        return records

    # bracket between the neighbouring grid values (lambdas are descending)
    lo, hi = np.log(lambdas[k + 1]), np.log(lambdas[k - 1])
    start = records[k].fit
    cache: dict[float, GcvRecord] = {}

    def objective(log_lam: float) -> float:
        lam = float(np.exp(log_lam))
        fit = _fit_or_none(design, ps, lam, alpha, gamma, config, start)
        rec = _failed(alpha, gamma, lam, "brent") if fit is None else \
            _record(design, ps, fit, lam, alpha, gamma, fused, "brent", gcv_n)
        cache[log_lam] = rec
        return rec.gcv if np.isfinite(rec.gcv) else 1e300

    optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                             options={"xatol": xatol, "maxiter": max_eval})
    records.extend(cache.values())
    return records


def tune(design: StackedDesign, ps: PenaltyStructure, grid: TuningGrid | None = None,
         config: admm.SolverConfig | None = None, refine: bool = True, jobs: int = 1,
         fused: str = "constraint", gcv_n: str = "individuals") -> TuneResult:
    """GCV tuning over all ``(alpha, gamma)`` pairs of ``grid``.

    Returns
    -------
    TuneResult
        The global best record (minimal GCV, ties toward larger ``lambda``)
        and every grid and refinement record.

    Raises
    ------
    RuntimeError
        If no fit converged.
    """
    grid = grid or TuningGrid()
    gcv_sample_size(design, gcv_n)
    lambdas = grid.lambda_values
    pairs = grid.pairs
    if jobs != 1 and len(pairs) > 1:
        from joblib import Parallel, delayed

        chunks = Parallel(n_jobs=jobs)(
            delayed(tune_pair)(design, ps, a, g, lambdas, config, refine, fused, gcv_n=gcv_n)
            for a, g in pairs)
    else:
        chunks = [tune_pair(design, ps, a, g, lambdas, config, refine, fused, gcv_n=gcv_n)
                  for a, g in pairs]
    records = [r for c in chunks for r in c]
    ok = [r for r in records if r.converged and np.isfinite(r.gcv)]
    if not ok:
        n_fail = sum(r.fit is None for r in records)
        raise RuntimeError(
            f"no converged fit among {len(records)} tuning fits ({n_fail} raised errors); "
            "consider a larger max_iter or a different lambda range")
    return TuneResult(best=_select(ok), records=records)
