"""ADMM solver for fused sparse-group lasso penalized multi-state Cox models.

The splitting is ``min L(beta) + g(theta)  s.t.  theta = K beta`` with the
scaled augmented Lagrangian

    A(beta, theta, nu) = L(beta) + g(theta) + rho/2 ||theta - K beta + nu||^2 - rho/2 ||nu||^2,

``L`` the negative log partial likelihood and ``nu`` the scaled dual
(``phi = rho * nu`` is the unscaled multiplier). One iteration is

* beta: Newton step on ``A(., theta, nu)`` with gradient
  ``-U(beta) - rho K'(theta - K beta + nu)`` and Hessian ``X'WX + rho K'K``,
* theta: ``prox_{g/rho}(K beta - nu)``, blockwise soft-thresholding,
* nu: ``nu + theta - K beta``,

followed by residual balancing of ``rho``. Reported coefficients are the
lasso block of ``theta`` and therefore contain exact zeros.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg

from . import coxlik
from .msm_core import StackedDesign
from .penalty import PenaltyStructure, Thresholds, penalty_from_thresholds, row_tuning

log = logging.getLogger(__name__)

MAX_HALVINGS = 30


@dataclass(frozen=True)
class SolverConfig:
    rho0: float = 1.0
    tau: float = 2.0
    eta: float = 10.0
    eps_abs: float = 1e-4
    eps_rel: float = 1e-2
    max_iter: int = 500
    gd_step: float = 0.01
    inner_tol: float = 1e-6
    newton_steps: int = 1
    hessian: str = "exact"
    beta_bound: float = 1e3

    def __post_init__(self):
        for name in ("rho0", "eps_abs", "eps_rel", "inner_tol", "gd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1 or self.newton_steps < 1:
            raise ValueError("max_iter and newton_steps must be at least 1")
        if self.hessian not in ("exact", "diagonal"):
            raise ValueError("hessian must be 'exact' or 'diagonal'")


@dataclass
class SolverState:
    beta: np.ndarray
    theta: np.ndarray
    nu: np.ndarray
    rho: float
    primal_res: float = np.inf
    dual_res: float = np.inf
    iter: int = 0

    @classmethod
    def zeros(cls, n_coef: int, n_rows: int, rho: float = 1.0) -> "SolverState":
        return cls(np.zeros(n_coef), np.zeros(n_rows), np.zeros(n_rows), rho)

    def copy(self) -> "SolverState":
        return replace(self, beta=self.beta.copy(), theta=self.theta.copy(), nu=self.nu.copy())


@dataclass
class FitResult:
    beta_hat: np.ndarray
    beta_scaled: np.ndarray
    baseline: coxlik.BaselineHazard
    converged: bool
    iterations: int
    trace: pd.DataFrame
    objective: float
    neg_log_lik: float
    state: SolverState | None = None
    params: dict = field(default_factory=dict)

    @property
    def selected(self) -> np.ndarray:
        return self.beta_hat != 0

    def trace_to_csv(self, path) -> None:
        self.trace.to_csv(path, index=False, float_format="%.17g")


def soft_threshold(a, kappa: float) -> np.ndarray:
    """Vector soft-thresholding ``(1 - kappa/||a||_2)_+ a`` with ``S(0) = 0``."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    a = np.asarray(a, dtype=float)
    norm = np.linalg.norm(a)
    if norm <= kappa:
        return np.zeros_like(a)
    return (1.0 - kappa / norm) * a


def _prox(v: np.ndarray, ps: PenaltyStructure, thr: Thresholds, rho: float) -> np.ndarray:
    out = np.empty_like(v)
    ns = ps.n_scalar
    k = thr.scalar / rho
    out[:ns] = np.sign(v[:ns]) * np.maximum(np.abs(v[:ns]) - k, 0.0)
    if ps.n_groups:
        vg = v[ns:]
        norms = np.sqrt(np.bincount(ps.group_of_row, weights=vg * vg, minlength=ps.n_groups))
        kg = thr.group / rho
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(norms > kg, 1.0 - kg / norms, 0.0)
        out[ns:] = vg * factor[ps.group_of_row]
    return out


def _hess(design: StackedDesign, ev: coxlik.CoxEvaluation, config: SolverConfig) -> np.ndarray:
    if config.hessian == "diagonal":
        return (design.X.T * ev.mu) @ design.X
    return ev.hessian


def _augmented(Lval: float, beta, state: SolverState, ps: PenaltyStructure) -> float:
    r = state.theta - ps.K @ beta + state.nu
    return Lval + 0.5 * state.rho * float(r @ r)


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(H, check_finite=False)
        return linalg.cho_solve(c, g, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "singular Newton system X'WX + rho K'K; increase rho or add ridge jitter") from exc


def _newton_step(design, ps, state, config, ev=None):
    """One guarded Newton step on the augmented Lagrangian; returns (beta, L(beta))."""
    beta = state.beta
    if ev is None:
        ev = coxlik.evaluate(design, beta, order=2)
    K = ps.K
    r = state.theta - K @ beta + state.nu
    g = -ev.score - state.rho * (K.T @ r)
    H = _hess(design, ev, config) + state.rho * ps.KtK
    d = -_solve(H, g)
    a0 = ev.value + 0.5 * state.rho * float(r @ r)
    slope = float(g @ d)
    t = 1.0
    for _ in range(MAX_HALVINGS):
        cand = beta + t * d
        try:
            Lc = coxlik.evaluate(design, cand, order=0).value
        except FloatingPointError:
            Lc = np.inf
        if _augmented(Lc, cand, state, ps) <= a0 + 1e-4 * t * slope + 1e-12 * abs(a0):
            return cand, Lc
        t *= 0.5
    raise FloatingPointError("Newton step diverged after 30 halvings")


def beta_update(state: SolverState, design: StackedDesign, ps: PenaltyStructure,
                config: SolverConfig | None = None) -> np.ndarray:
    """Newton update of beta on ``A(., theta, nu)`` (``config.newton_steps`` steps)."""
    config = config or SolverConfig()
    st = state.copy()
    for _ in range(config.newton_steps):
        new, _ = _newton_step(design, ps, st, config)
        done = np.linalg.norm(new - st.beta) <= config.inner_tol * max(1.0, np.linalg.norm(st.beta))
        st.beta = new
        if done:
            break
    return st.beta


def theta_update(state: SolverState, ps: PenaltyStructure, lam: float, alpha: float,
                 gamma: float) -> np.ndarray:
    """``theta = prox_{g/rho}(K beta - nu)``: scalar rows and whole group blocks are shrunk."""
    thr = row_tuning(ps, lam, alpha, gamma)
    return _prox(ps.K @ state.beta - state.nu, ps, thr, state.rho)


def dual_update(state: SolverState, ps: PenaltyStructure) -> np.ndarray:
    """Scaled dual ascent ``nu + theta - K beta``."""
    return state.nu + (state.theta - ps.K @ state.beta)


def adapt_rho(state: SolverState, config: SolverConfig | None = None) -> tuple[float, np.ndarray]:
    """Residual balancing of the step size.

    Returns the new ``rho`` and the rescaled dual so that ``rho * nu`` is unchanged.
    """
    config = config or SolverConfig()
    r, s = state.primal_res, state.dual_res
    if r > config.eta * s:
        f = config.tau
    elif s > config.eta * r:
        f = 1.0 / config.tau
    else:
        return state.rho, state.nu
    return state.rho * f, state.nu / f


def _report_beta(theta: np.ndarray, ps: PenaltyStructure, thr: Thresholds) -> np.ndarray:
    beta = theta[: ps.n_coef].copy()
    # groups shrunk to exactly zero by the group prox are dropped as a whole
    if ps.n_groups:
        ns = ps.n_scalar
        for g in np.flatnonzero(thr.group > 0):
            rows = ps.group_rows(g)
            if rows.stop > rows.start and not theta[rows].any():
                cols = np.flatnonzero(ps.K[rows].any(axis=0))
                beta[cols] = 0.0
    return beta


def fit(design: StackedDesign, ps: PenaltyStructure, lam: float, alpha: float = 1.0,
        gamma: float = 1.0, config: SolverConfig | None = None,
        warm_start: SolverState | FitResult | None = None) -> FitResult:
    """Fit a fused sparse-group lasso penalized multi-state Cox model by ADMM.

    Parameters
    ----------
    design : StackedDesign
        Possibly standardized design; coefficients are reported back-scaled.
    ps : PenaltyStructure
        ``K`` built for the same structure and covariates.
    lam, alpha, gamma : float
        Overall level ``lam >= 0`` and mixing weights in ``[0, 1]``.
    config : SolverConfig, optional
    warm_start : SolverState or FitResult, optional
        Starting iterates; defaults to all zeros with ``rho = config.rho0``.

    Returns
    -------
    FitResult
        Non-convergence is reported through ``converged=False``.
    """
    config = config or SolverConfig()
    thr = row_tuning(ps, lam, alpha, gamma)
    M, PQ = ps.K.shape
    if isinstance(warm_start, FitResult):
        warm_start = warm_start.state
    st = warm_start.copy() if warm_start is not None else SolverState.zeros(PQ, M, config.rho0)
    st.iter = 0
    K = ps.K
    rows = []
    converged = False
    Lval = np.nan
    for it in range(1, config.max_iter + 1):
        for _ in range(config.newton_steps):
            prev = st.beta
            st.beta, Lval = _newton_step(design, ps, st, config)
            if np.linalg.norm(st.beta - prev) <= config.inner_tol * max(1.0, np.linalg.norm(prev)):
                break
        if np.max(np.abs(st.beta)) > config.beta_bound:
            log.warning("ADMM iterate exceeded |beta| bound %.3g at iteration %d", config.beta_bound, it)
            break
        Kb = K @ st.beta
        theta_new = _prox(Kb - st.nu, ps, thr, st.rho)
        st.nu = st.nu + (theta_new - Kb)
        r_pri = float(np.linalg.norm(theta_new - Kb))
        r_dual = float(st.rho * np.linalg.norm(K.T @ (theta_new - st.theta)))
        st.theta = theta_new
        st.primal_res, st.dual_res, st.iter = r_pri, r_dual, it
        eps1 = np.sqrt(PQ) * config.eps_abs + config.eps_rel * max(np.linalg.norm(Kb), np.linalg.norm(theta_new))
        eps2 = np.sqrt(M) * config.eps_abs + config.eps_rel * st.rho * np.linalg.norm(K.T @ st.nu)
        obj = Lval + penalty_from_thresholds(ps, thr, st.beta)
        rows.append((it, r_pri, r_dual, st.rho, obj))
        if r_pri < eps1 and r_dual < eps2:
            converged = True
            break
        st.rho, st.nu = adapt_rho(st, config)

    beta_scaled = _report_beta(st.theta, ps, thr)
    L_hat = coxlik.neg_log_lik(design, beta_scaled)
    objective = L_hat + penalty_from_thresholds(ps, thr, beta_scaled)
    trace = pd.DataFrame(rows, columns=["iter", "primal_res", "dual_res", "rho", "objective"])
    return FitResult(
        beta_hat=beta_scaled / design.column_scales,
        beta_scaled=beta_scaled,
        baseline=coxlik.breslow(design, beta_scaled),
        converged=converged,
        iterations=st.iter,
        trace=trace,
        objective=objective,
        neg_log_lik=L_hat,
        state=st,
        params={"lambda": lam, "alpha": alpha, "gamma": gamma},
    )


def unpenalized_fit(design: StackedDesign, config: SolverConfig | None = None,
                    start=None) -> FitResult:
    """Unpenalized fit: one gradient step ``beta + gd_step * U(beta)``, then Newton-Raphson.

    Stops when the relative change of ``L`` drops below ``inner_tol`` and the
    score is numerically zero.
    """
    config = config or SolverConfig()
    PQ = design.n_coef
    if design.n_events == 0:
        beta = np.zeros(PQ)
        return _unpen_result(design, beta, True, 0, [(0, 0.0)], 0.0)
    if PQ >= design.n_events:
        raise ValueError(f"{PQ} coefficients but only {design.n_events} events: model not identifiable")
    beta = np.zeros(PQ) if start is None else np.asarray(start, float).copy()
    ev = coxlik.evaluate(design, beta, order=1)
    cand = beta + config.gd_step * ev.score
    Lc = coxlik.neg_log_lik(design, cand)
    if Lc <= ev.value:
        beta = cand
    L_old = coxlik.neg_log_lik(design, beta)
    rows = [(0, L_old)]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        ev = coxlik.evaluate(design, beta, order=2)
        H = _hess(design, ev, config)
        try:
            d = _solve(H, ev.score)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular information matrix: model not identifiable") from exc
        # a flat likelihood with a non-vanishing Newton step is a monotone likelihood
        flat = float(ev.score @ d) <= 1e-10 * max(1.0, abs(L_old))
        if flat and np.max(np.abs(d)) > 1e-2 * max(1.0, np.max(np.abs(beta))):
            raise ValueError("coefficients diverge (monotone likelihood): model not identifiable")
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + t * d
            try:
                Lc = coxlik.neg_log_lik(design, cand)
            except FloatingPointError:
                Lc = np.inf
            if Lc <= L_old + 1e-12 * abs(L_old):
                break
            t *= 0.5
        else:
            if flat:
                # stationary up to rounding
                converged = True
                break
            raise FloatingPointError("Newton-Raphson step diverged after 30 halvings")
        beta = cand
        if np.max(np.abs(beta)) > config.beta_bound:
            raise ValueError("coefficients diverge (monotone likelihood): model not identifiable")
        rel = abs(L_old - Lc) / max(abs(L_old), 1e-300)
        L_old = Lc
        rows.append((it, Lc))
        if rel < config.inner_tol and np.max(np.abs(d)) * t < 1e-8 * max(1.0, np.max(np.abs(beta))):
            converged = True
            break
    return _unpen_result(design, beta, converged, it, rows, L_old)


def _unpen_result(design, beta, converged, it, rows, L):
    trace = pd.DataFrame(
        [(i, 0.0, 0.0, 0.0, v) for i, v in rows],
        columns=["iter", "primal_res", "dual_res", "rho", "objective"],
    )
    return FitResult(
        beta_hat=beta / design.column_scales,
        beta_scaled=beta,
        baseline=coxlik.breslow(design, beta),
        converged=converged,
        iterations=it,
        trace=trace,
        objective=L,
        neg_log_lik=L,
        state=None,
        params={"lambda": 0.0, "alpha": None, "gamma": None},
    )
