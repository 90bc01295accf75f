"""Stacked multi-state Cox partial likelihood, derivatives, Breslow baseline and prediction.

Convention: ``L(beta)`` is the *negative* log partial likelihood. Its gradient
is ``-U(beta) = -X'(delta - mu)`` and its Hessian is ``X'WX`` (positive
semidefinite), where ``W`` is the full ``n x n`` risk-set weight matrix

    W = diag(mu) - sum_events s_j s_j'  with  (s_j)_l = exp(eta_l) / S_j  for l in R_j.

``W`` is never formed; ``hessian`` assembles ``X'WX`` from risk-set sums.
Ties use Breslow's convention. Risk sets are left-truncation aware: row ``l``
is at risk at ``t`` when ``Tstart_l < t <= Tstop_l``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import sparse

from .msm_core import StackedDesign, TransitionStructure


class RiskSetIndex:
    """Row orderings and search positions for risk-set sums; depends only on times.

    Rows are held in (transition, Tstop) order. Covariates are kept compressed
    as ``Z`` (``n x P``): row ``i`` of ``X`` is ``Z[i]`` placed in the columns
    of its transition, so every transition contributes an independent ``P x P``
    Hessian block.
    """

    def __init__(self, design: StackedDesign):
        trans = design.transition_of_row.astype(np.int64)
        start, stop = design.t_start, design.stop_times
        n = len(trans)
        P, Q = design.n_covariates, design.n_transitions
        self.n, self.P, self.Q = n, P, Q
        perm = np.lexsort((stop, trans))
        self.perm = perm
        self.trans0 = trans[perm] - 1
        cols = np.arange(P)[None, :] * Q + self.trans0[:, None]
        self.Z = design.X[perm[:, None], cols]
        self.delta = design.delta[perm]
        start_s, stop_s = start[perm], stop[perm]
        self.t_start_sorted = start_s
        self.order_start = np.lexsort((start_s, self.trans0))
        counts = np.bincount(self.trans0, minlength=Q)
        block_end = np.cumsum(counts)
        block_start = block_end - counts
        self.nonempty = np.flatnonzero(counts > 0)
        self.block_start = block_start
        self.block_len = counts
        self.onehot_rows = sparse.csr_matrix(
            (np.ones(n), (self.trans0, np.arange(n))), shape=(Q, n))

        ev = np.flatnonzero(self.delta > 0)
        self.events = ev
        q_ev = self.trans0[ev]
        t_ev = stop_s[ev]
        self.event_end = block_end[q_ev]
        sorted_start = start_s[self.order_start]
        self.k_stop = np.empty(len(ev), dtype=np.int64)
        self.k_start = np.empty(len(ev), dtype=np.int64)
        for q in np.unique(q_ev):
            sel = q_ev == q
            a, b = block_start[q], block_end[q]
            # first position with Tstop >= t: tied rows stay in the risk set
            self.k_stop[sel] = a + np.searchsorted(stop_s[a:b], t_ev[sel], side="left")
            self.k_start[sel] = a + np.searchsorted(sorted_start[a:b], t_ev[sel], side="left")
        self.onehot_events = sparse.csr_matrix(
            (np.ones(len(ev)), (q_ev, np.arange(len(ev)))), shape=(Q, len(ev)))

        # positions of each row's (Tstart, Tstop] in the per-transition event list
        ev_counts = np.bincount(q_ev, minlength=Q)
        ev_end = np.cumsum(ev_counts)
        ev_begin = ev_end - ev_counts
        self.pos_stop = np.empty(n, dtype=np.int64)
        self.pos_start = np.empty(n, dtype=np.int64)
        for q in self.nonempty:
            a, b = block_start[q], block_end[q]
            e0, e1 = ev_begin[q], ev_end[q]
            self.pos_stop[a:b] = e0 + np.searchsorted(t_ev[e0:e1], stop_s[a:b], side="right")
            self.pos_start[a:b] = e0 + np.searchsorted(t_ev[e0:e1], start_s[a:b], side="right")
        self.ev_begin, self.ev_end = ev_begin, ev_end
        self.event_times = t_ev
        self.event_trans = q_ev + 1

        pp = np.arange(P)
        qq = np.arange(Q)
        # flat positions of H[p*Q+q, p2*Q+q] for blocks laid out as (q, p, p2)
        r = pp[None, :, None] * Q + qq[:, None, None]
        c = pp[None, None, :] * Q + qq[:, None, None]
        self.h_flat = (r * (P * Q) + c).ravel()

    def eta(self, beta: np.ndarray) -> np.ndarray:
        Bt = beta.reshape(self.P, self.Q).T
        return np.einsum("ij,ij->i", self.Z, Bt[self.trans0])

    def shift(self, eta: np.ndarray) -> np.ndarray:
        """Per-transition max of ``eta`` broadcast to rows (stable exponentiation)."""
        c = np.zeros(self.Q)
        if self.nonempty.size:
            c[self.nonempty] = np.maximum.reduceat(eta, self.block_start[self.nonempty])
        return c[self.trans0]

    def risk_sums(self, w: np.ndarray, with_gross: bool = False):
        """Sum of ``w`` over the risk set of each event (``w`` may be 2-d).

        With ``with_gross`` also returns the magnitude of the cumulative sums
        that were differenced (a cancellation gauge).
        """
        cs = _rev_cumsum(w)
        ct = _rev_cumsum(w[self.order_start])
        e = self.event_end
        out = (cs[self.k_stop] - cs[e]) - (ct[self.k_start] - ct[e])
        if with_gross:
            return out, np.maximum(cs[self.k_stop], ct[self.k_start])
        return out

    def window_sums(self, inv: np.ndarray) -> np.ndarray:
        """Per row, the sum of ``inv`` over the events inside its ``(Tstart, Tstop]`` window.

        ``inv`` must be non-negative. Cumulative sums restart in every
        transition; windows that lose precision to cancellation are summed
        directly, which is exact up to rounding since all terms are positive.
        """
        out = np.zeros(self.n)
        a_all, b_all = self.pos_start, self.pos_stop
        for q in self.nonempty:
            e0, e1 = self.ev_begin[q], self.ev_end[q]
            rows = slice(self.block_start[q], self.block_start[q] + self.block_len[q])
            cum = np.concatenate(([0.0], np.cumsum(inv[e0:e1])))
            a, b = a_all[rows] - e0, b_all[rows] - e0
            win = cum[b] - cum[a]
            bad = np.flatnonzero((b > a) & ~(win > 1e-8 * cum[b]))
            for i in bad:
                win[i] = inv[e0 + a[i]: e0 + b[i]].sum()
            out[rows] = win
        return out

    def risk_rows(self, j: int) -> np.ndarray:
        """Sorted-space rows in the risk set of event ``j``."""
        a, b = self.k_stop[j], self.event_end[j]
        rows = np.arange(a, b)
        t = self.event_times[j]
        return rows[self.t_start_sorted[rows] < t]

    def to_stacked(self, blocks: np.ndarray) -> np.ndarray:
        """``Q x P`` per-transition values to the covariate-major ``PQ`` vector."""
        return np.asarray(blocks).T.ravel()

    def unsort(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        out[self.perm] = v
        return out


def _rev_cumsum(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    out[:-1] = np.cumsum(a[::-1], axis=0)[::-1]
    return out


class CoxEvaluation(NamedTuple):
    value: float
    score: np.ndarray | None
    mu: np.ndarray | None
    hessian: np.ndarray | None


def _check_beta(design: StackedDesign, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.n_coef,):
        raise ValueError(f"beta must have length {design.n_coef}, got shape {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta contains NaN or infinite values")
    return beta


def _weights(idx: RiskSetIndex, beta: np.ndarray):
    """Linear predictors, shifted weights and the log risk-set sum of every event.

    ``log_S`` is on the absolute scale. Events whose shifted sum cancels or
    underflows are recomputed by exact log-sum-exp and listed in ``exact``;
    their inverse sums ``inv`` are zero so callers handle them row by row.
    """
    eta = idx.eta(beta)
    shift = idx.shift(eta)
    w = np.exp(eta - shift)
    S, gross = idx.risk_sums(w, with_gross=True)
    # the event row belongs to its own risk set
    S = np.maximum(S, w[idx.events])
    exact = np.flatnonzero(~(S > 1e-8 * gross) | (S < 1e-250))
    with np.errstate(divide="ignore"):
        log_S = shift[idx.events] + np.log(S)
    inv = np.where(S > 0, 1.0 / np.where(S > 0, S, 1.0), 0.0)
    for j in exact:
        R = idx.risk_rows(j)
        m = eta[R].max()
        log_S[j] = m + np.log(np.sum(np.exp(eta[R] - m)))
        inv[j] = 0.0
    return eta, shift, w, log_S, inv, exact


def evaluate(design: StackedDesign, beta, order: int = 2) -> CoxEvaluation:
    """``L(beta)`` and, for ``order >= 1`` / ``2``, the score ``U`` and the Hessian ``X'WX``.

    ``mu`` is returned in the row order of ``design``.
    """
    beta = _check_beta(design, beta)
    idx = design.risk_index
    ev = idx.events
    PQ = design.n_coef
    if ev.size == 0:
        return CoxEvaluation(0.0, np.zeros(PQ) if order else None,
                             np.zeros(design.n_rows) if order else None,
                             np.zeros((PQ, PQ)) if order > 1 else None)
    eta, shift, w, log_S, inv, exact = _weights(idx, beta)
    value = float(np.sum(log_S - eta[ev]))
    if not np.isfinite(value):
        raise FloatingPointError("partial likelihood is not finite")
    if order == 0:
        return CoxEvaluation(value, None, None, None)
    mu = w * idx.window_sums(inv)
    soft = {}
    for j in exact:
        R = idx.risk_rows(j)
        soft[j] = (R, np.exp(eta[R] - log_S[j]))
        mu[R] += soft[j][1]
    Z = idx.Z
    U = idx.to_stacked(idx.onehot_rows @ (Z * (idx.delta - mu)[:, None]))
    if order == 1:
        return CoxEvaluation(value, U, idx.unsort(mu), None)
    P, Q = idx.P, idx.Q
    sbar = idx.risk_sums(w[:, None] * Z) * inv[:, None]
    for j, (R, s) in soft.items():
        sbar[j] = s @ Z[R]
    outer_rows = (Z[:, :, None] * (mu[:, None] * Z)[:, None, :]).reshape(len(Z), P * P)
    outer_ev = (sbar[:, :, None] * sbar[:, None, :]).reshape(len(sbar), P * P)
    blocks = idx.onehot_rows @ outer_rows - idx.onehot_events @ outer_ev
    H = np.zeros(PQ * PQ)
    H[idx.h_flat] = blocks.ravel()
    H = H.reshape(PQ, PQ)
    return CoxEvaluation(value, U, idx.unsort(mu), 0.5 * (H + H.T))


def neg_log_lik(design: StackedDesign, beta) -> float:
    """``L(beta) = sum_i delta_i [-x_i'beta + log sum_{l in R_i} exp(x_l'beta)]``."""
    return evaluate(design, beta, order=0).value


def score(design: StackedDesign, beta) -> np.ndarray:
    """Score of the log partial likelihood, ``X'(delta - mu)``; equals ``-grad L``."""
    return evaluate(design, beta, order=1).score


def hessian_weights(design: StackedDesign, beta) -> np.ndarray:
    """Diagonal of the risk-set weight matrix, i.e. the estimated cumulative hazards ``mu``."""
    return evaluate(design, beta, order=1).mu


def hessian(design: StackedDesign, beta) -> np.ndarray:
    """``X'WX``, the exact Hessian of ``L`` (so ``J(beta) = -X'WX``)."""
    return evaluate(design, beta, order=2).hessian


@dataclass(frozen=True)
class BaselineHazard:
    """Breslow cumulative baseline hazards, one right-continuous step function per transition."""

    times: tuple[np.ndarray, ...]
    cumhaz: tuple[np.ndarray, ...]

    @property
    def n_transitions(self) -> int:
        return len(self.times)

    def increments(self, q: int) -> np.ndarray:
        c = self.cumhaz[q - 1]
        return np.diff(np.concatenate(([0.0], c)))

    def __call__(self, q: int, t) -> np.ndarray:
        times, c = self.times[q - 1], self.cumhaz[q - 1]
        k = np.searchsorted(times, np.asarray(t, dtype=float), side="right")
        return np.concatenate(([0.0], c))[k]

    def to_frame(self) -> pd.DataFrame:
        parts = [
            pd.DataFrame({"trans": q + 1, "time": t, "cumhaz": c})
            for q, (t, c) in enumerate(zip(self.times, self.cumhaz))
        ]
        return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["trans", "time", "cumhaz"])

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_frame(cls, df: pd.DataFrame, n_transitions: int) -> "BaselineHazard":
        times, cum = [], []
        for q in range(1, n_transitions + 1):
            sub = df[df["trans"] == q].sort_values("time")
            times.append(sub["time"].to_numpy(float))
            cum.append(sub["cumhaz"].to_numpy(float))
        return cls(tuple(times), tuple(cum))


def breslow(design: StackedDesign, beta) -> BaselineHazard:
    """Breslow estimate ``Lambda_0q(t) = sum_{t_j <= t} d_j / sum_{R_j} exp(x_l'beta)``."""
    beta = _check_beta(design, beta)
    idx = design.risk_index
    Q = design.n_transitions
    if idx.events.size == 0:
        empty = tuple(np.zeros(0) for _ in range(Q))
        return BaselineHazard(empty, empty)
    log_S = _weights(idx, beta)[3]
    inc = np.exp(-log_S)
    times, cum = [], []
    for q in range(1, Q + 1):
        sel = idx.event_trans == q
        t = idx.event_times[sel]
        if t.size == 0:
            times.append(np.zeros(0))
            cum.append(np.zeros(0))
            continue
        ut, inv = np.unique(t, return_inverse=True)
        d = np.bincount(inv, weights=inc[sel], minlength=len(ut))
        times.append(ut)
        cum.append(np.cumsum(d))
    return BaselineHazard(tuple(times), tuple(cum))


def state_occupation(structure: TransitionStructure, baseline: BaselineHazard, beta, x, grid,
                     start_state: int = 1) -> np.ndarray:
    """State-occupation probabilities by the Markov product integral.

    Parameters
    ----------
    beta : array_like
        Stacked coefficients (length ``PQ``, covariate-major) on the scale of ``x``.
    x : array_like
        Covariate vector of length ``P``.
    grid : array_like
        Time points; the result has one row per point and one column per state.
    start_state : int
        Initial state (point mass at time 0).
    """
    K, Q = structure.n_states, structure.n_transitions
    if not 1 <= start_state <= K:
        raise ValueError(f"invalid start state {start_state}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    B = np.asarray(beta, dtype=float).reshape(len(x), Q)
    rel = np.exp(x @ B)
    grid = np.asarray(grid, dtype=float)
    jumps = [(t, q) for q in range(1, Q + 1) for t in baseline.times[q - 1]]
    all_t = np.unique([t for t, _ in jumps]) if jumps else np.zeros(0)
    dA = np.zeros((len(all_t), Q))
    for q in range(1, Q + 1):
        pos = np.searchsorted(all_t, baseline.times[q - 1])
        dA[pos, q - 1] = baseline.increments(q) * rel[q - 1]
    frm = np.array([t.from_state - 1 for t in structure.transitions], dtype=int)
    to = np.array([t.to_state - 1 for t in structure.transitions], dtype=int)
    p = np.zeros(K)
    p[start_state - 1] = 1.0
    out = np.empty((len(grid), K))
    order = np.argsort(grid, kind="stable")
    j = 0
    for g in order:
        while j < len(all_t) and all_t[j] <= grid[g]:
            flow = p[frm] * dA[j]
            p = p - np.bincount(frm, weights=flow, minlength=K) + np.bincount(to, weights=flow, minlength=K)
            j += 1
        out[g] = p
    return out


def occupation_frame(probs: np.ndarray, grid) -> pd.DataFrame:
    """Tidy ``time,state,probability`` table from ``state_occupation`` output."""
    grid = np.asarray(grid, dtype=float)
    K = probs.shape[1]
    return pd.DataFrame({
        "time": np.repeat(grid, K),
        "state": np.tile(np.arange(1, K + 1), len(grid)),
        "probability": probs.ravel(),
    })
