"""Shared fixtures and independent oracles.

The oracles deliberately avoid the package's risk-set index: the partial
likelihood is evaluated by brute-force enumeration of each event's risk set
and the lasso reference solution comes from proximal gradient descent.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fsgl_mstate import msm_core
from fsgl_mstate.msm_core import LongFormatDataset, Transition, TransitionStructure

FIXTURES = Path(__file__).parent / "fixtures"


def illness_death() -> TransitionStructure:
    """1 healthy -> 2 ill, 1 -> 3 dead, 2 -> 3 dead; transitions 2 and 3 similar."""
    return TransitionStructure(
        n_states=3,
        transitions=(Transition(1, 1, 2), Transition(2, 1, 3), Transition(3, 2, 3)),
        similar_pairs=((2, 3),),
    )


def random_instance(rng: np.random.Generator, n_ind: int = 30, P: int = 2, Q: int = 3,
                    ties: bool = False, truncation: bool = True):
    """Random multi-state-like long data on a chain-with-exits structure with ``Q`` transitions.

    Returns ``(structure, dataset)``. Each individual sojourns in state 1 and,
    after transition 1, possibly in state 2 (left-truncated entry).
    """
    if Q == 1:
        st = TransitionStructure(2, (Transition(1, 1, 2),))
    elif Q == 2:
        st = TransitionStructure(3, (Transition(1, 1, 2), Transition(2, 1, 3)), ((1, 2),))
    else:
        st = illness_death()
    X = rng.normal(size=(n_ind, P))
    ids, trans, t0, t1, status, rows = [], [], [], [], [], []
    for i in range(n_ind):
        exit1 = float(rng.exponential(1.0))
        if ties:
            exit1 = float(np.ceil(exit1 * 4) / 4)
        exits = st.exits(1)
        k = int(rng.integers(0, len(exits) + 1))  # len(exits) means censored
        for e in exits:
            ids.append(i + 1); trans.append(e.id); t0.append(0.0); t1.append(exit1)
            status.append(int(k < len(exits) and e.id == exits[k].id)); rows.append(i)
        if k < len(exits) and exits[k].to_state == 2 and st.exits(2) and truncation:
            stop = exit1 + float(rng.exponential(1.0))
            if ties:
                stop = float(np.ceil(stop * 4) / 4)
            for e in st.exits(2):
                ids.append(i + 1); trans.append(e.id); t0.append(exit1); t1.append(stop)
                status.append(int(rng.random() < 0.7)); rows.append(i)
    ds = LongFormatDataset(np.array(ids), np.array(trans), np.array(t0), np.array(t1),
                           np.array(status), X[np.array(rows)],
                           tuple(f"X{p + 1}" for p in range(P)))
    return st, ds


def brute_neg_log_lik(design, beta) -> float:
    """Negative log partial likelihood by explicit risk-set enumeration (Breslow ties)."""
    X, d = design.X, design.delta
    t0, t1, tr = design.t_start, design.stop_times, design.transition_of_row
    eta = X @ beta
    total = 0.0
    for i in np.flatnonzero(d > 0):
        R = (tr == tr[i]) & (t0 < t1[i]) & (t1 >= t1[i])
        total += -eta[i] + np.log(np.sum(np.exp(eta[R])))
    return float(total)


def fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def prox_grad_lasso(design, kappa, beta0=None, tol=1e-12, max_iter=20000):
    """Accelerated proximal gradient (FISTA with backtracking) for ``L(b) + sum kappa_j |b_j|``."""
    from fsgl_mstate import coxlik

    kappa = np.broadcast_to(np.asarray(kappa, float), (design.n_coef,))
    def f(b):
        try:
            return coxlik.neg_log_lik(design, b)
        except FloatingPointError:
            return np.inf

    grad = lambda b: -coxlik.score(design, b)
    obj = lambda b: f(b) + float(kappa @ np.abs(b))
    x = np.zeros(design.n_coef) if beta0 is None else np.asarray(beta0, float).copy()
    y, t, step = x.copy(), 1.0, 1.0
    prev = obj(x)
    for _ in range(max_iter):
        g = grad(y)
        fy = f(y)
        while True:
            z = y - step * g
            xn = np.sign(z) * np.maximum(np.abs(z) - step * kappa, 0.0)
            dlt = xn - y
            if f(xn) <= fy + g @ dlt + dlt @ dlt / (2 * step) + 1e-12:
                break
            step *= 0.5
        tn = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = xn + (t - 1) / tn * (xn - x)
        cur = obj(xn)
        if cur > prev:  # restart momentum
            y, tn = xn.copy(), 1.0
        if abs(prev - cur) < tol * max(1.0, abs(cur)) and np.max(np.abs(xn - x)) < 1e-10:
            x = xn
            break
        x, t, prev = xn, tn, cur
    return x, obj(x)


def simulated_illness_death(seed: int, n: int = 200, standardize: bool = True):
    """Illness-death data with one binary and one normal covariate (``P=2, Q=3``)."""
    from fsgl_mstate import simstudy
    from fsgl_mstate.simstudy import CovariateSpec, DgmSpec

    st = illness_death()
    B = np.array([[0.8, 0.0, -0.5], [0.0, 0.6, 0.6]])
    spec = DgmSpec(st, (0.1, 0.05, 0.1), (CovariateSpec("X1"), CovariateSpec("X2", dist="normal")),
                   B, n_individuals=n)
    ds = simstudy.generate_dataset(spec, np.random.default_rng(seed))
    d = msm_core.stack_design(ds, st)
    return st, ds, (msm_core.standardize(d) if standardize else d)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


TIGHT = dict(eps_abs=1e-7, eps_rel=1e-6, max_iter=5000)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_design(rng):
    st, ds = random_instance(rng, n_ind=40, P=2, Q=3)
    return st, ds, msm_core.stack_design(ds, st)
