"""Multi-state data model: transition graphs, long-format data and the stacked design.

Coefficients are laid out covariate-major, i.e. ``X1.1, X1.2, ..., X1.Q, X2.1, ...``,
so column ``p * Q + (q - 1)`` holds covariate ``p`` (0-based) on rows of
transition ``q`` (1-based) and zero elsewhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

LONG_COLUMNS = ("id", "from", "to", "trans", "Tstart", "Tstop", "status")


@dataclass(frozen=True)
class Transition:
    id: int
    from_state: int
    to_state: int


@dataclass(frozen=True)
class TransitionStructure:
    """Directed multi-state graph with numbered transitions.

    Parameters
    ----------
    n_states : int
        Number of states ``K``; states are numbered ``1..K``.
    transitions : sequence of Transition
        Transitions with ids exactly ``1..Q``.
    similar_pairs : sequence of (int, int)
        Pairs of transition ids whose covariate effects are fused.
    absorbing_states : sequence of int, optional
        Declared absorbing states. When omitted, every state without exits
        is absorbing.
    """

    n_states: int
    transitions: tuple[Transition, ...]
    similar_pairs: tuple[tuple[int, int], ...] = ()
    absorbing_states: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(sorted(self.transitions, key=lambda t: t.id)))
        object.__setattr__(
            self, "similar_pairs", tuple((int(a), int(b)) for a, b in self.similar_pairs)
        )
        if self.absorbing_states is not None:
            object.__setattr__(self, "absorbing_states", tuple(int(s) for s in self.absorbing_states))
        if self.n_states < 1:
            raise ValueError("n_states must be a positive integer")
        ids = [t.id for t in self.transitions]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"transition ids must be exactly 1..Q without gaps, got {ids}")
        edges = set()
        for t in self.transitions:
            for s in (t.from_state, t.to_state):
                if not 1 <= s <= self.n_states:
                    raise ValueError(f"transition {t.id} references unknown state {s}")
            if t.from_state == t.to_state:
                raise ValueError(f"transition {t.id} is a self-loop")
            if (t.from_state, t.to_state) in edges:
                raise ValueError(f"duplicate edge {t.from_state}->{t.to_state}")
            edges.add((t.from_state, t.to_state))
        for a, b in self.similar_pairs:
            if a == b:
                raise ValueError(f"similar pair ({a}, {b}) must reference two distinct transitions")
            for q in (a, b):
                if not 1 <= q <= len(ids):
                    raise ValueError(f"similar pair ({a}, {b}) references unknown transition {q}")

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    def exits(self, state: int) -> list[Transition]:
        return [t for t in self.transitions if t.from_state == state]

    def transition(self, q: int) -> Transition:
        return self.transitions[q - 1]

    def is_absorbing(self, state: int) -> bool:
        if self.absorbing_states is not None:
            return state in self.absorbing_states
        return not self.exits(state)

    @classmethod
    def from_dict(cls, cfg: dict) -> "TransitionStructure":
        transitions = [
            Transition(int(t["id"]), int(t["from"]), int(t["to"])) for t in cfg["transitions"]
        ]
        return cls(
            n_states=int(cfg["n_states"]),
            transitions=tuple(transitions),
            similar_pairs=tuple(tuple(p) for p in cfg.get("similar_pairs", [])),
            absorbing_states=cfg.get("absorbing_states"),
        )

    def to_dict(self) -> dict:
        out = {
            "n_states": self.n_states,
            "transitions": [
                {"id": t.id, "from": t.from_state, "to": t.to_state} for t in self.transitions
            ],
            "similar_pairs": [list(p) for p in self.similar_pairs],
        }
        if self.absorbing_states is not None:
            out["absorbing_states"] = list(self.absorbing_states)
        return out


def aml_structure(similar_pairs=((3, 7), (4, 8))) -> TransitionStructure:
    """The 9-state, 8-transition leukemia model.

    States: 1 active disease, 2 early death, 3 CR1, 4 first relapse,
    5 death in CR1, 6 CR2, 7 death after relapse, 8 second relapse,
    9 death in CR2.
    """
    edges = [(1, 2), (1, 3), (3, 4), (3, 5), (4, 6), (4, 7), (6, 8), (6, 9)]
    return TransitionStructure(
        n_states=9,
        transitions=tuple(Transition(i + 1, a, b) for i, (a, b) in enumerate(edges)),
        similar_pairs=tuple(similar_pairs),
    )


def load_structure(path) -> tuple[TransitionStructure, list[str]]:
    """Read a structure config (JSON). Returns the structure and the unpenalized covariate names."""
    cfg = json.loads(Path(path).read_text())
    return TransitionStructure.from_dict(cfg), list(cfg.get("unpenalized", []))


@dataclass(frozen=True)
class LongFormatDataset:
    """Stacked per-(individual, at-risk transition) rows.

    All arrays have one entry per row; ``covariates`` is ``n x P``.
    """

    ids: np.ndarray
    trans: np.ndarray
    t_start: np.ndarray
    t_stop: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    penalized: np.ndarray = None

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        object.__setattr__(self, "covariates", cov)
        for name in ("ids", "trans", "status"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        for name in ("t_start", "t_stop"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "trans", self.trans.astype(int))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        P = cov.shape[1]
        if len(self.covariate_names) != P:
            raise ValueError("covariate_names must have one entry per covariate column")
        pen = np.ones(P, dtype=bool) if self.penalized is None else np.asarray(self.penalized, bool)
        if pen.shape != (P,):
            raise ValueError("penalized flags must have one entry per covariate")
        object.__setattr__(self, "penalized", pen)
        n = len(self.trans)
        for name in ("ids", "t_start", "t_stop", "status"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if cov.shape[0] != n:
            raise ValueError("covariates must have one row per long-format row")

    @property
    def n_rows(self) -> int:
        return len(self.trans)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_individuals(self) -> int:
        return len(np.unique(self.ids))

    def with_unpenalized(self, names: Iterable[str]) -> "LongFormatDataset":
        names = set(names)
        unknown = names - set(self.covariate_names)
        if unknown:
            raise ValueError(f"unknown unpenalized covariates: {sorted(unknown)}")
        pen = np.array([c not in names for c in self.covariate_names])
        return replace(self, penalized=pen)

    def to_frame(self, structure: TransitionStructure | None = None) -> pd.DataFrame:
        df = pd.DataFrame({"id": self.ids})
        if structure is not None:
            df["from"] = [structure.transition(q).from_state for q in self.trans]
            df["to"] = [structure.transition(q).to_state for q in self.trans]
        df["trans"] = self.trans
        df["Tstart"] = self.t_start
        df["Tstop"] = self.t_stop
        df["status"] = self.status.astype(int)
        for j, name in enumerate(self.covariate_names):
            df[name] = self.covariates[:, j]
        return df


def dataset_from_frame(df: pd.DataFrame, covariates: Sequence[str] | None = None,
                       unpenalized: Iterable[str] = ()) -> LongFormatDataset:
    """Build a dataset from a long-format frame (``id,trans,Tstart,Tstop,status,...``)."""
    for col in ("id", "trans", "Tstart", "Tstop", "status"):
        if col not in df.columns:
            raise ValueError(f"missing required column '{col}'")
    if covariates is None:
        covariates = [c for c in df.columns if c not in LONG_COLUMNS]
    missing = [c for c in covariates if c not in df.columns]
    if missing:
        raise ValueError(f"missing covariate columns {missing}")
    for col in ["trans", "Tstart", "Tstop", "status", *covariates]:
        values = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(values.isna().to_numpy())
        if bad.size:
            # header is line 1
            raise ValueError(f"line {bad[0] + 2}: column '{col}' is not numeric ({df[col].iloc[bad[0]]!r})")
    ds = LongFormatDataset(
        ids=df["id"].to_numpy(),
        trans=df["trans"].to_numpy(dtype=int),
        t_start=df["Tstart"].to_numpy(dtype=float),
        t_stop=df["Tstop"].to_numpy(dtype=float),
        status=df["status"].to_numpy(dtype=int),
        covariates=df[list(covariates)].to_numpy(dtype=float),
        covariate_names=tuple(covariates),
    )
    return ds.with_unpenalized(unpenalized)


def read_long_csv(path, covariates=None, unpenalized=()) -> LongFormatDataset:
    df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    return dataset_from_frame(df, covariates, unpenalized)


def write_long_csv(dataset: LongFormatDataset, structure: TransitionStructure, path) -> None:
    dataset.to_frame(structure).to_csv(path, index=False, float_format="%.17g")


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate(dataset: LongFormatDataset, structure: TransitionStructure) -> ValidationReport:
    """Check a long-format dataset against a transition structure.

    Never raises; the report lists every violation found.
    """
    v: list[str] = []
    Q = structure.n_transitions
    bad_q = (dataset.trans < 1) | (dataset.trans > Q)
    for i in np.flatnonzero(bad_q):
        v.append(f"row {i}: unknown transition {dataset.trans[i]}")
    for i in np.flatnonzero(~(dataset.t_start < dataset.t_stop)):
        v.append(f"row {i}: non-positive interval [{dataset.t_start[i]}, {dataset.t_stop[i]}]")
    for i in np.flatnonzero(dataset.t_start < 0):
        v.append(f"row {i}: negative entry time {dataset.t_start[i]}")
    for i in np.flatnonzero(~np.isin(dataset.status, (0, 1))):
        v.append(f"row {i}: status {dataset.status[i]} not in {{0, 1}}")
    if not np.all(np.isfinite(dataset.covariates)):
        v.append("covariates contain non-finite values")
    if dataset.n_rows and not bad_q.any():
        frm = np.array([structure.transition(q).from_state for q in dataset.trans])
        df = pd.DataFrame({
            "id": dataset.ids, "trans": dataset.trans, "from": frm,
            "start": dataset.t_start, "stop": dataset.t_stop, "status": dataset.status,
        })
        dup = df.duplicated(["id", "trans", "start"], keep="first").to_numpy()
        for i in np.flatnonzero(dup):
            v.append(f"row {i}: duplicate at-risk row for individual {df['id'][i]}, transition {df['trans'][i]}")
        g = df.groupby(["id", "from", "start"], sort=False)
        n_events = g["status"].transform("sum").to_numpy()
        n_stops = g["stop"].transform("nunique").to_numpy()
        seen = set()
        for i in np.flatnonzero((n_events > 1) | (n_stops > 1)):
            key = (df["id"][i], df["from"][i], df["start"][i])
            if key in seen:
                continue
            seen.add(key)
            if n_events[i] > 1:
                v.append(f"row {i}: multiple events per sojourn for individual {key[0]}")
            if n_stops[i] > 1:
                v.append(f"row {i}: at-risk rows of one sojourn disagree on Tstop for individual {key[0]}")
    return ValidationReport(ok=not v, violations=v)


@dataclass(frozen=True)
class StackedDesign:
    """Block-expanded ``n x PQ`` design aligned with the stacked coefficient vector."""

    X: np.ndarray
    delta: np.ndarray
    t_start: np.ndarray
    stop_times: np.ndarray
    transition_of_row: np.ndarray
    ids: np.ndarray
    n_covariates: int
    n_transitions: int
    covariate_names: tuple[str, ...]
    column_labels: tuple[str, ...]
    column_scales: np.ndarray
    penalized_columns: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.delta.sum())

    @cached_property
    def n_individuals(self) -> int:
        return len(np.unique(self.ids))

    def column(self, p: int, q: int) -> int:
        """Column of covariate ``p`` (0-based) on transition ``q`` (1-based)."""
        return p * self.n_transitions + (q - 1)

    @cached_property
    def risk_index(self):
        from .coxlik import RiskSetIndex

        return RiskSetIndex(self)


def column_index(p: int, q: int, n_transitions: int) -> int:
    return p * n_transitions + (q - 1)


def stack_design(dataset: LongFormatDataset, structure: TransitionStructure) -> StackedDesign:
    """Expand covariates into transition-specific columns (covariate-major order)."""
    report = validate(dataset, structure)
    if not report.ok:
        raise ValueError("invalid dataset: " + "; ".join(report.violations[:5]))
    n, P = dataset.covariates.shape
    Q = structure.n_transitions
    X = np.zeros((n, P * Q))
    rows = np.arange(n)
    for p in range(P):
        X[rows, p * Q + dataset.trans - 1] = dataset.covariates[:, p]
    labels = tuple(f"{name}.{q}" for name in dataset.covariate_names for q in range(1, Q + 1))
    pen_cols = np.repeat(dataset.penalized, Q)
    for arr in (X,):
        arr.setflags(write=False)
    return StackedDesign(
        X=X,
        delta=dataset.status.astype(float),
        t_start=dataset.t_start.copy(),
        stop_times=dataset.t_stop.copy(),
        transition_of_row=dataset.trans.copy(),
        ids=dataset.ids.copy(),
        n_covariates=P,
        n_transitions=Q,
        covariate_names=dataset.covariate_names,
        column_labels=labels,
        column_scales=np.ones(P * Q),
        penalized_columns=pen_cols,
    )


def _is_binary(values: np.ndarray) -> bool:
    return bool(np.all((values == 0) | (values == 1)))


def standardize(design: StackedDesign, which=None, include_binary: bool = False) -> StackedDesign:
    """Divide selected columns by their within-transition standard deviation.

    Parameters
    ----------
    which : None, sequence of int or sequence of str
        Columns to scale (indices or labels). ``None`` selects every
        penalized, non-binary column.
    include_binary : bool
        With ``which=None``, also scale 0/1 columns.

    Returns
    -------
    StackedDesign
        New design whose ``column_scales`` accumulate the divisors, so
        ``beta_original = beta_scaled / column_scales``.
    """
    Q = design.n_transitions
    q_of_col = np.tile(np.arange(1, Q + 1), design.n_covariates)
    if which is None:
        cols = []
        for j in range(design.n_coef):
            if not design.penalized_columns[j]:
                continue
            vals = design.X[design.transition_of_row == q_of_col[j], j]
            if vals.size and (include_binary or not _is_binary(vals)):
                cols.append(j)
    else:
        cols = [design.column_labels.index(c) if isinstance(c, str) else int(c) for c in which]
    X = design.X.copy()
    scales = design.column_scales.copy()
    for j in cols:
        mask = design.transition_of_row == q_of_col[j]
        vals = X[mask, j]
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        if not sd > 0:
            raise ValueError(f"column {design.column_labels[j]} is constant; cannot standardize")
        X[mask, j] = vals / sd
        scales[j] *= sd
    X.setflags(write=False)
    return replace(design, X=X, column_scales=scales)


def risk_set(design: StackedDesign, row_index: int) -> np.ndarray:
    """Rows at risk for the event on ``row_index`` (same transition, left-truncation aware)."""
    t = design.stop_times[row_index]
    q = design.transition_of_row[row_index]
    mask = (design.transition_of_row == q) & (design.t_start < t) & (t <= design.stop_times)
    return np.flatnonzero(mask)


def expand_wide(df: pd.DataFrame, structure: TransitionStructure) -> LongFormatDataset:
    """Convert one-row-per-individual data to long format.

    The wide table has an ``id`` column, ``time_k`` / ``status_k`` for every
    state ``k >= 2`` and covariate columns. ``status_k = 1`` means state ``k``
    was entered at ``time_k``; otherwise ``time_k`` is the last follow-up
    time. Everyone starts in state 1 at time 0. From the current state the
    earliest entered successor is the next state; with no entered successor
    the sojourn is censored at the largest recorded follow-up time.
    """
    K = structure.n_states
    if "id" not in df.columns:
        raise ValueError("missing required column 'id'")
    state_cols = []
    for k in range(2, K + 1):
        for prefix in ("time", "status"):
            c = f"{prefix}_{k}"
            if c not in df.columns:
                raise ValueError(f"missing required column '{c}'")
            state_cols.append(c)
    covs = [c for c in df.columns if c != "id" and c not in state_cols]
    for col in state_cols + covs:
        values = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(values.isna().to_numpy() & df[col].notna().to_numpy())
        if bad.size:
            raise ValueError(f"line {bad[0] + 2}: column '{col}' is not numeric ({df[col].iloc[bad[0]]!r})")
    times = df[[f"time_{k}" for k in range(2, K + 1)]].apply(pd.to_numeric).to_numpy(float)
    stats = df[[f"status_{k}" for k in range(2, K + 1)]].apply(pd.to_numeric).fillna(0).to_numpy(int)
    X = df[covs].apply(pd.to_numeric).to_numpy(float) if covs else np.zeros((len(df), 0))
    ids, trans, t0, t1, status, rows_x = [], [], [], [], [], []
    for i in range(len(df)):
        line = i + 2
        state, t = 1, 0.0
        visited = {1}
        while True:
            exits = structure.exits(state)
            if not exits:
                break
            entered = [e for e in exits if stats[i, e.to_state - 2] == 1]
            if entered:
                nxt = min(entered, key=lambda e: times[i, e.to_state - 2])
                stop = times[i, nxt.to_state - 2]
                if not np.isfinite(stop) or stop <= t:
                    raise ValueError(
                        f"line {line}: state {nxt.to_state} entered at {stop} but state {state} "
                        f"was entered at {t}")
            else:
                nxt = None
                fu = times[i, [e.to_state - 2 for e in exits]]
                if np.all(np.isnan(fu)):
                    raise ValueError(f"line {line}: no follow-up time for exits of state {state}")
                stop = float(np.nanmax(fu))
                if stop < t:
                    raise ValueError(f"line {line}: follow-up ends at {stop} before state {state} "
                                     f"was entered at {t}")
                if stop == t:
                    break
            for e in exits:
                ids.append(df["id"].iloc[i])
                trans.append(e.id)
                t0.append(t)
                t1.append(stop)
                status.append(int(nxt is not None and e.id == nxt.id))
                rows_x.append(i)
            if nxt is None:
                break
            state, t = nxt.to_state, stop
            visited.add(state)
        stray = [k for k in range(2, K + 1) if stats[i, k - 2] == 1 and k not in visited]
        if stray:
            raise ValueError(f"line {line}: state(s) {stray} marked as entered but not reachable "
                             "along the recorded path")
    return LongFormatDataset(
        ids=np.array(ids),
        trans=np.array(trans, dtype=int),
        t_start=np.array(t0, dtype=float),
        t_stop=np.array(t1, dtype=float),
        status=np.array(status, dtype=int),
        covariates=X[np.array(rows_x, dtype=int)] if rows_x else np.zeros((0, len(covs))),
        covariate_names=tuple(covs),
    )
