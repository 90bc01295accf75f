"""Fused sparse-group lasso penalty: structure matrix ``K`` and penalty evaluation.

``K`` stacks three blocks of rows:

* lasso: the ``PQ`` identity (all coefficients, with scaling factors ``zeta``),
* fusion: one ``+1/-1`` contrast per similar pair and penalized covariate,
* group: one block per transition selecting its penalized coefficients.

Unpenalized covariates get ``zeta = 0`` and are left out of fusion rows and
group blocks.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from .msm_core import TransitionStructure, column_index


@dataclass(frozen=True)
class PenaltyStructure:
    K: np.ndarray
    n_coef: int
    n_fusion: int
    group_sizes: np.ndarray
    zeta: np.ndarray
    row_labels: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...] = ()

    @property
    def n_rows(self) -> int:
        return self.K.shape[0]

    @property
    def n_scalar(self) -> int:
        """Rows handled by scalar soft-thresholding (lasso + fusion)."""
        return self.n_coef + self.n_fusion

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    @cached_property
    def w_group(self) -> np.ndarray:
        return np.sqrt(self.group_sizes.astype(float))

    @cached_property
    def group_starts(self) -> np.ndarray:
        return self.n_scalar + np.concatenate(([0], np.cumsum(self.group_sizes)[:-1])).astype(int)

    @cached_property
    def group_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_groups), self.group_sizes)

    @cached_property
    def KtK(self) -> np.ndarray:
        return self.K.T @ self.K

    def group_rows(self, g: int) -> slice:
        a = int(self.group_starts[g])
        return slice(a, a + int(self.group_sizes[g]))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.K.astype(int), columns=[f"c{j + 1}" for j in range(self.n_coef)])
        df.insert(0, "row", self.row_labels)
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def build_structure(structure: TransitionStructure, P: int, penalized_flags=None,
                    covariate_names=None) -> PenaltyStructure:
    """Assemble ``K`` for ``P`` covariates on the given transition graph.

    Fusion rows are enumerated pair-major, then covariate.
    """
    if P < 1:
        raise ValueError("P must be at least 1")
    Q = structure.n_transitions
    pen = np.ones(P, bool) if penalized_flags is None else np.asarray(penalized_flags, bool)
    if pen.shape != (P,):
        raise ValueError("penalized_flags must have length P")
    names = list(covariate_names) if covariate_names is not None else [f"X{p + 1}" for p in range(P)]
    PQ = P * Q

    rows = [np.eye(PQ)]
    labels = [f"lasso:{names[p]}.{q}" for p in range(P) for q in range(1, Q + 1)]
    fusion = []
    for a, b in structure.similar_pairs:
        if not (1 <= a <= Q and 1 <= b <= Q):
            raise ValueError(f"similar pair ({a}, {b}) references an unknown transition")
        for p in range(P):
            if not pen[p]:
                continue
            r = np.zeros(PQ)
            r[column_index(p, a, Q)] = 1.0
            r[column_index(p, b, Q)] = -1.0
            fusion.append(r)
            labels.append(f"fuse:{names[p]}.({a},{b})")
    if fusion:
        rows.append(np.array(fusion))
    sizes = []
    for q in range(1, Q + 1):
        block = []
        for p in range(P):
            if not pen[p]:
                continue
            r = np.zeros(PQ)
            r[column_index(p, q, Q)] = 1.0
            block.append(r)
            labels.append(f"group:{q}:{names[p]}.{q}")
        sizes.append(len(block))
        if block:
            rows.append(np.array(block))
    K = np.vstack(rows)
    K.setflags(write=False)
    return PenaltyStructure(
        K=K,
        n_coef=PQ,
        n_fusion=len(fusion),
        group_sizes=np.array(sizes, dtype=int),
        zeta=np.repeat(pen.astype(float), Q),
        row_labels=tuple(labels),
        pairs=tuple(structure.similar_pairs),
    )


def _check_params(lam, alpha, gamma, allow_zero=False):
    if lam < 0 or (lam == 0 and not allow_zero):
        raise ValueError(f"lambda must be positive, got {lam}")
    for name, v in (("alpha", alpha), ("gamma", gamma)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class Thresholds:
    """Soft-threshold levels ``lambda_m * w_m``: one per scalar row and one per group block."""

    scalar: np.ndarray
    group: np.ndarray

    @property
    def all_zero(self) -> bool:
        return not (self.scalar.any() or self.group.any())


def row_tuning(ps: PenaltyStructure, lam: float, alpha: float, gamma: float) -> Thresholds:
    """Per-row thresholds: lasso ``lam*alpha*gamma*zeta``, fusion ``lam*(1-gamma)``,
    group ``lam*(1-alpha)*gamma*sqrt(group size)``."""
    _check_params(lam, alpha, gamma, allow_zero=True)
    scalar = np.concatenate((
        lam * alpha * gamma * ps.zeta,
        np.full(ps.n_fusion, lam * (1.0 - gamma)),
    ))
    group = lam * (1.0 - alpha) * gamma * ps.w_group
    return Thresholds(scalar, group)


def penalty_from_thresholds(ps: PenaltyStructure, thresholds: Thresholds, beta) -> float:
    """Penalty as ``sum_m kappa_m |K_m beta| + sum_g kappa_g ||G_g beta||_2``."""
    Kb = ps.K @ np.asarray(beta, dtype=float)
    total = float(thresholds.scalar @ np.abs(Kb[: ps.n_scalar]))
    if ps.n_groups and thresholds.group.any():
        sq = np.bincount(ps.group_of_row, weights=Kb[ps.n_scalar:] ** 2, minlength=ps.n_groups)
        total += float(thresholds.group @ np.sqrt(sq))
    return total


def penalty_value(ps: PenaltyStructure, beta, lam: float, alpha: float, gamma: float) -> float:
    """Fused sparse-group lasso penalty in closed form.

    ``lam * [alpha*gamma*sum zeta|b| + (1-gamma)*sum_pairs sum_p |b_pq - b_pq'|
    + (1-alpha)*gamma*sum_q sqrt(p_q)*||b_q||_2]`` with ``p_q`` the number of
    penalized coefficients of transition ``q``.
    """
    _check_params(lam, alpha, gamma)
    beta = np.asarray(beta, dtype=float)
    Q = ps.n_groups
    P = ps.n_coef // Q
    B = beta.reshape(P, Q)
    pen_p = ps.zeta.reshape(P, Q)[:, 0] > 0
    lasso = float(np.sum(ps.zeta * np.abs(beta)))
    fusion = 0.0
    for a, b in ps.pairs:
        fusion += float(np.sum(np.abs(B[pen_p, a - 1] - B[pen_p, b - 1])))
    group = float(np.sum(ps.w_group * np.linalg.norm(B[pen_p], axis=0))) if pen_p.any() else 0.0
    return lam * (alpha * gamma * lasso + (1.0 - gamma) * fusion + (1.0 - alpha) * gamma * group)
