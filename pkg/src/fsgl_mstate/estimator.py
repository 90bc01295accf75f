"""Scikit-learn style estimators on long-format multi-state data.

``X`` is a long-format table (``id,trans,Tstart,Tstop,status`` plus covariate
columns) or a ``LongFormatDataset``; ``y`` is ignored because the outcome is
part of the long format.
"""
from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import admm, coxlik, tuning
from .msm_core import (LongFormatDataset, TransitionStructure, aml_structure,
                       dataset_from_frame, stack_design, standardize)
from .penalty import build_structure


def check_long_data(X, covariates=None, unpenalized=()) -> LongFormatDataset:
    """Coerce ``X`` to a ``LongFormatDataset`` (validating column names and types)."""
    if isinstance(X, LongFormatDataset):
        return X.with_unpenalized(unpenalized) if unpenalized else X
    if isinstance(X, pd.DataFrame):
        return dataset_from_frame(X, covariates, unpenalized)
    raise TypeError(f"expected a long-format DataFrame or LongFormatDataset, got {type(X).__name__}")


def check_penalty_params(lam, alpha, gamma) -> None:
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lam must be a finite non-negative number, got {lam}")
    for name, v in (("alpha", alpha), ("gamma", gamma)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")


class _MultiStateBase(BaseEstimator):

    def _prepare(self, X):
        structure = self.structure if self.structure is not None else aml_structure()
        if not isinstance(structure, TransitionStructure):
            raise TypeError("structure must be a TransitionStructure")
        ds = check_long_data(X, self.covariates, self.unpenalized)
        design = stack_design(ds, structure)
        if self.standardize:
            design = standardize(design)
        ps = build_structure(structure, ds.n_covariates, ds.penalized, ds.covariate_names)
        self.structure_ = structure
        self.feature_names_in_ = np.array(ds.covariate_names, dtype=object)
        self.n_features_in_ = ds.n_covariates
        return ds, design, ps

    def _store(self, result: admm.FitResult):
        P, Q = self.n_features_in_, self.structure_.n_transitions
        self.fit_result_ = result
        self.coef_ = result.beta_hat.reshape(P, Q)
        self.baseline_ = result.baseline
        self.converged_ = result.converged
        self.n_iter_ = result.iterations
        return self

    def coef_frame(self) -> pd.DataFrame:
        """Tidy ``covariate,transition,beta_hat,selected`` table."""
        check_is_fitted(self, "coef_")
        P, Q = self.coef_.shape
        return pd.DataFrame({
            "covariate": np.repeat(self.feature_names_in_, Q),
            "transition": np.tile(np.arange(1, Q + 1), P),
            "beta_hat": self.coef_.ravel(),
            "selected": self.coef_.ravel() != 0,
        })

    def predict(self, X) -> np.ndarray:
        """Linear predictor ``x'beta_q`` of every long-format row for its transition."""
        check_is_fitted(self, "coef_")
        ds = check_long_data(X, list(self.feature_names_in_))
        q = ds.trans - 1
        if np.any((q < 0) | (q >= self.coef_.shape[1])):
            raise ValueError("transition ids out of range for the fitted structure")
        return np.einsum("ij,ji->i", ds.covariates, self.coef_[:, q])

    def predict_cumhaz(self, x, times) -> np.ndarray:
        """Cumulative transition hazards ``Lambda_0q(t) exp(x'beta_q)``, shape ``(len(times), Q)``."""
        check_is_fitted(self, "coef_")
        x = np.asarray(x, dtype=float).reshape(-1)
        rel = np.exp(x @ self.coef_)
        t = np.asarray(times, dtype=float)
        return np.column_stack([self.baseline_(q + 1, t) * rel[q] for q in range(len(rel))])

    def predict_occupation(self, x, times, start_state: int = 1) -> np.ndarray:
        """State-occupation probabilities for covariate vector ``x`` (one row per time)."""
        check_is_fitted(self, "coef_")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.n_features_in_:
            raise ValueError(f"x must have {self.n_features_in_} entries")
        return coxlik.state_occupation(self.structure_, self.baseline_, self.coef_.ravel(), x,
                                       times, start_state)


class FSGLMultiStateCox(_MultiStateBase):
    """Fused sparse-group lasso penalized multi-state Cox model at fixed tuning parameters.

    Parameters
    ----------
    lam : float
        Overall penalty level (``0`` gives the unpenalized model).
    alpha, gamma : float
        Mixing weights in ``[0, 1]``; ``(1, 1)`` is the plain lasso.
    structure : TransitionStructure, optional
        Transition graph with similar pairs; defaults to the 9-state leukemia model.
    covariates : list of str, optional
        Covariate columns; default is every non-structural column.
    unpenalized : sequence of str
        Covariates left out of the penalty.
    standardize : bool
        Scale non-binary penalized columns to unit within-transition SD.
    solver : SolverConfig, optional
    """

    def __init__(self, lam=1.0, alpha=1.0, gamma=1.0, structure=None, covariates=None,
                 unpenalized=(), standardize=True, solver=None):
        self.lam = lam
        self.alpha = alpha
        self.gamma = gamma
        self.structure = structure
        self.covariates = covariates
        self.unpenalized = unpenalized
        self.standardize = standardize
        self.solver = solver

    def fit(self, X, y=None):
        check_penalty_params(self.lam, self.alpha, self.gamma)
        _, design, ps = self._prepare(X)
        res = admm.fit(design, ps, self.lam, self.alpha, self.gamma, config=self.solver)
        return self._store(res)


class UnpenalizedMultiStateCox(_MultiStateBase):
    """Stacked multi-state Cox model fitted by gradient-descent-then-Newton."""

    def __init__(self, structure=None, covariates=None, unpenalized=(), standardize=False,
                 solver=None):
        self.structure = structure
        self.covariates = covariates
        self.unpenalized = unpenalized
        self.standardize = standardize
        self.solver = solver

    def fit(self, X, y=None):
        _, design, _ = self._prepare(X)
        return self._store(admm.unpenalized_fit(design, self.solver))


class GCVMultiStateCox(_MultiStateBase):
    """FSGL model with ``(alpha, gamma, lambda)`` chosen by minimal GCV.

    After fitting, ``best_params_`` holds the selected triple and
    ``tuning_table_`` every evaluated fit.
    """

    def __init__(self, alphas=tuning.DEFAULT_WEIGHTS, gammas=tuning.DEFAULT_WEIGHTS, lambda_min=0.01,
                 lambda_max=500.0, n_lambda=25, refine=True, structure=None, covariates=None,
                 unpenalized=(), standardize=True, solver=None, n_jobs=1):
        self.alphas = alphas
        self.gammas = gammas
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max
        self.n_lambda = n_lambda
        self.refine = refine
        self.structure = structure
        self.covariates = covariates
        self.unpenalized = unpenalized
        self.standardize = standardize
        self.solver = solver
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        grid = tuning.TuningGrid(tuple(self.alphas), tuple(self.gammas), self.lambda_min,
                                 self.lambda_max, self.n_lambda)
        _, design, ps = self._prepare(X)
        res = tuning.tune(design, ps, grid, self.solver, refine=self.refine, jobs=self.n_jobs)
        self.tuning_result_ = res
        self.tuning_table_ = res.to_frame()
        b = res.best
        self.best_params_ = {"lam": b.lam, "alpha": b.alpha, "gamma": b.gamma}
        self.gcv_ = b.gcv
        self.edf_ = b.edf
        return self._store(b.fit)
