"""Scikit-learn style estimator facade over the model-fitting engines.

The estimator is configured with a single model-description string (formula,
random part, family, variance function) and fitted on a long-format table.
``get_params``/``set_params`` follow the scikit-learn contract so the
estimator composes with its tooling (cloning, grid search over model
strings, etc.).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import LongTable, parse_model_spec
from .errors import EmptyTableError
from .gamlss import fit_gamlss, quantile_residuals
from .lmm import fit_lmm

__all__ = ["HierarchicalRegressor"]


def _validate_table(table) -> LongTable:
    if not isinstance(table, LongTable):
        raise TypeError(
            "fit expects a LongTable; build one with table_from_columns or ingest_csv"
        )
    if table.n == 0:
        raise EmptyTableError("empty table")
    return table


class HierarchicalRegressor(BaseEstimator):
    """Mixed-model / mixed-GAMLSS regressor for nested long-format data.

    Parameters
    ----------
    model:
        Model description, e.g.
        ``"height ~ block + time*tension*silicate + I(time^2) + I(time^3),
        random = block/plot/subplot/plant, varfunc = power(time)"`` or the
        same with ``family = GG`` for a generalized-gamma response.
    n_starts:
        Number of simplex starting points for the variance search.
    """

    def __init__(self, model: str = "height ~ time", n_starts: int = 3):
        self.model = model
        self.n_starts = n_starts

    def fit(self, table: LongTable, y=None):
        table = _validate_table(table)
        spec = parse_model_spec(self.model)
        if spec.family == "NO" or spec.family is None:
            self.result_ = fit_lmm(table, spec, n_starts=self.n_starts)
        else:
            self.result_ = fit_gamlss(table, spec, n_starts=self.n_starts)
        self.spec_ = spec
        self.table_ = table
        self.n_features_in_ = self.result_.design.X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit before using the estimator")

    def predict(self, table: LongTable | None = None, kind: str = "conditional"):
        """Fitted response means; ``kind`` is 'conditional' or 'marginal'.

        Only in-sample prediction is supported (``table`` must be the fitted
        table or omitted): random-effect predictions do not extend to unseen
        groups.
        """
        self._check_fitted()
        if table is not None and table != self.table_:
            raise ValueError("only in-sample prediction is supported")
        if kind not in ("conditional", "marginal"):
            raise ValueError("kind must be 'conditional' or 'marginal'")
        res = self.result_
        if hasattr(res, "fitted_mu_conditional"):
            arr = res.fitted_mu_conditional if kind == "conditional" else res.fitted_mu_marginal
        else:
            arr = res.fitted_conditional if kind == "conditional" else res.fitted_marginal
        return np.asarray(arr, dtype=float).copy()

    def score(self, table: LongTable | None = None, y=None) -> float:
        """Fitted log-likelihood (higher is better)."""
        self._check_fitted()
        if table is not None and table != self.table_:
            raise ValueError("only in-sample scoring is supported")
        return float(self.result_.loglik)

    def residuals(self) -> np.ndarray:
        """Normalized quantile residuals (GAMLSS fits) or scaled Pearson
        residuals (Gaussian mixed fits)."""
        self._check_fitted()
        res = self.result_
        if hasattr(res, "fitted_mu_conditional"):
            return quantile_residuals(res, self.table_)
        e = self.table_.height - res.fitted_conditional
        return e / np.sqrt(res.vc.sigma2 * res.resid_weights)
