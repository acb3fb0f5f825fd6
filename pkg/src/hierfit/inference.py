"""Sequential F-tests, likelihood-ratio tests, AIC and normality testing.

The sequential (Type I) ANOVA treats the fitted model as a weighted linear
model: responses are whitened by the fitted residual weights, sequential
sums of squares come from a thin QR of the whitened design in term order,
and each term is tested against the residual mean square of the outermost
nesting stratum in which its columns are constant within groups.  For
balanced nested designs this reproduces the classical split-plot F-tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import (
    ConstantError,
    DomainError,
    NotConvergedError,
    NotNestedError,
    TooFewError,
)

__all__ = [
    "AnovaRow",
    "AnovaTable",
    "LrtResult",
    "ShapiroResult",
    "FitSummary",
    "sequential_f",
    "lrt",
    "aic",
    "shapiro_wilk",
    "chisq_sf",
    "f_sf",
]


def chisq_sf(x: float, df: float) -> float:
    """Upper-tail probability of the chi-squared distribution."""
    if df <= 0:
        raise DomainError("df must be positive")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def f_sf(x: float, df1: float, df2: float) -> float:
    """Upper-tail probability of the F distribution."""
    if df1 <= 0 or df2 <= 0:
        raise DomainError("degrees of freedom must be positive")
    if x <= 0:
        return 1.0
    return float(special.betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * x)))


# ---------------------------------------------------------------------------
# Sequential ANOVA
# ---------------------------------------------------------------------------


@dataclass
class AnovaRow:
    term: str
    df_num: int
    df_den: int
    f_value: float
    p_value: float


@dataclass
class AnovaTable:
    rows: list[AnovaRow]

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, term: str) -> AnovaRow:
        for row in self.rows:
            if row.term == term:
                return row
        raise KeyError(term)

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {
                    "term": r.term,
                    "df_num": r.df_num,
                    "df_den": r.df_den,
                    "f_value": float(r.f_value),
                    "p_value": float(r.p_value),
                }
                for r in self.rows
            ]
        }

    def to_text(self) -> str:
        head = f"{'term':<28}{'numDF':>6}{'denDF':>7}{'F-value':>14}{'p-value':>10}"
        lines = [head]
        for r in self.rows:
            p = "<.0001" if r.p_value < 1e-4 else f"{r.p_value:.4f}"
            fv = f"{r.f_value:.4f}" if r.f_value < 1e6 else f"{r.f_value:.4g}"
            lines.append(f"{r.term:<28}{r.df_num:>6}{r.df_den:>7}{fv:>14}{p:>10}")
        return "\n".join(lines)


def _term_stratum(level_codes, level_sizes, X, col_range):
    """Outermost stratum (0 = between outermost groups ... Q = residual)
    whose groups hold the term's columns constant.

    Stratum index s means "between groups of level s, within level s-1";
    s = Q means the observation (residual) stratum.
    """
    Q = len(level_codes)
    lo, hi = col_range
    cols = X[:, lo:hi]
    for s in range(Q):
        c = level_codes[s]
        m = level_sizes[s]
        constant = True
        for k in range(cols.shape[1]):
            v = cols[:, k]
            mx = np.full(m, -np.inf)
            mn = np.full(m, np.inf)
            np.maximum.at(mx, c, v)
            np.minimum.at(mn, c, v)
            if np.any(mx - mn > 1e-10 * max(1.0, np.max(np.abs(v)))):
                constant = False
                break
        if constant:
            return s
    return Q


def _between_ss(y, inva, codes, sizes):
    """Weighted between-group sum of squares sum_g (sum w y)^2 / sum w."""
    num = np.bincount(codes, weights=inva * y, minlength=sizes)
    den = np.bincount(codes, weights=inva, minlength=sizes)
    return float(np.sum(num**2 / den))


def sequential_f(fit) -> AnovaTable:
    """Sequential (Type I) conditional F-tests for every fixed term.

    Accepts any fit exposing ``_anova_inputs()`` (both mixed-model and
    GAMLSS results do).  Terms are tested in specification order; each is
    referred to the residual mean square of its own nesting stratum.
    """
    if not getattr(fit, "converged", True):
        raise NotConvergedError("cannot run F-tests on an unconverged fit")
    X, y, a, terms, column_map, level_codes, level_sizes = fit._anova_inputs()
    n = y.shape[0]
    inva = 1.0 / np.asarray(a, dtype=float)
    root = np.sqrt(inva)
    Xw = X * root[:, None]
    yw = y * root
    Q = len(level_codes)

    # sequential delta-SS per column from thin QR in term order
    Qm, _ = np.linalg.qr(Xw)
    proj = Qm.T @ yw
    col_ss = proj**2

    labels = list(column_map)
    term_ss = {}
    term_df = {}
    term_stratum = {}
    for label in labels:
        lo, hi = column_map[label]
        term_ss[label] = float(np.sum(col_ss[lo:hi]))
        term_df[label] = hi - lo
        term_stratum[label] = _term_stratum(level_codes, level_sizes, X, (lo, hi))

    # between-stratum total SS: B[s] = weighted SS between groups of level s
    # (B[-1] corresponds to the single grand group, B[Q] to observations)
    B = []
    grand = float((inva * y).sum() ** 2 / inva.sum())
    for s in range(Q):
        B.append(_between_ss(y, inva, level_codes[s], level_sizes[s]))
    B.append(float(np.sum(inva * y**2)))  # observation stratum
    m_counts = list(level_sizes) + [n]

    # residual SS and df per stratum
    rss = np.empty(Q + 1)
    dfs = np.empty(Q + 1, dtype=int)
    prev_B, prev_m = grand, 1
    for s in range(Q + 1):
        p_s = sum(
            term_df[l]
            for l in labels
            if term_stratum[l] == s and l != "(Intercept)"
        )
        ss_s = sum(
            term_ss[l]
            for l in labels
            if term_stratum[l] == s and l != "(Intercept)"
        )
        if s == 0:
            # the intercept always lives in the outermost stratum
            ss_s += term_ss.get("(Intercept)", 0.0) - grand
        rss[s] = B[s] - prev_B - ss_s
        dfs[s] = m_counts[s] - prev_m - p_s
        prev_B, prev_m = B[s], m_counts[s]

    rows = []
    for label in labels:
        s = term_stratum[label]
        if label == "(Intercept)":
            # report the intercept against the innermost stratum that
            # retains residual degrees of freedom
            s = Q
            while s > 0 and (dfs[s] <= 0 or rss[s] <= 0):
                s -= 1
        df_den = int(dfs[s])
        if df_den <= 0 or rss[s] <= 0:
            raise DomainError(
                f"no residual degrees of freedom in the stratum of {label!r}"
            )
        ms_num = term_ss[label] / term_df[label]
        f_val = ms_num / (rss[s] / df_den)
        rows.append(
            AnovaRow(
                term=label,
                df_num=term_df[label],
                df_den=df_den,
                f_value=float(f_val),
                p_value=f_sf(float(f_val), term_df[label], df_den),
            )
        )
    return AnovaTable(rows=rows)


# ---------------------------------------------------------------------------
# Likelihood-ratio test and AIC
# ---------------------------------------------------------------------------


@dataclass
class FitSummary:
    """Minimal fit description for likelihood comparisons."""

    loglik: float
    n_params: int


@dataclass
class LrtResult:
    statistic: float
    df: int
    p_value: float
    loglik0: float
    loglik1: float

    def to_json_dict(self) -> dict:
        return {
            "statistic": float(self.statistic),
            "df": int(self.df),
            "p_value": float(self.p_value),
            "loglik_restricted": float(self.loglik0),
            "loglik_full": float(self.loglik1),
        }

    def to_text(self) -> str:
        p = "<.0001" if self.p_value < 1e-4 else f"{self.p_value:.4f}"
        return (
            f"LR statistic = {self.statistic:.4f} on {self.df} df, p = {p}"
        )


def lrt(restricted, full) -> LrtResult:
    """Likelihood-ratio test of a restricted model against a full model.

    Both arguments need ``loglik`` and ``n_params`` attributes (fitted
    models or :class:`FitSummary`).  The restricted model must have fewer
    parameters and, up to numerical slack, a lower log-likelihood.
    """
    df = int(full.n_params) - int(restricted.n_params)
    if df <= 0:
        raise NotNestedError(
            "restricted model must have fewer parameters than the full model"
        )
    if restricted.loglik > full.loglik + 1e-6:
        raise NotNestedError(
            "restricted log-likelihood exceeds the full log-likelihood; "
            "the models do not look nested"
        )
    stat = max(0.0, 2.0 * (float(full.loglik) - float(restricted.loglik)))
    return LrtResult(
        statistic=stat,
        df=df,
        p_value=chisq_sf(stat, df),
        loglik0=float(restricted.loglik),
        loglik1=float(full.loglik),
    )


def aic(fit_or_loglik, n_params: int | None = None) -> float:
    """Akaike information criterion, -2*loglik + 2*n_params."""
    if n_params is None:
        loglik = float(fit_or_loglik.loglik)
        n_params = int(fit_or_loglik.n_params)
    else:
        loglik = float(fit_or_loglik)
    return -2.0 * loglik + 2.0 * int(n_params)


# ---------------------------------------------------------------------------
# Shapiro-Wilk
# ---------------------------------------------------------------------------


@dataclass
class ShapiroResult:
    statistic: float
    p_value: float

    def to_json_dict(self) -> dict:
        return {"statistic": float(self.statistic), "p_value": float(self.p_value)}


def shapiro_wilk(x) -> ShapiroResult:
    """Shapiro-Wilk normality test (Royston's algorithm)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] < 3:
        raise TooFewError("Shapiro-Wilk needs at least 3 observations")
    if x.shape[0] > 5000:
        raise DomainError("Shapiro-Wilk p-values are unreliable above n=5000")
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite values")
    if np.ptp(x) == 0:
        raise ConstantError("all observations identical")
    w, p = stats.shapiro(x)
    return ShapiroResult(statistic=float(w), p_value=float(p))
