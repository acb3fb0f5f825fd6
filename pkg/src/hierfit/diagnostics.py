"""Worm plots and residual summaries for normalized quantile residuals.

A worm plot is a detrended normal QQ plot: ordered residuals minus the
corresponding normal quantiles, with pointwise 95% confidence bands and a
cubic polynomial fit whose coefficients flag misfits in mean, variance,
skewness and kurtosis.  Output is data-first (plain arrays / CSV) with an
optional self-contained SVG rendering so no plotting dependency is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import ConstantError, TooFewError, TooManyPanelsError

__all__ = [
    "WormPanel",
    "ResidualSummary",
    "worm_panel",
    "worm_panels_by",
    "residual_summary",
    "worm_plot_svg",
    "worm_panel_csv",
]

# flag thresholds on the cubic coefficients (intercept, slope, quadratic,
# cubic): misfits in mean, variance, skewness and kurtosis respectively
COEF_THRESHOLDS = (0.1, 0.1, 0.05, 0.03)
MIN_PANEL_SIZE = 10
MAX_PANELS = 16


@dataclass
class WormPanel:
    label: str
    x: np.ndarray = field(repr=False)  # normal quantiles
    y: np.ndarray = field(repr=False)  # detrended ordered residuals
    band: np.ndarray = field(repr=False)  # pointwise 95% half-width
    coefficients: tuple[float, float, float, float]
    flags: dict[str, bool]
    n: int

    @property
    def any_misfit(self) -> bool:
        return any(self.flags.values())

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "n": int(self.n),
            "coefficients": [float(c) for c in self.coefficients],
            "flags": dict(self.flags),
            "x": [float(v) for v in self.x],
            "y": [float(v) for v in self.y],
            "band": [float(v) for v in self.band],
        }


def classify_coefficients(coefs) -> dict[str, bool]:
    """Misfit flags from cubic coefficients (b0, b1, b2, b3)."""
    b0, b1, b2, b3 = (float(c) for c in coefs)
    t0, t1, t2, t3 = COEF_THRESHOLDS
    return {
        "mean_misfit": abs(b0) > t0,
        "variance_misfit": abs(b1) > t1,
        "skewness_misfit": abs(b2) > t2,
        "kurtosis_misfit": abs(b3) > t3,
    }


def worm_panel(residuals, label: str = "all") -> WormPanel:
    """Worm-plot data for one set of normalized quantile residuals."""
    r = np.asarray(residuals, dtype=float).ravel()
    n = r.shape[0]
    if n < MIN_PANEL_SIZE:
        raise TooFewError(f"worm plot needs at least {MIN_PANEL_SIZE} residuals")
    order = np.sort(r)
    p = (np.arange(1, n + 1) - 0.5) / n
    x = special.ndtri(p)
    y = order - x
    # pointwise 95% band for the detrended order statistics
    dens = np.exp(-0.5 * x**2) / np.sqrt(2 * np.pi)
    band = 1.96 * np.sqrt(p * (1 - p) / n) / dens
    coefs = np.polyfit(x, y, 3)[::-1]  # ascending order b0..b3
    coefs = tuple(float(c) for c in coefs)
    return WormPanel(
        label=label,
        x=x,
        y=y,
        band=band,
        coefficients=coefs,
        flags=classify_coefficients(coefs),
        n=n,
    )


def worm_panels_by(residuals, values, k: int = 4, name: str = "group") -> list[WormPanel]:
    """Worm panels of ``residuals`` split by a covariate.

    Discrete covariates (at most ``k`` distinct values) give one panel per
    value; continuous ones are cut into ``k`` equal-count bins.  ``k=1``
    returns a single panel of the pooled residuals.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    v = np.asarray(values)
    if v.shape[0] != r.shape[0]:
        raise TooFewError("residuals and grouping values differ in length")
    if k < 1:
        raise TooManyPanelsError("k must be at least 1")
    if k > MAX_PANELS:
        raise TooManyPanelsError(f"at most {MAX_PANELS} panels supported")
    if r.shape[0] // k < MIN_PANEL_SIZE:
        raise TooManyPanelsError(
            f"{k} panels would leave fewer than {MIN_PANEL_SIZE} residuals each"
        )
    if k == 1:
        return [worm_panel(r, label="all")]
    distinct = np.unique(v)
    panels = []
    if distinct.shape[0] <= k:
        for val in distinct:
            mask = v == val
            panels.append(worm_panel(r[mask], label=f"{name}={val}"))
        return panels
    vf = v.astype(float)
    edges = np.quantile(vf, np.linspace(0, 1, k + 1))
    for i in range(k):
        if i == k - 1:
            mask = (vf >= edges[i]) & (vf <= edges[i + 1])
        else:
            mask = (vf >= edges[i]) & (vf < edges[i + 1])
        if not mask.any():
            continue
        panels.append(
            worm_panel(r[mask], label=f"{name}∈[{edges[i]:.4g},{edges[i+1]:.4g}]")
        )
    return panels


# ---------------------------------------------------------------------------
# Residual summaries
# ---------------------------------------------------------------------------


@dataclass
class ResidualSummary:
    mean: float
    sd: float
    skewness: float
    kurtosis: float  # excess
    vs_fitted: np.ndarray = field(repr=False)  # (fitted, residual) pairs
    qq: np.ndarray = field(repr=False)  # (theoretical, observed) pairs
    density: np.ndarray = field(repr=False)  # (grid, kde) pairs
    vs_covariate: np.ndarray | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        out = {
            "mean": float(self.mean),
            "sd": float(self.sd),
            "skewness": float(self.skewness),
            "kurtosis": float(self.kurtosis),
            "vs_fitted": [[float(a), float(b)] for a, b in self.vs_fitted],
            "qq": [[float(a), float(b)] for a, b in self.qq],
            "density": [[float(a), float(b)] for a, b in self.density],
        }
        if self.vs_covariate is not None:
            out["vs_covariate"] = [[float(a), float(b)] for a, b in self.vs_covariate]
        return out


def residual_summary(residuals, fitted, covariate=None) -> ResidualSummary:
    """Moments, residual-vs-fitted pairs, QQ pairs and a kernel density.

    ``covariate`` optionally adds a residual-vs-covariate series.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    f = np.asarray(fitted, dtype=float).ravel()
    if r.shape[0] != f.shape[0]:
        raise TooFewError("residuals and fitted values differ in length")
    if r.shape[0] < 3:
        raise TooFewError("need at least 3 residuals")
    if np.ptp(r) == 0:
        raise ConstantError("residuals are constant")
    n = r.shape[0]
    order = np.sort(r)
    p = (np.arange(1, n + 1) - 0.5) / n
    theo = special.ndtri(p)
    kde = stats.gaussian_kde(r)
    grid = np.linspace(order[0] - 1.0, order[-1] + 1.0, 200)
    vs_cov = None
    if covariate is not None:
        c = np.asarray(covariate, dtype=float).ravel()
        if c.shape[0] != n:
            raise TooFewError("covariate and residuals differ in length")
        vs_cov = np.column_stack([c, r])
    return ResidualSummary(
        mean=float(np.mean(r)),
        sd=float(np.std(r, ddof=1)),
        skewness=float(stats.skew(r)),
        kurtosis=float(stats.kurtosis(r)),
        vs_fitted=np.column_stack([f, r]),
        qq=np.column_stack([theo, order]),
        density=np.column_stack([grid, kde(grid)]),
        vs_covariate=vs_cov,
    )


# ---------------------------------------------------------------------------
# Output: CSV and standalone SVG
# ---------------------------------------------------------------------------


def worm_panel_csv(panels: list[WormPanel]) -> str:
    lines = ["panel,x,y,band"]
    for pnl in panels:
        for xi, yi, bi in zip(pnl.x, pnl.y, pnl.band):
            lines.append(f"{pnl.label},{xi!r},{yi!r},{bi!r}")
    return "\n".join(lines) + "\n"


def _svg_path(xs, ys, sx, sy):
    pts = [f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)]
    return "M" + " L".join(pts)


def worm_plot_svg(panels: list[WormPanel], width: int = 320, height: int = 260) -> str:
    """Self-contained SVG with one sub-plot per worm panel."""
    ncol = min(len(panels), 2)
    nrow = (len(panels) + ncol - 1) // ncol
    W, H = width * ncol, height * nrow
    pad = 36
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">'
    ]
    for idx, pnl in enumerate(panels):
        ox = (idx % ncol) * width
        oy = (idx // ncol) * height
        xlim = max(3.0, float(np.max(np.abs(pnl.x))) * 1.05)
        yvals = np.concatenate([pnl.y, pnl.band, -pnl.band])
        ylim = max(0.5, float(np.max(np.abs(yvals))) * 1.1)

        def sx(v, ox=ox, xlim=xlim):
            return ox + pad + (v + xlim) / (2 * xlim) * (width - 2 * pad)

        def sy(v, oy=oy, ylim=ylim):
            return oy + height - pad - (v + ylim) / (2 * ylim) * (height - 2 * pad)

        parts.append(
            f'<rect x="{ox + pad}" y="{oy + pad}" width="{width - 2 * pad}" '
            f'height="{height - 2 * pad}" fill="white" stroke="#888"/>'
        )
        parts.append(
            f'<line x1="{ox + pad}" y1="{sy(0):.2f}" x2="{ox + width - pad}" '
            f'y2="{sy(0):.2f}" stroke="#bbb" stroke-dasharray="4 3"/>'
        )
        parts.append(
            f'<path d="{_svg_path(pnl.x, pnl.band, sx, sy)}" fill="none" '
            f'stroke="#c33" stroke-dasharray="5 3"/>'
        )
        parts.append(
            f'<path d="{_svg_path(pnl.x, -pnl.band, sx, sy)}" fill="none" '
            f'stroke="#c33" stroke-dasharray="5 3"/>'
        )
        b0, b1, b2, b3 = pnl.coefficients
        gx = np.linspace(-xlim, xlim, 80)
        gy = b0 + b1 * gx + b2 * gx**2 + b3 * gx**3
        parts.append(
            f'<path d="{_svg_path(gx, gy, sx, sy)}" fill="none" stroke="#36c"/>'
        )
        for xi, yi in zip(pnl.x, pnl.y):
            parts.append(f'<circle cx="{sx(xi):.2f}" cy="{sy(yi):.2f}" r="1.6" fill="#222"/>')
        note = " MISFIT" if pnl.any_misfit else ""
        parts.append(
            f'<text x="{ox + pad}" y="{oy + pad - 8}">{pnl.label} (n={pnl.n}){note}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
