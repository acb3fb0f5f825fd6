"""Mixed GAMLSS fitting by penalized quasi-likelihood (PQL).

The distribution mean is modeled with fixed terms plus nested random
intercepts; sigma (and nu for the generalized gamma) are global constants
on their link scales.  Each outer cycle updates mu through one weighted
mixed-model step on the working response z = eta + score/weight (the local
normal approximation), then sigma and nu through one-dimensional likelihood
maximizations.  Variance components are re-estimated inside every mu-step.

A mu-step is accepted only if the global deviance does not increase beyond
a small slack; otherwise the previous state is kept and the fit is treated
as having reached its PQL fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special

from . import families
from .data import DesignMatrices, LongTable, ModelSpec, build_design
from .errors import (
    DivergedWeightsError,
    DomainError,
    NonConvergenceError,
    UnknownLevelError,
)
from .lmm import LmmFit, _assemble_fit, _Workspace, fit_core

DEVIANCE_TOL = 1e-6
DEVIANCE_SLACK = 1e-6
MAX_OUTER = 200
MIN_WEIGHT = 1e-12

RESID_CLIP = 1e-12


@dataclass
class GamlssFit:
    spec: ModelSpec | None
    family: str
    design: DesignMatrices = field(repr=False)
    mu_beta: np.ndarray  # raw covariate scale
    column_map: dict[str, tuple[int, int]]
    mu_blups: dict[str, np.ndarray]
    sigma_eta: float  # link scale
    nu_eta: float | None
    links: dict[str, str]
    global_deviance: float
    loglik: float  # PQL approximate marginal log-likelihood
    n_params: int
    converged: bool
    iterations: int
    fitted_mu_marginal: np.ndarray = field(repr=False)
    fitted_mu_conditional: np.ndarray = field(repr=False)
    # internals for inference
    inner: LmmFit = field(repr=False)
    working_response: np.ndarray = field(repr=False)

    @property
    def sigma(self) -> float:
        return float(families.link_inv(self.links["sigma"], self.sigma_eta))

    @property
    def nu(self) -> float | None:
        if self.nu_eta is None:
            return None
        return float(families.link_inv(self.links["nu"], self.nu_eta))

    def coef_table(self):
        rows = []
        for label, (lo, hi) in self.column_map.items():
            for j in range(lo, hi):
                rows.append(
                    (label, j - lo, float(self.mu_beta[j]), float(self.inner.se_beta[j]))
                )
        return rows

    def _anova_inputs(self):
        d = self.design
        return (
            d.X,
            self.working_response,
            self.inner.resid_weights,
            d.terms,
            d.column_map,
            d.level_codes,
            d.level_sizes,
        )

    def to_json_dict(self) -> dict:
        out = {
            "engine": "gamlss",
            "family": self.family,
            "links": dict(self.links),
            "coefficients": [
                {"term": t, "index": i, "estimate": b, "se": s} for t, i, b, s in self.coef_table()
            ],
            "sigma_eta": float(self.sigma_eta),
            "sigma": self.sigma,
            "random_effect_variances": {
                k: float(v) for k, v in self.inner.vc.level_vars.items()
            },
            "global_deviance": float(self.global_deviance),
            "loglik": float(self.loglik),
            "n_params": int(self.n_params),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "fitted_mu_conditional": [float(v) for v in self.fitted_mu_conditional],
            "fitted_mu_marginal": [float(v) for v in self.fitted_mu_marginal],
        }
        if self.nu_eta is not None:
            out["nu_eta"] = float(self.nu_eta)
            out["nu"] = self.nu
        return out


def _conditional_loglik(family, mu, sigma, nu, y) -> float:
    return float(np.sum(families.logpdf(family, mu, sigma, nu, y)))


def _optimize_scalar(objective, x0, lo, hi):
    res = optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    if objective(x0) < res.fun:
        return x0
    return float(res.x)


def _sigma_step(family, mu, sigma, nu, y, link) -> float:
    eta0 = float(families.link_fun(link, sigma))

    def obj(eta):
        s = float(families.link_inv(link, eta))
        if s <= 0 or not np.isfinite(s):
            return np.inf
        try:
            return -_conditional_loglik(family, mu, s, nu, y)
        except (families.InvalidParamsError, FloatingPointError):
            return np.inf

    lo, hi = eta0 - 8.0, eta0 + 8.0
    return _optimize_scalar(obj, eta0, lo, hi)


def _nu_step(family, mu, sigma, nu, y) -> float:
    def obj(v):
        if abs(v) < 1e-3 or not np.isfinite(v):
            return np.inf
        try:
            return -_conditional_loglik(family, mu, sigma, float(v), y)
        except (families.InvalidParamsError, FloatingPointError):
            return np.inf

    best = float(nu)
    best_val = obj(best)
    for lo, hi in ((1e-3, 20.0), (-20.0, -1e-3)):
        res = optimize.minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-10})
        if res.fun < best_val:
            best, best_val = float(res.x), float(res.fun)
    return best


def _laplace_loglik(family, links, design, inner, mu_cond, sigma, nu, y, gd) -> float:
    """Laplace approximation to the marginal log-likelihood at the PQL mode.

    log p(y) ~ log f(y|b) - b'D^-1 b / 2 - log|D|/2 - log|Z'WZ + D^-1|/2
    with W the Fisher weights of the response at the fitted mean.  The
    approximation is exact for the Normal family with identity link.
    """
    cond_ll = -0.5 * gd
    keep = [
        j for j, name in enumerate(design.level_names)
        if inner.vc.level_vars.get(name, 0.0) > 0.0
    ]
    if not keep:
        return cond_ll
    _, weight = families.score_and_weight(
        family, mu_cond, sigma, nu, y, wrt="mu", link=links["mu"]
    )
    codes = [design.level_codes[j] for j in keep]
    sizes = [design.level_sizes[j] for j in keep]
    ws = _Workspace(design.X, y, codes, sizes)
    var_l = [inner.vc.level_vars[design.level_names[j]] for j in keep]
    dinv = [np.full(m, 1.0 / v) for m, v in zip(sizes, var_l)]
    H = ws._capacitance(np.asarray(weight, dtype=float), dinv)
    try:
        cho = linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return cond_ll  # degenerate curvature: fall back to the conditional fit
    logdet_H = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    penalty = 0.0
    for j, v in zip(keep, var_l):
        b = inner.blups[design.level_names[j]]
        penalty += float(b @ b) / v + len(b) * np.log(v)
    return cond_ll - 0.5 * penalty - 0.5 * logdet_H


def fit_gamlss(
    table: LongTable,
    spec: ModelSpec,
    n_starts: int = 3,
    max_outer: int = MAX_OUTER,
    tol: float = DEVIANCE_TOL,
    init: "GamlssFit | None" = None,
) -> GamlssFit:
    """PQL fit of the mixed GAMLSS described by ``spec``.

    ``init`` warm-starts mu, sigma and nu from a previous fit.
    """
    family = spec.family
    links = dict(families.DEFAULT_LINKS[family])
    design = build_design(table, spec)
    y = table.height
    if family == "GG" and np.any(y <= 0):
        raise DomainError("GG requires strictly positive responses")

    # initial values
    if init is not None:
        mu = init.fitted_mu_conditional.copy()
        sigma = init.sigma
        nu = init.nu if family == "GG" else None
        if nu is None and family == "GG":
            nu = 1.0
    elif family == "GG":
        floor = max(1e-6, 1e-3 * float(np.median(np.abs(y))))
        mu = np.maximum(y, floor).astype(float)
        m = float(np.mean(y))
        sigma = min(max(float(np.std(y)) / max(abs(m), 1e-12), 0.01), 2.0)
        nu = 1.0
    else:
        beta0, *_ = np.linalg.lstsq(design.X, y, rcond=None)
        mu = design.X @ beta0
        sigma = max(float(np.std(y - mu)), 1e-8)
        nu = None
    eta = families.link_fun(links["mu"], mu)

    state = None  # accepted (mu_cond, mu_marg, sigma, nu, inner_fit, z, gd)
    gd = _conditional_loglik(family, mu, sigma, nu, y) * -2.0
    warm = None
    if init is not None:
        # the previous converged state counts as already accepted, so a
        # non-improving first step terminates instead of drifting
        state = (
            init.fitted_mu_conditional.copy(),
            init.fitted_mu_marginal.copy(),
            init.sigma,
            init.nu,
            init.inner,
            init.working_response.copy(),
            gd,
        )
        if init.inner is not None and init.inner.rho.size:
            warm = np.log(np.maximum(init.inner.rho, 1e-15))
    converged = False
    iterations = 0
    delta_gd = np.inf if init is None else 0.0  # warm starts use tight tolerances
    nm_loose = {"xatol": 1e-5, "fatol": 1e-5, "maxiter": 2000, "maxfev": 2000}
    for it in range(1, max_outer + 1):
        iterations = it
        score, weight = families.score_and_weight(
            family, mu, sigma, nu, y, wrt="mu", link=links["mu"]
        )
        if np.any(weight < MIN_WEIGHT) or not np.all(np.isfinite(weight)):
            raise DivergedWeightsError("working weight collapsed below 1e-12")
        z = eta + score / weight
        ws, sol, inner_ok = fit_core(
            design.X,
            z,
            design.level_codes,
            design.level_sizes,
            design.level_names,
            base_weights=1.0 / weight,
            use_delta=False,
            n_starts=n_starts if warm is None else 1,
            warm_start=warm,
            # loose simplex tolerances while the deviance is still moving
            nm_options=nm_loose if delta_gd > 1e-3 else None,
        )
        inner = _assemble_fit(None, design, ws, sol, inner_ok)
        eta_new = inner.fitted_conditional
        mu_new = families.link_inv(links["mu"], eta_new)
        if family == "GG":
            mu_new = np.maximum(mu_new, 1e-300)
        if family == "NO":
            # identity link makes the inner LMM exact: its profiled residual
            # variance (times the base weights sigma^2) is the ML estimate,
            # while conditional ML would be shrunk by the BLUP overfit
            sigma_new = float(np.sqrt(max(inner.vc.sigma2, 1e-24)) * sigma)
        else:
            sigma_eta_new = _sigma_step(family, mu_new, sigma, nu, y, links["sigma"])
            sigma_new = float(families.link_inv(links["sigma"], sigma_eta_new))
        nu_new = _nu_step(family, mu_new, sigma_new, nu, y) if family == "GG" else None
        gd_new = -2.0 * _conditional_loglik(family, mu_new, sigma_new, nu_new, y)

        if gd_new > gd + DEVIANCE_SLACK and state is not None:
            # PQL step no longer improves the deviance: keep previous state
            converged = True
            break
        accepted_marg = families.link_inv(links["mu"], inner.fitted_marginal)
        state = (mu_new, accepted_marg, sigma_new, nu_new, inner, z, gd_new)
        delta_gd = abs(gd - gd_new)
        mu, eta, sigma, nu = mu_new, eta_new, sigma_new, nu_new
        gd = gd_new
        warm = np.log(np.maximum(inner.rho, 1e-15))
        if (it > 1 or init is not None) and delta_gd < tol:
            converged = True
            break

    if state is None:
        raise NonConvergenceError("no PQL step could be accepted")
    mu_cond, mu_marg, sigma, nu, inner, z, gd = state

    loglik = _laplace_loglik(family, links, design, inner, mu_cond, sigma, nu, y, gd)

    sigma_eta = float(families.link_fun(links["sigma"], sigma))
    nu_eta = None if nu is None else float(families.link_fun(links["nu"], nu))
    n_params = design.p + len(design.level_names) + 1 + (1 if family == "GG" else 0)
    return GamlssFit(
        spec=spec,
        family=family,
        design=design,
        mu_beta=inner.beta,
        column_map=dict(design.column_map),
        mu_blups=dict(inner.blups),
        sigma_eta=sigma_eta,
        nu_eta=nu_eta,
        links=links,
        global_deviance=float(gd),
        loglik=float(loglik),
        n_params=n_params,
        converged=converged,
        iterations=iterations,
        fitted_mu_marginal=np.asarray(mu_marg, dtype=float),
        fitted_mu_conditional=np.asarray(mu_cond, dtype=float),
        inner=inner,
        working_response=z,
    )


def quantile_residuals(fit: GamlssFit, table: LongTable) -> np.ndarray:
    """Dunn-Smyth normalized quantile residuals at the fitted values."""
    y = table.height
    if y.shape[0] != fit.fitted_mu_conditional.shape[0]:
        raise DomainError("table does not match the fitted data")
    u = families.cdf(fit.family, fit.fitted_mu_conditional, fit.sigma, fit.nu, y)
    u = np.clip(u, RESID_CLIP, 1.0 - RESID_CLIP)
    return special.ndtri(u)


def extract_ranef(fit: GamlssFit, level: str) -> np.ndarray:
    """PQL random-intercept predictions from the final mu-step."""
    if level not in fit.mu_blups:
        raise UnknownLevelError(f"no random level {level!r}")
    return fit.mu_blups[level].copy()
