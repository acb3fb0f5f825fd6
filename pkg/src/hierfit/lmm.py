"""Maximum-likelihood fitting of nested-intercept Gaussian mixed models.

The marginal covariance is V = sigma2 * (diag(a) + sum_l rho_l Z_l Z_l'),
with a_i = time_i**(2*delta) under the power variance function (times an
optional fixed observation weight).  Likelihood evaluations avoid the dense
n x n V: with Z the concatenated indicator matrices and D = diag(rho), the
Woodbury identity reduces every solve to the M x M capacitance matrix
D^-1 + Z' diag(a)^-1 Z (M = total number of groups).  sigma2 and beta are
profiled out, so the simplex search only runs over the log variance ratios
and delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .data import DesignMatrices, LongTable, ModelSpec, build_design
from .errors import NotPositiveDefiniteError, UnknownLevelError

LOG_RHO_CLIP = 34.0
DELTA_CLIP = 20.0
BOUNDARY_RHO = 1e-8

NM_OPTIONS = {"xatol": 1e-8, "fatol": 1e-8, "maxiter": 6000, "maxfev": 6000}


@dataclass
class VarianceComponents:
    """Random-intercept variances per level, residual variance and the
    optional power-function exponent."""

    level_vars: dict[str, float]
    sigma2: float
    delta: float | None = None
    boundary: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        out = {f"sigma2_{name}": v for name, v in self.level_vars.items()}
        out["sigma2"] = self.sigma2
        if self.delta is not None:
            out["delta"] = self.delta
        return out


@dataclass
class LmmFit:
    spec: ModelSpec | None
    design: DesignMatrices = field(repr=False)
    beta: np.ndarray  # raw covariate scale
    se_beta: np.ndarray
    column_map: dict[str, tuple[int, int]]
    vc: VarianceComponents
    blups: dict[str, np.ndarray]
    loglik: float
    n_params: int
    fitted_marginal: np.ndarray = field(repr=False)
    fitted_conditional: np.ndarray = field(repr=False)
    converged: bool
    n_obs: int
    # internals for inference / warm starts
    beta_scaled: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    resid_weights: np.ndarray = field(repr=False)  # a_i incl. fitted delta

    @property
    def term_labels(self) -> list[str]:
        return list(self.column_map)

    def coef_table(self) -> list[tuple[str, int, float, float]]:
        rows = []
        for label, (lo, hi) in self.column_map.items():
            for j in range(lo, hi):
                rows.append((label, j - lo, float(self.beta[j]), float(self.se_beta[j])))
        return rows

    def _anova_inputs(self):
        d = self.design
        return d.X, d.y, self.resid_weights, d.terms, d.column_map, d.level_codes, d.level_sizes

    def to_json_dict(self) -> dict:
        return {
            "engine": "lmm",
            "coefficients": [
                {"term": t, "index": i, "estimate": b, "se": s} for t, i, b, s in self.coef_table()
            ],
            "variance_components": self.vc.as_dict(),
            "boundary_levels": list(self.vc.boundary),
            "loglik": float(self.loglik),
            "n_params": int(self.n_params),
            "converged": bool(self.converged),
            "n_obs": int(self.n_obs),
            "fitted_conditional": [float(v) for v in self.fitted_conditional],
            "fitted_marginal": [float(v) for v in self.fitted_marginal],
        }


# ---------------------------------------------------------------------------
# Workspace
# ---------------------------------------------------------------------------


class _Workspace:
    """Precomputed index structure shared across likelihood evaluations."""

    def __init__(self, X, y, codes, sizes, time=None, base_weights=None):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n, self.p = self.X.shape
        self.codes = [np.asarray(c) for c in codes]
        self.sizes = list(sizes)
        self.Q = len(self.codes)
        self.time = None if time is None else np.asarray(time, dtype=float)
        self.a0 = np.ones(self.n) if base_weights is None else np.asarray(base_weights, float)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.M_dim = int(self.offsets[-1])
        # ancestor maps between every pair of (shallower, deeper) levels
        self.anc: dict[tuple[int, int], np.ndarray] = {}
        for j in range(self.Q):
            # earliest row index of each group at level j
            idx = np.full(self.sizes[j], self.n, dtype=int)
            cj = self.codes[j]
            np.minimum.at(idx, cj, np.arange(self.n))
            if np.any(idx == self.n):
                raise NotPositiveDefiniteError("random level has empty groups")
            for i in range(j):
                self.anc[(i, j)] = self.codes[i][idx]

    def resid_a(self, delta):
        a = self.a0
        if delta is not None and self.time is not None:
            d = float(np.clip(delta, -DELTA_CLIP, DELTA_CLIP))
            a = a * self.time ** (2.0 * d)
        return a

    def _capacitance(self, inva, dinv):
        """M = D^-1 + Z' diag(inva) Z for per-group prior precisions dinv."""
        s = [np.bincount(c, weights=inva, minlength=m) for c, m in zip(self.codes, self.sizes)]
        M = np.zeros((self.M_dim, self.M_dim))
        for j in range(self.Q):
            oj = self.offsets[j]
            block = np.diag(s[j] + dinv[j])
            M[oj : oj + self.sizes[j], oj : oj + self.sizes[j]] = block
            for i in range(j):
                oi = self.offsets[i]
                sub = np.zeros((self.sizes[i], self.sizes[j]))
                sub[self.anc[(i, j)], np.arange(self.sizes[j])] = s[j]
                M[oi : oi + self.sizes[i], oj : oj + self.sizes[j]] = sub
                M[oj : oj + self.sizes[j], oi : oi + self.sizes[i]] = sub.T
        return M

    def _group_sums_matrix(self, W):
        """Z' W for an n x k array W, stacked over levels -> (M_dim, k)."""
        out = np.empty((self.M_dim, W.shape[1]))
        for j, (c, m) in enumerate(zip(self.codes, self.sizes)):
            o = self.offsets[j]
            for k in range(W.shape[1]):
                out[o : o + m, k] = np.bincount(c, weights=W[:, k], minlength=m)
        return out

    def _group_sums_vector(self, v):
        parts = [
            np.bincount(c, weights=v, minlength=m) for c, m in zip(self.codes, self.sizes)
        ]
        return np.concatenate(parts) if parts else np.empty(0)

    def quad_forms(self, a, rho):
        """Everything needed for the profiled likelihood at (a, rho).

        Returns (XtVX, XtVy, ytVy, logdet_Vtilde, cho_M, inva) where Vtilde =
        diag(a) + sum rho_l Z_l Z_l' and XtVX etc. use Vtilde^{-1}.
        """
        inva = 1.0 / a
        WX = self.X * inva[:, None]
        XtWX = self.X.T @ WX
        XtWy = WX.T @ self.y
        ytWy = float(self.y @ (inva * self.y))
        logdet_a = float(np.sum(np.log(a)))
        if self.Q == 0:
            return XtWX, XtWy, ytWy, logdet_a, None, inva
        dinv = [np.full(m, 1.0 / r) for m, r in zip(self.sizes, rho)]
        M = self._capacitance(inva, dinv)
        try:
            cho = linalg.cho_factor(M, lower=True, check_finite=False)
        except linalg.LinAlgError as e:
            raise NotPositiveDefiniteError(str(e)) from None
        CtX = self._group_sums_matrix(WX)
        Cty = self._group_sums_vector(inva * self.y)
        SX = linalg.cho_solve(cho, CtX, check_finite=False)
        Sy = linalg.cho_solve(cho, Cty, check_finite=False)
        XtVX = XtWX - CtX.T @ SX
        XtVy = XtWy - CtX.T @ Sy
        ytVy = ytWy - float(Cty @ Sy)
        logdet_M = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        logdet_D = float(sum(m * np.log(r) for m, r in zip(self.sizes, rho)))
        logdet = logdet_a + logdet_M + logdet_D
        return XtVX, XtVy, ytVy, logdet, cho, inva

    def profiled(self, x, use_delta):
        """Profiled negative log-likelihood over (log rho, [delta])."""
        x = np.asarray(x, dtype=float)
        if use_delta:
            lr, delta = x[:-1], float(x[-1])
        else:
            lr, delta = x, None
        rho = np.exp(np.clip(lr, -LOG_RHO_CLIP, LOG_RHO_CLIP))
        a = self.resid_a(delta)
        try:
            XtVX, XtVy, ytVy, logdet, _, _ = self.quad_forms(a, rho)
            cb = linalg.cho_factor(XtVX, lower=True, check_finite=False)
        except (NotPositiveDefiniteError, linalg.LinAlgError):
            return np.inf
        beta = linalg.cho_solve(cb, XtVy, check_finite=False)
        q = ytVy - float(XtVy @ beta)
        if not np.isfinite(q) or q <= 0:
            return np.inf
        sigma2 = q / self.n
        nll = 0.5 * (self.n * (np.log(2 * np.pi) + 1.0 + np.log(sigma2)) + logdet)
        return nll if np.isfinite(nll) else np.inf

    def solution(self, x, use_delta):
        """Full solution (beta, sigma2, blups, ...) at a parameter point."""
        x = np.asarray(x, dtype=float)
        if use_delta:
            lr, delta = x[:-1], float(x[-1])
        else:
            lr, delta = x, None
        rho = np.exp(np.clip(lr, -LOG_RHO_CLIP, LOG_RHO_CLIP))
        a = self.resid_a(delta)
        XtVX, XtVy, ytVy, logdet, cho, inva = self.quad_forms(a, rho)
        cb = linalg.cho_factor(XtVX, lower=True, check_finite=False)
        beta = linalg.cho_solve(cb, XtVy, check_finite=False)
        q = ytVy - float(XtVy @ beta)
        sigma2 = q / self.n
        loglik = -0.5 * (self.n * (np.log(2 * np.pi) + 1.0 + np.log(sigma2)) + logdet)
        e = self.y - self.X @ beta
        # Vtilde^{-1} e via Woodbury
        if self.Q:
            Cte = self._group_sums_vector(inva * e)
            t = linalg.cho_solve(cho, Cte, check_finite=False)
            back = np.zeros(self.n)
            for j, c in enumerate(self.codes):
                back += t[self.offsets[j] : self.offsets[j + 1]][c]
            Vinv_e = inva * e - inva * back
        else:
            Vinv_e = inva * e
        blups = []
        for j, (c, m) in enumerate(zip(self.codes, self.sizes)):
            blups.append(rho[j] * np.bincount(c, weights=Vinv_e, minlength=m))
        cov_beta_scaled = sigma2 * linalg.cho_solve(cb, np.eye(self.p), check_finite=False)
        return {
            "beta_scaled": beta,
            "sigma2": sigma2,
            "rho": rho,
            "delta": delta,
            "loglik": loglik,
            "blups": blups,
            "a": a,
            "cov_beta_scaled": cov_beta_scaled,
        }


# ---------------------------------------------------------------------------
# Public likelihood at explicit parameters
# ---------------------------------------------------------------------------


def marginal_loglik(
    design: DesignMatrices,
    y: np.ndarray,
    vc: VarianceComponents,
    beta_raw: np.ndarray,
    time: np.ndarray | None = None,
) -> float:
    """Marginal Gaussian log-likelihood at explicit (beta, variance) values.

    ``beta_raw`` is on the raw covariate scale (matching ``LmmFit.beta``).
    """
    time = design.time if time is None else np.asarray(time, dtype=float)
    if vc.sigma2 <= 0:
        raise NotPositiveDefiniteError("sigma2 must be positive")
    if any(v < 0 for v in vc.level_vars.values()):
        raise NotPositiveDefiniteError("negative level variance")
    keep = [
        (j, vc.level_vars[name])
        for j, name in enumerate(design.level_names)
        if vc.level_vars.get(name, 0.0) > 0
    ]
    ws2 = _Workspace(
        design.X,
        y,
        [design.level_codes[j] for j, _ in keep],
        [design.level_sizes[j] for j, _ in keep],
        time=time,
    )
    a = ws2.resid_a(vc.delta) * vc.sigma2
    rho = np.array([v for _, v in keep])
    _, _, _, logdet, cho, inva = ws2.quad_forms(a, rho)
    e = y - design.X @ design.beta_scaled(np.asarray(beta_raw, dtype=float))
    if ws2.Q:
        Cte = ws2._group_sums_vector(inva * e)
        t = linalg.cho_solve(cho, Cte, check_finite=False)
        back = np.zeros(ws2.n)
        for j, c in enumerate(ws2.codes):
            back += t[ws2.offsets[j] : ws2.offsets[j + 1]][c]
        quad = float(e @ (inva * e) - (inva * e) @ back)
    else:
        quad = float(e @ (inva * e))
    return -0.5 * (len(y) * np.log(2 * np.pi) + logdet + quad)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _moment_starts(ws: _Workspace, use_delta: bool) -> list[np.ndarray]:
    beta0, *_ = np.linalg.lstsq(ws.X, ws.y, rcond=None)
    e = ws.y - ws.X @ beta0
    s2 = max(float(np.var(e)), 1e-12)
    vs = []
    for c, m in zip(ws.codes, ws.sizes):
        counts = np.bincount(c, minlength=m).astype(float)
        gm = np.bincount(c, weights=e, minlength=m) / counts
        between = float(np.var(gm))
        k = ws.n / m
        vs.append(max(between - s2 / k, 0.05 * s2))
    resid_guess = max(s2 - sum(vs), 0.1 * s2)
    mom = np.log(np.array(vs) / resid_guess) if ws.Q else np.empty(0)
    starts = [
        mom,
        np.zeros(ws.Q),  # equal split of total variance
        mom + np.log(10.0),  # x10 perturbation
    ]
    if use_delta:
        starts = [np.append(s, d) for s, d in zip(starts, (0.0, 0.0, 0.5))]
    return starts


def fit_core(
    X,
    y,
    codes,
    sizes,
    level_names,
    *,
    time=None,
    base_weights=None,
    use_delta=False,
    n_starts=3,
    warm_start=None,
    nm_options=None,
):
    """Optimize the profiled likelihood; returns (workspace, solution, converged)."""
    nm_options = NM_OPTIONS if nm_options is None else nm_options
    ws = _Workspace(X, y, codes, sizes, time=time, base_weights=base_weights)
    if warm_start is not None:
        starts = [np.asarray(warm_start, dtype=float)]
    else:
        starts = _moment_starts(ws, use_delta)[: max(1, n_starts)]
    best = None
    converged = False
    for x0 in starts:
        if ws.Q == 0 and not use_delta:
            # nothing to optimize: closed-form weighted OLS
            best = (ws.profiled(np.empty(0), False), np.empty(0), True)
            converged = True
            break
        res = optimize.minimize(
            ws.profiled, x0, args=(use_delta,), method="Nelder-Mead", options=nm_options
        )
        cand = (res.fun, res.x, bool(res.success))
        if best is None or cand[0] < best[0] - 0.0:
            best = cand
    if best is None:
        raise NotPositiveDefiniteError("no admissible variance parameters found")
    converged = converged or best[2]
    x = np.asarray(best[1], dtype=float)
    # snap near-zero variance ratios to the boundary when the likelihood
    # is flat there (NM cannot reach -inf on the log scale)
    if ws.Q:
        lr = x[: ws.Q]
        small = lr < np.log(1e-3)
        if small.any():
            x_try = x.copy()
            x_try[: ws.Q][small] = -LOG_RHO_CLIP
            if ws.profiled(x_try, use_delta) <= best[0] + 1e-7:
                x = x_try
    sol = ws.solution(x, use_delta)
    return ws, sol, converged


def _assemble_fit(spec, design, ws, sol, converged) -> LmmFit:
    rho = sol["rho"]
    boundary = tuple(
        name for name, r in zip(design.level_names, rho) if r < BOUNDARY_RHO
    )
    level_vars = {
        name: (0.0 if r < BOUNDARY_RHO else float(r * sol["sigma2"]))
        for name, r in zip(design.level_names, rho)
    }
    vc = VarianceComponents(
        level_vars=level_vars,
        sigma2=float(sol["sigma2"]),
        delta=sol["delta"],
        boundary=boundary,
    )
    beta_scaled = sol["beta_scaled"]
    beta_raw = design.beta_raw(beta_scaled)
    se_raw = np.sqrt(np.diag(sol["cov_beta_scaled"])) * design.col_scale
    fitted_marg = design.X @ beta_scaled
    cond = fitted_marg.copy()
    blups = {}
    for j, name in enumerate(design.level_names):
        b = sol["blups"][j]
        if rho[j] < BOUNDARY_RHO:
            b = np.zeros_like(b)
        blups[name] = b
        cond = cond + b[design.level_codes[j]]
    n_params = design.p + len(design.level_names) + 1 + (1 if sol["delta"] is not None else 0)
    return LmmFit(
        spec=spec,
        design=design,
        beta=beta_raw,
        se_beta=se_raw,
        column_map=dict(design.column_map),
        vc=vc,
        blups=blups,
        loglik=float(sol["loglik"]),
        n_params=n_params,
        fitted_marginal=fitted_marg,
        fitted_conditional=cond,
        converged=bool(converged),
        n_obs=ws.n,
        beta_scaled=beta_scaled,
        rho=rho,
        resid_weights=sol["a"],
    )


def fit_lmm(table: LongTable, spec: ModelSpec, n_starts: int = 3) -> LmmFit:
    """ML fit of the Gaussian mixed model described by ``spec``.

    Non-convergence is reported through ``converged=False`` on the result,
    not raised.
    """
    if spec.family != "NO":
        raise NotPositiveDefiniteError("fit_lmm requires family NO")
    design = build_design(table, spec)
    use_delta = spec.variance_function is not None
    time = None
    if use_delta:
        time = table.covariate(spec.variance_function[1])
    ws, sol, converged = fit_core(
        design.X,
        table.height,
        design.level_codes,
        design.level_sizes,
        design.level_names,
        time=time,
        use_delta=use_delta,
        n_starts=n_starts,
    )
    return _assemble_fit(spec, design, ws, sol, converged)


def blup(fit: LmmFit) -> dict[str, np.ndarray]:
    """Per-level best linear unbiased predictors of the random intercepts."""
    return {name: v.copy() for name, v in fit.blups.items()}


def ranef(fit: LmmFit, level: str) -> np.ndarray:
    if level not in fit.blups:
        raise UnknownLevelError(f"no random level {level!r}")
    return fit.blups[level].copy()


def fitted(fit: LmmFit, kind: str = "conditional") -> np.ndarray:
    if kind == "marginal":
        return fit.fitted_marginal.copy()
    if kind == "conditional":
        return fit.fitted_conditional.copy()
    raise ValueError(f"kind must be 'marginal' or 'conditional', got {kind!r}")
