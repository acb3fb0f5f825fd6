"""Synthetic split-plot-with-subsampling experiments from known truth.

The default layout mirrors the target experiment: 4 blocks x 4 plots x 4
subplots x 4 measured plants, heights recorded at 30, 45, 60, 75 and 90
days (1280 rows, 256 plants).  Group labels are globally unique so the
nesting validator accepts them.  Treatment factors are assigned cyclically
(plot j gets tension level j mod 4, subplot k gets silicate level k mod 4),
which keeps the design balanced and the runs reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import families
from .data import LongTable, ModelSpec, build_design, parse_model_spec, table_from_columns
from .errors import InvalidSpecError

TENSION_LABELS = ("15kPa", "30kPa", "45kPa", "60kPa")
SILICATE_LABELS = ("0L/ha", "6L/ha", "12L/ha", "24L/ha")

DEFAULT_FIXED = (
    "height ~ block + time*tension*silicate + I(time^2) + I(time^3)"
)
DEFAULT_RANDOM = "block/plot/subplot/plant"


@dataclass
class TruthSpec:
    """Fully specified data-generating truth."""

    n_blocks: int = 4
    n_plots: int = 4
    n_subplots: int = 4
    n_plants: int = 4
    time_points: tuple[float, ...] = (30.0, 45.0, 60.0, 75.0, 90.0)
    formula: str = DEFAULT_FIXED
    beta: dict[str, list[float]] = field(default_factory=dict)  # term label -> raw-scale coefs
    sigma2_plot: float = 0.0
    sigma2_subplot: float = 0.0
    sigma2_plant: float = 0.0
    sigma2: float = 1.0
    delta: float | None = None
    family: str = "NO"
    gg_sigma: float = 0.2
    gg_nu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("NO", "GG"):
            raise InvalidSpecError(f"unknown family {self.family!r}")
        if min(self.n_blocks, self.n_plots, self.n_subplots, self.n_plants) < 1:
            raise InvalidSpecError("layout counts must be >= 1")
        if len(self.time_points) < 1 or min(self.time_points) <= 0:
            raise InvalidSpecError("time points must be positive")
        for v in (self.sigma2_plot, self.sigma2_subplot, self.sigma2_plant, self.sigma2):
            if v < 0:
                raise InvalidSpecError("variances must be nonnegative")
        if self.family == "GG" and (self.gg_sigma <= 0 or abs(self.gg_nu) < families.NU_GUARD):
            raise InvalidSpecError("invalid GG parameters")

    @property
    def n(self) -> int:
        return (
            self.n_blocks * self.n_plots * self.n_subplots * self.n_plants * len(self.time_points)
        )


def _skeleton(spec: TruthSpec):
    cols = {name: [] for name in ("block", "plot", "subplot", "plant", "tension", "silicate")}
    times, plot_idx, subplot_idx, plant_idx = [], [], [], []
    pi = si = li = 0
    for b in range(spec.n_blocks):
        bl = f"B{b + 1}"
        for j in range(spec.n_plots):
            pl = f"{bl}-P{j + 1}"
            tension = TENSION_LABELS[j % len(TENSION_LABELS)]
            for k in range(spec.n_subplots):
                sp = f"{pl}-S{k + 1}"
                silicate = SILICATE_LABELS[k % len(SILICATE_LABELS)]
                for l in range(spec.n_plants):
                    pt = f"{sp}-L{l + 1}"
                    for t in spec.time_points:
                        cols["block"].append(bl)
                        cols["plot"].append(pl)
                        cols["subplot"].append(sp)
                        cols["plant"].append(pt)
                        cols["tension"].append(tension)
                        cols["silicate"].append(silicate)
                        times.append(float(t))
                        plot_idx.append(pi)
                        subplot_idx.append(si)
                        plant_idx.append(li)
                    li += 1
                si += 1
            pi += 1
    return cols, np.array(times), np.array(plot_idx), np.array(subplot_idx), np.array(plant_idx)


def _linear_predictor(spec: TruthSpec, table: LongTable) -> np.ndarray:
    model = parse_model_spec(spec.formula + f", random = {DEFAULT_RANDOM}")
    design = build_design(table, model)
    beta_raw = np.zeros(design.p)
    known = set(design.column_map)
    for label, values in spec.beta.items():
        if label not in known:
            raise InvalidSpecError(f"beta names unknown term {label!r}")
        lo, hi = design.column_map[label]
        vals = np.atleast_1d(np.asarray(values, dtype=float))
        if vals.shape[0] != hi - lo:
            raise InvalidSpecError(
                f"term {label!r} needs {hi - lo} coefficients, got {vals.shape[0]}"
            )
        beta_raw[lo:hi] = vals
    return design.X @ design.beta_scaled(beta_raw)


def simulate(spec: TruthSpec, seed: int | None = None) -> LongTable:
    """Draw one synthetic experiment; deterministic per seed."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    cols, times, plot_idx, subplot_idx, plant_idx = _skeleton(spec)
    cols["time"] = list(times)
    cols["height"] = [0.0] * len(times)
    skeleton = table_from_columns(cols)
    eta = _linear_predictor(spec, skeleton)

    n_plot = spec.n_blocks * spec.n_plots
    n_subplot = n_plot * spec.n_subplots
    n_plant = n_subplot * spec.n_plants
    e_plot = rng.normal(0.0, np.sqrt(spec.sigma2_plot), n_plot)
    e_subplot = rng.normal(0.0, np.sqrt(spec.sigma2_subplot), n_subplot)
    e_plant = rng.normal(0.0, np.sqrt(spec.sigma2_plant), n_plant)
    cond = eta + e_plot[plot_idx] + e_subplot[subplot_idx] + e_plant[plant_idx]

    if spec.family == "NO":
        sd = np.sqrt(spec.sigma2) * (
            times ** spec.delta if spec.delta is not None else np.ones_like(times)
        )
        y = cond + sd * rng.standard_normal(len(times))
    else:
        mu = np.exp(cond)
        y = families.sample_at("GG", mu, spec.gg_sigma, spec.gg_nu, rng)
    cols["height"] = [float(v) for v in y]
    return table_from_columns(cols)


# ---------------------------------------------------------------------------
# Replicate studies
# ---------------------------------------------------------------------------


@dataclass
class FitRecipe:
    """How each simulated replicate should be fitted."""

    model: str  # full model-spec grammar string
    n_starts: int = 3


@dataclass
class ParamSummary:
    name: str
    truth: float
    mean: float
    bias: float
    empirical_se: float
    coverage: float | None  # normal-approx 95% CI coverage (beta only)


@dataclass
class RecoveryReport:
    n_reps: int
    n_failed: int
    params: list[ParamSummary]

    def by_name(self) -> dict[str, ParamSummary]:
        return {p.name: p for p in self.params}


def _truth_vector(spec: TruthSpec, model: ModelSpec, design) -> dict[str, float]:
    truth: dict[str, float] = {}
    for label, (lo, hi) in design.column_map.items():
        vals = np.zeros(hi - lo)
        if label in spec.beta:
            vals = np.atleast_1d(np.asarray(spec.beta[label], dtype=float))
        for i, v in enumerate(vals):
            truth[f"beta:{label}[{i}]"] = float(v)
    for name, v in zip(
        ("plot", "subplot", "plant"), (spec.sigma2_plot, spec.sigma2_subplot, spec.sigma2_plant)
    ):
        truth[f"sigma2_{name}"] = float(v)
    truth["sigma2"] = float(spec.sigma2)
    if spec.delta is not None:
        truth["delta"] = float(spec.delta)
    return truth


def _fit_one(args):
    from .gamlss import fit_gamlss
    from .lmm import fit_lmm

    spec, recipe, rep = args
    table = simulate(spec, seed=spec.seed + rep)
    model = parse_model_spec(recipe.model)
    if model.family == "GG":
        fit = fit_gamlss(table, model, n_starts=recipe.n_starts)
        est = {}
        for t, i, b, _ in fit.coef_table():
            est[f"beta:{t}[{i}]"] = b
            est[f"se:beta:{t}[{i}]"] = float("nan")
        est["sigma_eta"] = fit.sigma_eta
        if fit.nu_eta is not None:
            est["nu_eta"] = fit.nu_eta
        return fit.converged, est
    fit = fit_lmm(table, model, n_starts=recipe.n_starts)
    est = {}
    for t, i, b, s in fit.coef_table():
        est[f"beta:{t}[{i}]"] = b
        est[f"se:beta:{t}[{i}]"] = s
    for name, v in fit.vc.level_vars.items():
        est[f"sigma2_{name}"] = v
    est["sigma2"] = fit.vc.sigma2
    if fit.vc.delta is not None:
        est["delta"] = fit.vc.delta
    return fit.converged, est


def n_workers() -> int:
    cap = os.environ.get("HIERFIT_THREADS")
    if cap:
        return max(1, int(cap))
    return 1


def replicate_study(spec: TruthSpec, n_reps: int, recipe: FitRecipe) -> RecoveryReport:
    """Simulate + refit ``n_reps`` times; report bias, empirical SE, coverage.

    Replicate r uses seed ``spec.seed + r`` so serial and pooled runs agree.
    """
    if n_reps < 2:
        raise InvalidSpecError("n_reps must be >= 2")
    jobs = [(spec, recipe, rep) for rep in range(n_reps)]
    workers = n_workers()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]

    model = parse_model_spec(recipe.model)
    table0 = simulate(spec, seed=spec.seed)
    design = build_design(table0, model)
    truth = _truth_vector(spec, model, design)

    n_failed = sum(1 for ok, _ in results if not ok)
    kept = [est for ok, est in results if ok]
    if not kept:
        raise InvalidSpecError("all replicates failed to converge")
    params = []
    for name, tv in truth.items():
        vals = np.array([est[name] for est in kept if name in est])
        if vals.size == 0:
            continue
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1))
        coverage = None
        se_key = f"se:{name}"
        if all(se_key in est for est in kept):
            ses = np.array([est[se_key] for est in kept])
            if np.all(np.isfinite(ses)):
                covered = np.abs(vals - tv) <= 1.959963984540054 * ses
                coverage = float(np.mean(covered))
        params.append(ParamSummary(name, tv, mean, mean - tv, se, coverage))
    return RecoveryReport(n_reps=n_reps, n_failed=n_failed, params=params)


# ---------------------------------------------------------------------------
# Config-file parsing (key = value)
# ---------------------------------------------------------------------------

_FLOAT_KEYS = {
    "sigma2_plot",
    "sigma2_subplot",
    "sigma2_plant",
    "sigma2",
    "delta",
    "gg_sigma",
    "gg_nu",
}
_INT_KEYS = {"n_blocks", "n_plots", "n_subplots", "n_plants", "seed"}


def truth_from_config(path) -> TruthSpec:
    """Read a TruthSpec from a plain ``key = value`` config file.

    ``beta.<term label>`` keys give comma-separated coefficient lists.
    """
    spec = TruthSpec()
    beta: dict[str, list[float]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidSpecError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                if key in _INT_KEYS:
                    spec = replace(spec, **{key: int(value)})
                elif key in _FLOAT_KEYS:
                    spec = replace(spec, **{key: float(value)})
                elif key == "family":
                    spec = replace(spec, family=value)
                elif key == "formula":
                    spec = replace(spec, formula=value)
                elif key == "time_points":
                    pts = tuple(float(v) for v in value.split(","))
                    spec = replace(spec, time_points=pts)
                elif key.startswith("beta."):
                    beta[key[5:]] = [float(v) for v in value.split(",")]
                else:
                    raise InvalidSpecError(f"{path}:{lineno}: unknown key {key!r}")
            except ValueError as e:
                raise InvalidSpecError(f"{path}:{lineno}: {e}") from None
    return replace(spec, beta=beta)
