"""Command-line front door: simulate, fit, compare, diagnose.

Machine output is JSON, human output is aligned text, figures are
standalone SVG.  Every output directory receives a run manifest recording
the command, inputs, model string, seed, tool version and outputs.  Exit
codes: 0 ok, 2 user error, 3 numerical non-convergence, 4 invalid
comparison.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import LongTable, ingest_csv, parse_model_spec
from .diagnostics import (
    residual_summary,
    worm_panel_csv,
    worm_panels_by,
    worm_plot_svg,
)
from .errors import (
    DivergedWeightsError,
    DomainError,
    HierfitError,
    NonConvergenceError,
)
from .gamlss import fit_gamlss
from .inference import FitSummary, aic, lrt, sequential_f, shapiro_wilk
from .lmm import fit_lmm
from .simulate import simulate, truth_from_config

EXIT_OK = 0
EXIT_USER = 2
EXIT_NONCONVERGENCE = 3
EXIT_BAD_COMPARISON = 4


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_manifest(out_dir: Path, command: str, inputs: list[str], model: str | None,
                    seed: int | None, outputs: list[str], wall_time: float) -> None:
    manifest = {
        "command": command,
        "inputs": sorted(str(p) for p in inputs),
        "model": model,
        "seed": seed,
        "version": __version__,
        "outputs": sorted(str(p) for p in outputs),
        "wall_time_seconds": round(wall_time, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _resolve_model(args) -> str:
    """Combine --model with the optional --family / --varfunc flags."""
    model = args.model
    if getattr(args, "family", None):
        if "family" in model:
            raise DomainError("family given both in --model and --family")
        model += f", family = {args.family}"
    vf = getattr(args, "varfunc", None)
    if vf:
        m = re.fullmatch(r"power[:(](\w+)\)?", vf)
        if not m:
            raise DomainError(f"unknown variance function {vf!r}; expected power:time")
        if "varfunc" in model:
            raise DomainError("variance function given both in --model and --varfunc")
        model += f", varfunc = power({m.group(1)})"
    return model


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    try:
        spec = truth_from_config(args.config)
        out_paths = []
        for rep in range(max(1, args.reps)):
            table = simulate(spec, seed=args.seed + rep)
            out = Path(args.out)
            if args.reps > 1:
                out = out.with_name(f"{out.stem}_{rep + 1}{out.suffix}")
            out.parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(out)
            out_paths.append(out)
    except OSError as e:
        return _fail(str(e), EXIT_USER)
    except HierfitError as e:
        return _fail(str(e), EXIT_USER)
    out_dir = out_paths[0].parent
    _write_manifest(out_dir, "simulate", [args.config], None, args.seed,
                    [str(p) for p in out_paths], time.perf_counter() - t0)
    print(f"wrote {len(out_paths)} file(s) to {out_dir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    try:
        model = _resolve_model(args)
        spec = parse_model_spec(model)
        table = ingest_csv(args.data)
    except OSError as e:
        return _fail(str(e), EXIT_USER)
    except HierfitError as e:
        return _fail(str(e), EXIT_USER)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    code = EXIT_OK
    try:
        if spec.family == "GG":
            fit = fit_gamlss(table, spec, n_starts=args.n_starts)
        else:
            fit = fit_lmm(table, spec, n_starts=args.n_starts)
    except (NonConvergenceError, DivergedWeightsError, DomainError) as e:
        payload = {"converged": False, "error": str(e), "model": model}
        (out_dir / "fit.json").write_text(json.dumps(payload, indent=2) + "\n")
        _write_manifest(out_dir, "fit", [args.data], model, None,
                        [str(out_dir / "fit.json")], time.perf_counter() - t0)
        return _fail(str(e), EXIT_NONCONVERGENCE)
    except HierfitError as e:
        return _fail(str(e), EXIT_USER)
    payload = fit.to_json_dict()
    payload["model"] = model
    (out_dir / "fit.json").write_text(json.dumps(payload, indent=2) + "\n")
    outputs = [str(out_dir / "fit.json")]
    try:
        table_txt = sequential_f(fit).to_text()
    except HierfitError as e:
        table_txt = f"(no ANOVA table: {e})"
    (out_dir / "anova.txt").write_text(table_txt + "\n")
    outputs.append(str(out_dir / "anova.txt"))
    if not fit.converged:
        code = EXIT_NONCONVERGENCE
        print("warning: fit did not converge", file=sys.stderr)
    _write_manifest(out_dir, "fit", [args.data], model, None, outputs,
                    time.perf_counter() - t0)
    print(table_txt)
    return code


def cmd_compare(args) -> int:
    try:
        j0 = json.loads(Path(args.fit0).read_text())
        j1 = json.loads(Path(args.fit1).read_text())
        s0 = FitSummary(loglik=float(j0["loglik"]), n_params=int(j0["n_params"]))
        s1 = FitSummary(loglik=float(j1["loglik"]), n_params=int(j1["n_params"]))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        return _fail(f"unreadable fit JSON: {e}", EXIT_USER)
    try:
        result = lrt(s0, s1)
    except HierfitError as e:
        return _fail(str(e), EXIT_BAD_COMPARISON)
    print(result.to_text())
    print(f"{'model':<12}{'df':>6}{'logLik':>14}{'AIC':>12}")
    print(f"{'restricted':<12}{s0.n_params:>6}{s0.loglik:>14.2f}{aic(s0):>12.2f}")
    print(f"{'full':<12}{s1.n_params:>6}{s1.loglik:>14.2f}{aic(s1):>12.2f}")
    return EXIT_OK


def _residuals_from_json(fit_json: dict, table: LongTable) -> np.ndarray:
    """Recompute normalized residuals from a written fit JSON."""
    from scipy import special

    from . import families

    y = table.height
    if fit_json.get("engine") == "gamlss":
        mu = np.asarray(fit_json["fitted_mu_conditional"], dtype=float)
        sigma = float(fit_json["sigma"])
        nu = fit_json.get("nu")
        u = families.cdf(fit_json["family"], mu, sigma, nu, y)
        u = np.clip(u, 1e-12, 1 - 1e-12)
        return special.ndtri(u)
    cond = np.asarray(fit_json["fitted_conditional"], dtype=float)
    vc = fit_json["variance_components"]
    a = np.ones(table.n)
    delta = vc.get("delta")
    if delta is not None:
        t = table.time / 1.0
        a = t ** (2.0 * float(delta))
    return (y - cond) / np.sqrt(float(vc["sigma2"]) * a)


def cmd_diagnose(args) -> int:
    t0 = time.perf_counter()
    try:
        fit_json = json.loads(Path(args.fit).read_text())
        table = ingest_csv(args.data)
        if not fit_json.get("converged", False):
            return _fail("fit JSON reports non-convergence", EXIT_NONCONVERGENCE)
        resid = _residuals_from_json(fit_json, table)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        return _fail(f"unreadable inputs: {e}", EXIT_USER)
    except HierfitError as e:
        return _fail(str(e), EXIT_USER)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    try:
        if args.wp_by:
            values = (
                table.time
                if args.wp_by == "time"
                else np.asarray(table.factors[args.wp_by].labels())
                if args.wp_by in table.factors
                else None
            )
            if values is None:
                return _fail(f"unknown covariate {args.wp_by!r}", EXIT_USER)
            panels = worm_panels_by(resid, values, k=args.wp_k, name=args.wp_by)
        else:
            panels = worm_panels_by(resid, np.zeros(len(resid)), k=1)
    except (HierfitError, ValueError) as e:
        return _fail(str(e), EXIT_USER)

    (out_dir / "worm_panels.csv").write_text(worm_panel_csv(panels))
    (out_dir / "worm_panels.svg").write_text(worm_plot_svg(panels))
    outputs += [str(out_dir / "worm_panels.csv"), str(out_dir / "worm_panels.svg")]

    if fit_json.get("engine") == "gamlss":
        fitted_vals = np.asarray(fit_json["fitted_mu_conditional"], dtype=float)
    else:
        fitted_vals = np.asarray(fit_json["fitted_conditional"], dtype=float)
    summary = residual_summary(resid, fitted_vals)
    (out_dir / "residual_summary.json").write_text(
        json.dumps(summary.to_json_dict(), indent=2) + "\n"
    )
    outputs.append(str(out_dir / "residual_summary.json"))

    sw = shapiro_wilk(resid)
    report = {
        "shapiro_wilk": sw.to_json_dict(),
        "worm_flags": {p.label: p.flags for p in panels},
        "worm_coefficients": {p.label: list(p.coefficients) for p in panels},
    }
    (out_dir / "diagnostics.json").write_text(json.dumps(report, indent=2) + "\n")
    outputs.append(str(out_dir / "diagnostics.json"))
    _write_manifest(out_dir, "diagnose", [args.fit, args.data], None, None,
                    outputs, time.perf_counter() - t0)
    print(
        f"Shapiro-Wilk W = {sw.statistic:.4f}, p = {sw.p_value:.4g}; "
        f"{sum(p.any_misfit for p in panels)} of {len(panels)} panels flag misfits"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierfit",
        description="Fit and check multilevel mixed models on nested long-format data.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate synthetic experiments")
    p_sim.add_argument("--config", required=True, help="key=value truth description")
    p_sim.add_argument("--seed", required=True, type=int)
    p_sim.add_argument("--out", required=True, help="output CSV path")
    p_sim.add_argument("--reps", type=int, default=1,
                       help="number of replicate datasets (seeds seed+0..N-1)")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit a model to a CSV dataset")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--model", required=True, help="model description string")
    p_fit.add_argument("--family", choices=["NO", "GG"])
    p_fit.add_argument("--varfunc", help="residual variance function, e.g. power:time")
    p_fit.add_argument("--n-starts", type=int, default=3)
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.set_defaults(func=cmd_fit)

    p_cmp = sub.add_parser("compare", help="likelihood-ratio test between two fits")
    p_cmp.add_argument("--fit0", required=True, help="restricted fit JSON")
    p_cmp.add_argument("--fit1", required=True, help="full fit JSON")
    p_cmp.set_defaults(func=cmd_compare)

    p_dia = sub.add_parser("diagnose", help="residual diagnostics for a fit")
    p_dia.add_argument("--fit", required=True, help="fit JSON from the fit command")
    p_dia.add_argument("--data", required=True)
    p_dia.add_argument("--wp-by", help="covariate to split worm panels by")
    p_dia.add_argument("--wp-k", type=int, default=4)
    p_dia.add_argument("--out", required=True, help="output directory")
    p_dia.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HierfitError as e:
        return _fail(str(e), EXIT_USER)


if __name__ == "__main__":
    sys.exit(main())
