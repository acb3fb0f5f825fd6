"""Synthetic-experiment generator and replicate harness."""

import time as _time

import numpy as np
import pytest

from hierfit.errors import InvalidSpecError
from hierfit.simulate import (
    DEFAULT_RANDOM,
    FitRecipe,
    TruthSpec,
    replicate_study,
    simulate,
    truth_from_config,
)


class TestSimulate:
    def test_default_layout(self, default_table):
        assert default_table.n == 1280
        assert default_table.factors["plant"].n_levels == 256
        assert sorted(set(default_table.time)) == [30.0, 45.0, 60.0, 75.0, 90.0]

    def test_same_seed_identical(self):
        spec = TruthSpec(
            formula="height ~ time",
            beta={"(Intercept)": [10.0], "time": [0.5]},
            sigma2_plot=2.0, sigma2_subplot=1.0, sigma2_plant=0.5, sigma2=1.0,
            seed=77,
        )
        t1, t2 = simulate(spec), simulate(spec)
        assert t1.to_csv_string() == t2.to_csv_string()
        t3 = simulate(spec, seed=78)
        assert t1.to_csv_string() != t3.to_csv_string()

    def test_degenerate_constant_draw(self):
        spec = TruthSpec(
            formula="height ~ 1",
            beta={"(Intercept)": [100.0]},
            sigma2_plot=0.0, sigma2_subplot=0.0, sigma2_plant=0.0, sigma2=1e-24,
            seed=1,
        )
        tab = simulate(spec)
        assert np.all(np.abs(tab.height - 100.0) < 1e-11)

    def test_invalid_spec(self):
        with pytest.raises(InvalidSpecError):
            TruthSpec(sigma2=-1.0)
        with pytest.raises(InvalidSpecError):
            TruthSpec(n_blocks=0)
        with pytest.raises(InvalidSpecError):
            TruthSpec(family="XX")

    def test_marginal_variance_decomposition(self):
        """Var[height at time t] = sum of level variances + sigma^2 t^{2 delta}."""
        spec = TruthSpec(
            formula="height ~ 1",
            beta={"(Intercept)": [0.0]},
            sigma2_plot=4.0, sigma2_subplot=2.0, sigma2_plant=1.0, sigma2=3.0,
            delta=0.5,
            time_points=(1.0, 4.0),
            seed=0,
        )
        draws = {1.0: [], 4.0: []}
        for rep in range(400):
            tab = simulate(spec, seed=rep)
            for t in (1.0, 4.0):
                draws[t].extend(tab.height[tab.time == t])
        for t in (1.0, 4.0):
            expected = 4.0 + 2.0 + 1.0 + 3.0 * t ** (2 * 0.5)
            got = np.var(np.asarray(draws[t]))
            assert abs(got - expected) / expected < 0.05

    def test_per_level_variance_recovery(self):
        """Group-mean decomposition recovers each level variance within 5%."""
        spec = TruthSpec(
            formula="height ~ 1",
            beta={"(Intercept)": [0.0]},
            sigma2_plot=4.0, sigma2_subplot=2.0, sigma2_plant=1.0, sigma2=0.5,
            time_points=(30.0,),
            seed=0,
        )
        plot_eff, sub_eff, plant_eff, resid = [], [], [], []
        for rep in range(500):
            tab = simulate(spec, seed=10_000 + rep)
            y = tab.height
            pl = tab.factors["plant"].codes
            sp = tab.factors["subplot"].codes
            po = tab.factors["plot"].codes
            pm = np.bincount(pl, weights=y) / np.bincount(pl)
            sm = np.bincount(sp, weights=y) / np.bincount(sp)
            om = np.bincount(po, weights=y) / np.bincount(po)
            resid.extend(y - pm[pl])
            plant_eff.extend(pm - sm[sp[np.unique(pl, return_index=True)[1]]])
            sub_eff.extend(sm - om[po[np.unique(sp, return_index=True)[1]]])
            plot_eff.extend(om)
        # raw contrasts of nested means: Var includes shrinking residual terms
        k = 4  # children per group, 1 observation per plant here
        v_resid = np.var(resid)  # = 0 (one obs per plant) + within correction
        assert np.var(plant_eff) == pytest.approx(1.0 + 0.5 - (1.0 + 0.5) / k, rel=0.2)
        assert np.var(plot_eff) == pytest.approx(
            4.0 + (2.0 + (1.0 + 0.5) / k) / k, rel=0.1)

    def test_gg_family_log_mean_scale(self):
        spec = TruthSpec(
            formula="height ~ 1",
            beta={"(Intercept)": [2.0]},
            sigma2_plot=0.0, sigma2_subplot=0.0, sigma2_plant=0.0, sigma2=0.0,
            family="GG", gg_sigma=0.1, gg_nu=1.0,
            time_points=(30.0,),
            seed=6,
        )
        tab = simulate(spec)
        # linear predictor 2.0 on the log scale -> mean exp(2)
        assert abs(np.mean(tab.height) - np.exp(2.0)) < 4 * 0.1 * np.exp(2.0) / 16


class TestReplicateStudy:
    RECIPE = FitRecipe(model="height ~ time, random = " + DEFAULT_RANDOM, n_starts=1)

    def _spec(self):
        return TruthSpec(
            n_blocks=2,
            n_plants=1,
            time_points=(30.0, 60.0),
            formula="height ~ time",
            beta={"(Intercept)": [10.0], "time": [0.5]},
            sigma2_plot=2.0, sigma2_subplot=1.0, sigma2_plant=0.5, sigma2=1.0,
            seed=42,
        )

    def test_smoke_two_reps_fast(self):
        t0 = _time.perf_counter()
        report = replicate_study(self._spec(), 2, self.RECIPE)
        assert _time.perf_counter() - t0 < 60
        assert report.n_reps == 2
        assert report.n_failed == 0
        names = {p.name for p in report.params}
        assert "beta:time[0]" in names
        assert "sigma2_plot" in names

    def test_identical_seeds_identical_report(self):
        r1 = replicate_study(self._spec(), 2, self.RECIPE)
        r2 = replicate_study(self._spec(), 2, self.RECIPE)
        for p1, p2 in zip(r1.params, r2.params):
            assert p1 == p2

    def test_rejects_single_rep(self):
        with pytest.raises(InvalidSpecError):
            replicate_study(self._spec(), 1, self.RECIPE)


class TestConfigParsing:
    def test_round_trip(self, tmp_path):
        cfg = tmp_path / "truth.cfg"
        cfg.write_text(
            "n_blocks = 2\n"
            "time_points = 30,60\n"
            "formula = height ~ time\n"
            "beta.(Intercept) = 10\n"
            "beta.time = 0.5\n"
            "sigma2_plot = 2\n"
            "sigma2_subplot = 1\n"
            "sigma2_plant = 0.5\n"
            "sigma2 = 1\n"
            "seed = 3\n"
        )
        spec = truth_from_config(cfg)
        assert spec.n_blocks == 2
        assert spec.time_points == (30.0, 60.0)
        assert spec.beta["time"] == [0.5]
        tab = simulate(spec)
        assert tab.n == 2 * 4 * 4 * 4 * 2

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("volume = 3\n")
        with pytest.raises(InvalidSpecError):
            truth_from_config(cfg)

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "bad2.cfg"
        cfg.write_text("sigma2 = lots\n")
        with pytest.raises(InvalidSpecError):
            truth_from_config(cfg)
