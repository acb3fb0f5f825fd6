"""Table ingestion, nesting validation, formula grammar and design matrices."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierfit.data import (
    LongTable,
    build_design,
    ingest_csv,
    parse_formula,
    parse_model_spec,
    table_from_columns,
    term_dof,
)
from hierfit.errors import (
    BrokenNestingError,
    EmptyTableError,
    MissingColumnError,
    ModelSpecParseError,
    NonNumericValueError,
    NonPositiveTimeError,
    RankDeficientError,
    UnknownTermError,
)
from hierfit.simulate import DEFAULT_FIXED, DEFAULT_RANDOM

from conftest import columns_from_table


def _basic_columns(n_plots=2, n_sub=2, n_plants=1, times=(30.0, 60.0)):
    cols = {k: [] for k in
            ("block", "plot", "subplot", "plant", "tension", "silicate", "time", "height")}
    h = 0.0
    for b in range(2):
        for p in range(n_plots):
            for s in range(n_sub):
                for pl in range(n_plants):
                    for t in times:
                        cols["block"].append(f"B{b}")
                        cols["plot"].append(f"B{b}-P{p}")
                        cols["subplot"].append(f"B{b}-P{p}-S{s}")
                        cols["plant"].append(f"B{b}-P{p}-S{s}-L{pl}")
                        cols["tension"].append(f"T{p % 2}")
                        cols["silicate"].append(f"S{s % 2}")
                        cols["time"].append(t)
                        cols["height"].append(10.0 + h)
                        h += 0.25
    return cols


class TestIngestion:
    def test_default_layout_counts(self, default_table):
        assert default_table.n == 1280
        assert default_table.factors["plot"].n_levels == 16
        assert default_table.factors["subplot"].n_levels == 64
        assert default_table.factors["plant"].n_levels == 256

    def test_csv_round_trip(self, small_table, tmp_path):
        path = tmp_path / "data.csv"
        small_table.to_csv(path)
        again = ingest_csv(path)
        assert again == small_table

    def test_round_trip_twice_is_stable(self, small_table, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        small_table.to_csv(p1)
        ingest_csv(p1).to_csv(p2)
        assert p1.read_text() == p2.read_text()

    def test_missing_column(self):
        cols = _basic_columns()
        del cols["plant"]
        with pytest.raises(MissingColumnError):
            table_from_columns(cols)

    def test_empty_csv(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("block,plot,subplot,plant,tension,silicate,time,height\n")
        with pytest.raises((EmptyTableError, MissingColumnError)):
            ingest_csv(path)

    def test_broken_nesting(self):
        cols = _basic_columns()
        # same plant label under two different subplots
        cols["plant"][0] = cols["plant"][-1]
        with pytest.raises(BrokenNestingError):
            table_from_columns(cols)

    def test_non_numeric_value(self):
        cols = _basic_columns()
        cols["height"][3] = "tall"
        with pytest.raises(NonNumericValueError):
            table_from_columns(cols)

    def test_nan_rejected(self):
        cols = _basic_columns()
        cols["height"][0] = float("nan")
        with pytest.raises(NonNumericValueError):
            table_from_columns(cols)

    def test_non_positive_time(self):
        cols = _basic_columns()
        cols["time"][0] = 0.0
        with pytest.raises(NonPositiveTimeError):
            table_from_columns(cols)

    def test_level_order_override(self, small_table):
        cols = columns_from_table(small_table)
        order = list(reversed(small_table.factors["tension"].levels))
        t2 = table_from_columns(cols, level_order={"tension": order})
        assert t2.factors["tension"].levels == tuple(order)
        assert t2.factors["tension"].labels() == small_table.factors["tension"].labels()

    def test_schema_remap(self, small_table, tmp_path):
        path = tmp_path / "renamed.csv"
        text = small_table.to_csv_string().replace("height", "altura", 1)
        path.write_text(text)
        again = ingest_csv(path, schema={"height": "altura"})
        assert again == small_table


class TestFormulaGrammar:
    def test_full_fixed_spec_dofs(self, default_table):
        response, terms = parse_formula(DEFAULT_FIXED)
        assert response == "height"
        labels = [t.label for t in terms]
        assert labels == [
            "(Intercept)",
            "block",
            "time",
            "tension",
            "silicate",
            "time:tension",
            "time:silicate",
            "tension:silicate",
            "time:tension:silicate",
            "I(time^2)",
            "I(time^3)",
        ]
        dofs = [term_dof(t, default_table) for t in terms[1:]]
        assert dofs == [3, 1, 3, 3, 3, 3, 9, 9, 1, 1]

    def test_term_dof_examples(self, default_table):
        _, terms = parse_formula("height ~ tension + time + time*tension*silicate")
        by_label = {t.label: t for t in terms}
        assert term_dof(by_label["tension"], default_table) == 3
        assert term_dof(by_label["time"], default_table) == 1
        assert term_dof(by_label["time:tension:silicate"], default_table) == 9

    def test_unknown_variable(self):
        with pytest.raises((ModelSpecParseError, UnknownTermError)):
            parse_formula("height ~ flavour")

    def test_random_prefix_expansion(self):
        spec = parse_model_spec("height ~ time, random = " + DEFAULT_RANDOM)
        assert [lvl[-1] for lvl in spec.random_levels] == ["plot", "subplot", "plant"]

    def test_varfunc_requires_normal_family(self):
        with pytest.raises(ModelSpecParseError):
            parse_model_spec(
                "height ~ time, random = block/plot, family = GG, varfunc = power(time)"
            )

    def test_family_parsed(self):
        spec = parse_model_spec("height ~ time, family = GG")
        assert spec.family == "GG"
        assert parse_model_spec("height ~ time").family == "NO"


class TestDesignMatrices:
    def test_intercept_plus_block_columns(self, small_table):
        spec = parse_model_spec("height ~ block")
        d = build_design(small_table, spec)
        assert d.X.shape[1] == 1 + (small_table.factors["block"].n_levels - 1)

    def test_interaction_owns_nine_columns(self, default_table):
        spec = parse_model_spec("height ~ tension + silicate + tension*silicate")
        d = build_design(default_table, spec)
        lo, hi = d.column_map["tension:silicate"]
        assert hi - lo == 9

    def test_column_map_partitions(self, default_table):
        spec = parse_model_spec(DEFAULT_FIXED)
        d = build_design(default_table, spec)
        covered = []
        for lo, hi in d.column_map.values():
            covered.extend(range(lo, hi))
        assert sorted(covered) == list(range(d.X.shape[1]))

    def test_z_row_sums_are_one(self, small_table):
        spec = parse_model_spec("height ~ time, random = " + DEFAULT_RANDOM)
        d = build_design(small_table, spec)
        for Z in d.Z_list:
            assert np.array_equal(Z.sum(axis=1), np.ones(small_table.n))
            assert set(np.unique(Z)) <= {0.0, 1.0}

    def test_duplicate_terms_collapse(self, small_table):
        # repeated terms collapse to one occurrence (standard formula rule)
        spec = parse_model_spec("height ~ block + block")
        d = build_design(small_table, spec)
        assert list(d.column_map) == ["(Intercept)", "block"]

    def test_rank_deficiency_detected(self, small_table):
        # silicate is aliased with subplot position here only if constant;
        # instead build an explicit aliasing: time + time is caught by the
        # parser, so check a numerically rank-deficient design directly
        spec = parse_model_spec("height ~ time + I(time^2) + I(time^3)")
        # collapse time to a single value -> polynomial terms all constant
        cols = columns_from_table(small_table)
        cols["time"] = [45.0] * small_table.n
        flat = table_from_columns(cols)
        with pytest.raises(RankDeficientError):
            build_design(flat, spec)

    def test_beta_scale_round_trip(self, small_table):
        spec = parse_model_spec("height ~ time + I(time^2)")
        d = build_design(small_table, spec)
        rng = np.random.default_rng(0)
        b = rng.standard_normal(d.X.shape[1])
        assert np.allclose(d.beta_scaled(d.beta_raw(b)), b, rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=-5, max_value=5, allow_nan=False))
    def test_raw_scale_linear_predictor_invariance(self, small_table, coef):
        """The raw/scaled coefficient maps leave X·beta unchanged."""
        spec = parse_model_spec("height ~ time")
        d = build_design(small_table, spec)
        b_scaled = np.array([1.0, coef])
        eta = d.X @ b_scaled
        b_raw = d.beta_raw(b_scaled)
        raw_X = np.column_stack([np.ones(small_table.n), small_table.time])
        assert np.allclose(raw_X @ b_raw, eta, atol=1e-8)
