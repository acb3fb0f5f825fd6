"""Observation table, model-term grammar and design-matrix construction.

The observation table is a nested split-plot layout: blocks contain plots,
plots contain subplots, subplots contain measured plants, and each plant is
measured at several times.  Group labels must be globally unique (a plot
label may not reappear under a second block); nesting is validated on
ingestion and violations raise :class:`BrokenNestingError`.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BrokenNestingError,
    EmptyTableError,
    MissingColumnError,
    ModelSpecParseError,
    NonNumericValueError,
    NonPositiveTimeError,
    RankDeficientError,
    UnknownTermError,
)

FACTOR_COLUMNS = ("block", "plot", "subplot", "plant", "tension", "silicate")
COVARIATE_COLUMNS = ("time",)
RESPONSE_COLUMN = "height"
ALL_COLUMNS = FACTOR_COLUMNS + COVARIATE_COLUMNS + (RESPONSE_COLUMN,)

NESTING_CHAIN = ("block", "plot", "subplot", "plant")


# ---------------------------------------------------------------------------
# LongTable
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Factor:
    """Integer-coded factor column with labels in first-appearance order."""

    levels: tuple[str, ...]
    codes: np.ndarray  # int codes into levels

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def labels(self) -> list[str]:
        return [self.levels[c] for c in self.codes]

    def __eq__(self, other):
        return (
            isinstance(other, Factor)
            and self.levels == other.levels
            and np.array_equal(self.codes, other.codes)
        )


class LongTable:
    """Validated tidy observation table for the nested growth experiment."""

    def __init__(self, factors: dict[str, Factor], time: np.ndarray, height: np.ndarray):
        self.factors = factors
        self.time = np.asarray(time, dtype=float)
        self.height = np.asarray(height, dtype=float)
        self._validate()

    @property
    def n(self) -> int:
        return self.height.shape[0]

    def factor(self, name: str) -> Factor:
        if name not in self.factors:
            raise UnknownTermError(f"unknown factor {name!r}")
        return self.factors[name]

    def covariate(self, name: str) -> np.ndarray:
        if name == "time":
            return self.time
        raise UnknownTermError(f"unknown covariate {name!r}")

    def n_groups(self, name: str) -> int:
        return self.factor(name).n_levels

    def _validate(self):
        n = self.height.shape[0]
        if n == 0:
            raise EmptyTableError("table has no rows")
        for name in FACTOR_COLUMNS:
            if name not in self.factors:
                raise MissingColumnError(f"missing factor column {name!r}")
            if self.factors[name].codes.shape[0] != n:
                raise MissingColumnError(f"column {name!r} has wrong length")
        if self.time.shape[0] != n:
            raise MissingColumnError("column 'time' has wrong length")
        if not np.all(np.isfinite(self.time)):
            raise NonNumericValueError("non-finite value in 'time'")
        if not np.all(np.isfinite(self.height)):
            raise NonNumericValueError("non-finite value in 'height'")
        if np.any(self.time <= 0):
            raise NonPositiveTimeError("'time' must be strictly positive")
        for child, parent in zip(NESTING_CHAIN[1:], NESTING_CHAIN[:-1]):
            self._check_nested(child, parent)

    def _check_nested(self, child: str, parent: str):
        cf, pf = self.factors[child], self.factors[parent]
        seen: dict[int, int] = {}
        for c, p in zip(cf.codes.tolist(), pf.codes.tolist()):
            if seen.setdefault(c, p) != p:
                raise BrokenNestingError(
                    f"{child} {cf.levels[c]!r} appears under both "
                    f"{parent} {pf.levels[seen[c]]!r} and {pf.levels[p]!r}"
                )

    def __eq__(self, other):
        return (
            isinstance(other, LongTable)
            and self.factors == other.factors
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.height, other.height)
        )

    # --- CSV I/O -----------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self._write(fh)

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self._write(buf)
        return buf.getvalue()

    def _write(self, fh):
        w = csv.writer(fh)
        w.writerow(ALL_COLUMNS)
        cols = [self.factors[f].labels() for f in FACTOR_COLUMNS]
        for i in range(self.n):
            w.writerow(
                [c[i] for c in cols] + [repr(float(self.time[i])), repr(float(self.height[i]))]
            )


def _encode(labels: list[str], order: list[str] | None = None) -> Factor:
    if order is None:
        levels: list[str] = []
        index: dict[str, int] = {}
        codes = np.empty(len(labels), dtype=np.int64)
        for i, lab in enumerate(labels):
            if lab not in index:
                index[lab] = len(levels)
                levels.append(lab)
            codes[i] = index[lab]
        return Factor(tuple(levels), codes)
    index = {lab: i for i, lab in enumerate(order)}
    try:
        codes = np.array([index[lab] for lab in labels], dtype=np.int64)
    except KeyError as e:
        raise NonNumericValueError(f"label {e.args[0]!r} not in declared level order") from None
    return Factor(tuple(order), codes)


def table_from_columns(
    columns: dict[str, list], level_order: dict[str, list[str]] | None = None
) -> LongTable:
    """Build a LongTable from raw string/float columns keyed by logical name."""
    level_order = level_order or {}
    for name in ALL_COLUMNS:
        if name not in columns:
            raise MissingColumnError(f"missing column {name!r}")
    factors = {
        name: _encode([str(v) for v in columns[name]], level_order.get(name))
        for name in FACTOR_COLUMNS
    }

    def _floats(name):
        out = np.empty(len(columns[name]))
        for i, v in enumerate(columns[name]):
            try:
                out[i] = float(v)
            except (TypeError, ValueError):
                raise NonNumericValueError(f"non-numeric value {v!r} in column {name!r}") from None
        return out

    return LongTable(factors, _floats("time"), _floats(RESPONSE_COLUMN))


def ingest_csv(
    path,
    schema: dict[str, str] | None = None,
    level_order: dict[str, list[str]] | None = None,
) -> LongTable:
    """Read and validate a CSV file.

    ``schema`` remaps logical column names to the file's header names,
    e.g. ``{"height": "altura"}``.  Unmapped names are used verbatim.
    """
    schema = schema or {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyTableError(f"{path}: empty file") from None
        header_idx = {h.strip(): i for i, h in enumerate(header)}
        idx = {}
        for logical in ALL_COLUMNS:
            actual = schema.get(logical, logical)
            if actual not in header_idx:
                raise MissingColumnError(f"{path}: column {actual!r} not found in header")
            idx[logical] = header_idx[actual]
        columns: dict[str, list] = {name: [] for name in ALL_COLUMNS}
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            for logical, j in idx.items():
                if j >= len(row):
                    raise NonNumericValueError(f"{path}: short row {row!r}")
                columns[logical].append(row[j].strip())
    if not columns[RESPONSE_COLUMN]:
        raise EmptyTableError(f"{path}: no data rows")
    return table_from_columns(columns, level_order)


# ---------------------------------------------------------------------------
# Terms and model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Term:
    """A fixed-effect model term: product of factors and covariate powers."""

    factors: tuple[str, ...] = ()
    covariates: tuple[tuple[str, int], ...] = ()  # (name, power)

    @property
    def is_intercept(self) -> bool:
        return not self.factors and not self.covariates

    @property
    def label(self) -> str:
        if self.is_intercept:
            return "(Intercept)"
        parts = []
        for name, power in self.covariates:
            parts.append(name if power == 1 else f"I({name}^{power})")
        parts.extend(self.factors)
        return ":".join(parts)

    def __str__(self) -> str:
        return self.label


INTERCEPT = Term()


def term_dof(term: Term, table: LongTable) -> int:
    """Numerator degrees of freedom of a term under treatment contrasts."""
    dof = 1
    for f in term.factors:
        dof *= table.factor(f).n_levels - 1
    for name, _ in term.covariates:
        table.covariate(name)  # existence check
    return dof


@dataclass
class ModelSpec:
    """Declarative model description.

    ``random_levels`` are full grouping paths, outermost first, e.g.
    ``[("block", "plot"), ("block", "plot", "subplot")]``; the last path
    component is the grouping factor for that level.
    """

    response: str
    fixed_terms: list[Term]
    random_levels: list[tuple[str, ...]]
    family: str = "NO"  # "NO" | "GG"
    variance_function: tuple[str, str] | None = None  # ("power", covariate)

    def __post_init__(self):
        if not self.fixed_terms or not self.fixed_terms[0].is_intercept:
            self.fixed_terms = [INTERCEPT] + [t for t in self.fixed_terms if not t.is_intercept]
        if self.family not in ("NO", "GG"):
            raise ModelSpecParseError(f"unknown family {self.family!r}")
        if self.variance_function is not None and self.family != "NO":
            raise ModelSpecParseError("variance_function is only valid with family NO")
        for earlier, later in zip(self.random_levels, self.random_levels[1:]):
            if later[: len(earlier)] != earlier:
                raise ModelSpecParseError(
                    f"random levels must be nested in listing order: {earlier} vs {later}"
                )

    @property
    def level_names(self) -> list[str]:
        return [path[-1] for path in self.random_levels]


_I_RE = re.compile(r"^I\(\s*(\w+)\s*\^\s*(\d+)\s*\)$")


def _component_term(name: str) -> Term:
    m = _I_RE.match(name)
    if m:
        return Term(covariates=((m.group(1), int(m.group(2))),))
    if name in COVARIATE_COLUMNS:
        return Term(covariates=((name, 1),))
    if name in FACTOR_COLUMNS:
        return Term(factors=(name,))
    raise ModelSpecParseError(f"unknown variable {name!r} in formula")


def _combine(components: list[Term]) -> Term:
    factors: list[str] = []
    powers: dict[str, int] = {}
    order: list[str] = []
    for t in components:
        for f in t.factors:
            if f in factors:
                raise ModelSpecParseError(f"factor {f!r} repeated within one term")
            factors.append(f)
        for name, p in t.covariates:
            if name not in powers:
                powers[name] = 0
                order.append(name)
            powers[name] += p
    return Term(tuple(factors), tuple((name, powers[name]) for name in order))


def _expand_star(chunk: str) -> list[Term]:
    names = [s.strip() for s in chunk.split("*")]
    comps = [_component_term(n) for n in names]
    terms: list[Term] = []
    m = len(comps)
    for size in range(1, m + 1):
        for mask in range(1, 1 << m):
            picked = [comps[i] for i in range(m) if mask >> i & 1]
            if len(picked) == size:
                terms.append(_combine(picked))
    return terms


def parse_formula(formula: str) -> tuple[str, list[Term]]:
    """Parse ``response ~ term + term + ...`` into (response, ordered terms)."""
    if "~" not in formula:
        raise ModelSpecParseError(f"formula {formula!r} lacks '~'")
    lhs, rhs = formula.split("~", 1)
    response = lhs.strip()
    if response != RESPONSE_COLUMN:
        raise ModelSpecParseError(f"unknown response {response!r}")
    terms: list[Term] = [INTERCEPT]
    for chunk in rhs.split("+"):
        chunk = chunk.strip()
        if not chunk:
            raise ModelSpecParseError("empty term in formula")
        if chunk == "1":
            continue
        if "*" in chunk:
            new = _expand_star(chunk)
        else:
            new = [_combine([_component_term(c.strip()) for c in chunk.split(":")])]
        for t in new:
            if t not in terms:
                terms.append(t)
    return response, terms


def parse_random(path: str) -> list[tuple[str, ...]]:
    """Expand a grouping path ``a/b/c`` into nested random levels.

    A path of one component defines a single level.  For longer paths the
    first component is the top stratum and every deeper prefix gets a
    scalar random intercept, so ``block/plot/subplot/plant`` yields the
    plot, subplot and plant levels.
    """
    names = [s.strip() for s in path.split("/")]
    for n in names:
        if n not in FACTOR_COLUMNS:
            raise ModelSpecParseError(f"unknown grouping factor {n!r}")
    if len(names) == 1:
        return [tuple(names)]
    return [tuple(names[: k + 1]) for k in range(1, len(names))]


def parse_model_spec(text: str) -> ModelSpec:
    """Parse the full model grammar.

    Example::

        height ~ block + time*tension*silicate + I(time^2) + I(time^3),
        random = block/plot/subplot/plant, family = NO, varfunc = power(time)
    """
    segments = [s.strip() for s in text.split(",") if s.strip()]
    if not segments:
        raise ModelSpecParseError("empty model specification")
    response, terms = parse_formula(segments[0])
    random_levels: list[tuple[str, ...]] = []
    family = "NO"
    varfunc: tuple[str, str] | None = None
    for seg in segments[1:]:
        if "=" not in seg:
            raise ModelSpecParseError(f"expected key = value, got {seg!r}")
        key, value = (s.strip() for s in seg.split("=", 1))
        if key == "random":
            random_levels = parse_random(value)
        elif key == "family":
            if value not in ("NO", "GG"):
                raise ModelSpecParseError(f"unknown family {value!r}")
            family = value
        elif key == "varfunc":
            if value.lower() in ("none", ""):
                varfunc = None
            else:
                m = re.match(r"^power\(\s*(\w+)\s*\)$", value)
                if not m:
                    raise ModelSpecParseError(f"unknown variance function {value!r}")
                varfunc = ("power", m.group(1))
        else:
            raise ModelSpecParseError(f"unknown key {key!r}")
    return ModelSpec(response, terms, random_levels, family, varfunc)


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------


@dataclass
class DesignMatrices:
    """Fixed- and random-effect design matrices for one model spec.

    ``X`` uses scaled covariates (each covariate divided by its mean, powers
    taken afterwards), so ``X[:, j] = X_raw[:, j] * col_scale[j]`` and
    ``beta_raw = beta_scaled * col_scale``.
    """

    X: np.ndarray
    terms: list[Term]
    column_map: dict[str, tuple[int, int]]  # term label -> [lo, hi)
    col_scale: np.ndarray
    covariate_scale: dict[str, float]
    level_names: list[str]
    level_codes: list[np.ndarray]
    level_sizes: list[int]
    y: np.ndarray = field(repr=False, default=None)
    time: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def Z_list(self) -> list[np.ndarray]:
        out = []
        for codes, m in zip(self.level_codes, self.level_sizes):
            Z = np.zeros((len(codes), m))
            Z[np.arange(len(codes)), codes] = 1.0
            out.append(Z)
        return out

    def beta_raw(self, beta_scaled: np.ndarray) -> np.ndarray:
        return beta_scaled * self.col_scale

    def beta_scaled(self, beta_raw: np.ndarray) -> np.ndarray:
        return beta_raw / self.col_scale


def _term_columns(term: Term, table: LongTable, scales: dict[str, float]):
    """Columns and per-column raw-scale factors for one term."""
    n = table.n
    cols = [np.ones(n)]
    factors = [1.0]
    for name, power in term.covariates:
        s = scales[name]
        v = (table.covariate(name) / s) ** power
        cols = [c * v for c in cols]
        factors = [f / s**power for f in factors]
    for fname in term.factors:
        fac = table.factor(fname)
        new_cols, new_factors = [], []
        for c, f in zip(cols, factors):
            for level in range(1, fac.n_levels):  # treatment contrasts
                new_cols.append(c * (fac.codes == level).astype(float))
                new_factors.append(f)
        cols, factors = new_cols, new_factors
    return cols, factors


def build_design(table: LongTable, spec: ModelSpec) -> DesignMatrices:
    """Construct X, the per-level grouping codes and the column map."""
    scales = {name: float(np.mean(table.covariate(name))) for name in COVARIATE_COLUMNS}
    columns: list[np.ndarray] = []
    col_scale: list[float] = []
    column_map: dict[str, tuple[int, int]] = {}
    for term in spec.fixed_terms:
        cols, factors = _term_columns(term, table, scales)
        lo = len(columns)
        columns.extend(cols)
        col_scale.extend(factors)
        column_map[term.label] = (lo, len(columns))
    X = np.column_stack(columns)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError(
            f"design matrix is rank deficient ({X.shape[1]} columns, "
            f"rank {np.linalg.matrix_rank(X)})"
        )

    level_names, level_codes, level_sizes = [], [], []
    for path in spec.random_levels:
        fac = table.factor(path[-1])
        level_names.append(path[-1])
        level_codes.append(fac.codes)
        level_sizes.append(fac.n_levels)

    return DesignMatrices(
        X=X,
        terms=list(spec.fixed_terms),
        column_map=column_map,
        col_scale=np.array(col_scale),
        covariate_scale=scales,
        level_names=level_names,
        level_codes=level_codes,
        level_sizes=level_sizes,
        y=table.height.copy(),
        time=table.time.copy(),
    )
