"""
Columnar dataset, CSV ingestion and design-matrix construction.

A :class:`Frame` is an immutable ordered collection of typed
:class:`Column` objects. Three kinds are supported:

* ``numeric``: float64 values, missing cells are NaN.
* ``categorical``: integer codes into a tuple of unique level labels,
  missing cells have code -1.
* ``boolean``: 0/1 values stored as int8, missing cells have value -1.

:func:`build_design` turns a frame plus a :class:`FormulaSpec` into a
response vector and a :class:`DesignMatrix`, applying listwise deletion
over every referenced column.
"""
from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    EmptyAfterDeletion,
    IoFailure,
    MissingColumn,
    NonPositiveCpi,
    RankWarning,
    TypeOverflow,
)

KINDS = ("numeric", "categorical", "boolean")

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


class Column:
    """A named, typed column with per-cell missing markers."""

    __slots__ = ("name", "kind", "values", "levels")

    def __init__(self, name, kind, values, levels=None):
        if kind not in KINDS:
            raise ValueError(f"unknown column kind {kind!r}")
        self.name = str(name)
        self.kind = kind
        if kind == "numeric":
            values = np.array(values, dtype=np.float64)
            self.levels = None
        elif kind == "boolean":
            values = np.array(values, dtype=np.int8)
            if np.any((values != 0) & (values != 1) & (values != -1)):
                raise ValueError(f"boolean column {name!r} holds values other than 0/1/-1")
            self.levels = None
        else:
            values = np.array(values, dtype=np.int64)
            levels = tuple(str(lv) for lv in (levels or ()))
            if len(set(levels)) != len(levels):
                raise ValueError(f"duplicate levels in categorical column {name!r}")
            if values.size and (values.min() < -1 or values.max() >= len(levels)):
                raise ValueError(f"categorical codes of {name!r} out of range")
            self.levels = levels
        if values.ndim != 1:
            raise ValueError("column values must be one-dimensional")
        values.setflags(write=False)
        self.values = values

    @classmethod
    def categorical(cls, name, labels, levels=None):
        """Build a categorical column from labels (``None`` = missing).

        Levels default to first-appearance order.
        """
        labels = list(labels)
        if levels is None:
            seen = {}
            for lab in labels:
                if lab is not None and lab not in seen:
                    seen[lab] = len(seen)
            levels = list(seen)
        lookup = {str(lv): i for i, lv in enumerate(levels)}
        codes = []
        for lab in labels:
            if lab is None:
                codes.append(-1)
            else:
                try:
                    codes.append(lookup[str(lab)])
                except KeyError:
                    raise ValueError(f"label {lab!r} not among levels of {name!r}") from None
        return cls(name, "categorical", codes, levels)

    def __len__(self):
        return self.values.shape[0]

    def __repr__(self):
        return f"Column({self.name!r}, {self.kind}, n={len(self)})"

    @property
    def missing(self):
        if self.kind == "numeric":
            return np.isnan(self.values)
        return self.values == -1

    def as_float(self):
        """Numeric view with NaN for missing cells (categorical -> code)."""
        out = self.values.astype(np.float64)
        out[self.missing] = np.nan
        return out

    def labels(self):
        """Cell labels for categorical columns (``None`` where missing)."""
        if self.kind != "categorical":
            raise TypeError(f"column {self.name!r} is not categorical")
        return [None if c < 0 else self.levels[c] for c in self.values]

    def take(self, rows):
        return Column(self.name, self.kind, self.values[rows], self.levels)

    def equals(self, other):
        if self.kind != other.kind or self.name != other.name or self.levels != other.levels:
            return False
        if self.kind == "numeric":
            return np.array_equal(self.values, other.values, equal_nan=True)
        return np.array_equal(self.values, other.values)


class Frame:
    """Immutable ordered mapping of column name to :class:`Column`."""

    def __init__(self, columns: Iterable[Column]):
        cols = {}
        n_rows = None
        for col in columns:
            if col.name in cols:
                raise ValueError(f"duplicate column name {col.name!r}")
            if n_rows is None:
                n_rows = len(col)
            elif len(col) != n_rows:
                raise ValueError(
                    f"column {col.name!r} has {len(col)} rows, expected {n_rows}"
                )
            cols[col.name] = col
        self._columns = MappingProxyType(cols)
        self.n_rows = 0 if n_rows is None else n_rows

    @property
    def columns(self) -> Mapping[str, Column]:
        return self._columns

    @property
    def names(self):
        return list(self._columns)

    def __contains__(self, name):
        return name in self._columns

    def __getitem__(self, name) -> Column:
        try:
            return self._columns[name]
        except KeyError:
            raise MissingColumn(f"column {name!r} not in frame") from None

    def __len__(self):
        return self.n_rows

    def __repr__(self):
        return f"Frame(n_rows={self.n_rows}, columns={self.names})"

    def take(self, rows) -> "Frame":
        rows = np.asarray(rows)
        return Frame(col.take(rows) for col in self._columns.values())

    def filter(self, mask) -> "Frame":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_rows,):
            raise ValueError("mask length does not match frame")
        return self.take(np.flatnonzero(mask))

    def with_column(self, column: Column) -> "Frame":
        cols = [c for name, c in self._columns.items() if name != column.name]
        return Frame([*cols, column])

    def select(self, names: Sequence[str]) -> "Frame":
        return Frame(self[n] for n in names)

    def numeric(self, name):
        return self[name].as_float()

    def equals(self, other):
        return self.names == other.names and all(
            self[n].equals(other[n]) for n in self.names
        )


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _normalize_schema(schema):
    out = {}
    for name, spec in schema.items():
        if isinstance(spec, str):
            kind, levels = spec, None
        else:
            kind, levels = spec["kind"], spec.get("levels")
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r} for column {name!r}")
        out[name] = (kind, levels)
    return out


def _parse_numeric(cell, name):
    cell = cell.strip()
    if not cell:
        return math.nan
    try:
        value = float(cell)
    except ValueError:
        return math.nan
    if math.isinf(value) and cell.lstrip("+-").lower() not in ("inf", "infinity"):
        raise TypeOverflow(f"value {cell!r} in column {name!r} overflows float64")
    return value


def _parse_bool(cell):
    cell = cell.strip().lower()
    if cell in _TRUE:
        return 1
    if cell in _FALSE:
        return 0
    return -1


def read_csv(path, schema) -> Frame:
    """Read an RFC-4180 UTF-8 CSV file into a :class:`Frame`.

    Parameters
    ----------
    path : path-like
        File to read. The header row must contain every schema name;
        extra columns are ignored.
    schema : mapping
        Column name -> kind, where kind is ``"numeric"``, ``"boolean"``,
        ``"categorical"`` or a mapping ``{"kind": ..., "levels": [...]}``.

    Unparseable cells become missing. Categorical levels follow
    first-appearance order unless declared in the schema.
    """
    schema = _normalize_schema(schema)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IoFailure(f"{path}: empty file") from None
            rows = list(reader)
    except FileNotFoundError as exc:
        raise IoFailure(f"{path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise IoFailure(f"{path}: not valid UTF-8") from exc
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc

    index = {name: i for i, name in enumerate(header)}
    missing = [name for name in schema if name not in index]
    if missing:
        raise MissingColumn(f"{path}: header lacks column(s) {missing}")

    columns = []
    for name, (kind, levels) in schema.items():
        j = index[name]
        cells = [row[j] if j < len(row) else "" for row in rows]
        if kind == "numeric":
            columns.append(Column(name, kind, [_parse_numeric(c, name) for c in cells]))
        elif kind == "boolean":
            columns.append(Column(name, kind, [_parse_bool(c) for c in cells]))
        else:
            labels = [c if c != "" else None for c in cells]
            if levels is not None:
                known = set(map(str, levels))
                labels = [lab if lab in known else None for lab in labels]
            columns.append(Column.categorical(name, labels, levels))
    return Frame(columns)


def _format_cell(col, i):
    v = col.values[i]
    if col.kind == "numeric":
        return "" if np.isnan(v) else repr(float(v))
    if v < 0:
        return ""
    if col.kind == "boolean":
        return str(int(v))
    return col.levels[v]


def write_csv(frame: Frame, path) -> None:
    """Write a frame as CSV; floats use shortest round-trip repr."""
    cols = [frame[n] for n in frame.names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(frame.names)
        for i in range(frame.n_rows):
            writer.writerow([_format_cell(c, i) for c in cols])


def schema_of(frame: Frame) -> dict:
    """Schema mapping that lets :func:`read_csv` reproduce ``frame``."""
    out = {}
    for name, col in frame.columns.items():
        if col.kind == "categorical":
            out[name] = {"kind": "categorical", "levels": list(col.levels)}
        else:
            out[name] = col.kind
    return out


def real_wage(nominal, cpi_2015_base):
    """Deflate nominal pay to 2015 prices: ``nominal / (cpi / 100)``."""
    nominal = np.asarray(nominal, dtype=np.float64)
    cpi = np.asarray(cpi_2015_base, dtype=np.float64)
    bad = ~np.isnan(cpi) & (cpi <= 0)
    if np.any(bad):
        raise NonPositiveCpi(f"{int(bad.sum())} CPI value(s) are not positive")
    return nominal / (cpi / 100.0)


# --------------------------------------------------------------------------
# Design matrices
# --------------------------------------------------------------------------

_TERM = re.compile(r"^\s*([^\^\s]+)\s*(?:\^\s*(\d+))?\s*$")


@dataclass(frozen=True)
class FormulaSpec:
    """Regression formula description.

    Parameters
    ----------
    response : str or None
        Name of the outcome column.
    terms : sequence of str
        Main-effect terms. ``"x"`` enters a column as is (categoricals are
        dummy-expanded), ``"x^2"`` adds a power of a numeric column, and
        ``"a:b"`` is shorthand for an interaction.
    interactions : sequence of sequences of str
        Each entry is a tuple of terms whose expanded columns are
        multiplied element-wise.
    intercept : bool
        Prepend a column of ones.
    reference : mapping
        Categorical column -> reference level (default: first level).
    """

    response: str | None
    terms: tuple = ()
    interactions: tuple = ()
    intercept: bool = True
    reference: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        terms, inter = [], [tuple(i) for i in self.interactions]
        for t in self.terms:
            if ":" in t:
                inter.append(tuple(p.strip() for p in t.split(":")))
            else:
                terms.append(t.strip())
        object.__setattr__(self, "terms", tuple(terms))
        object.__setattr__(self, "interactions", tuple(inter))
        object.__setattr__(self, "reference", dict(self.reference))

    @classmethod
    def from_dict(cls, d):
        return cls(
            response=d.get("response"),
            terms=tuple(d.get("terms", ())),
            interactions=tuple(tuple(x) for x in d.get("interactions", ())),
            intercept=bool(d.get("intercept", True)),
            reference=dict(d.get("reference", {})),
        )

    def to_dict(self):
        return {
            "response": self.response,
            "terms": list(self.terms),
            "interactions": [list(x) for x in self.interactions],
            "intercept": self.intercept,
            "reference": dict(self.reference),
        }

    def without(self, names) -> "FormulaSpec":
        """Copy with every term or interaction mentioning ``names`` removed."""
        names = set(names)
        terms = tuple(t for t in self.terms if _parse_term(t)[0] not in names)
        inter = tuple(
            i for i in self.interactions
            if not any(_parse_term(t)[0] in names for t in i)
        )
        return FormulaSpec(self.response, terms, inter, self.intercept, self.reference)

    def with_terms(self, terms=(), interactions=()) -> "FormulaSpec":
        return FormulaSpec(
            self.response,
            self.terms + tuple(terms),
            self.interactions + tuple(tuple(i) for i in interactions),
            self.intercept,
            self.reference,
        )

    def columns(self):
        """Every frame column the formula reads."""
        seen = []
        for t in self.terms + tuple(t for i in self.interactions for t in i):
            name = _parse_term(t)[0]
            if name not in seen:
                seen.append(name)
        if self.response is not None and self.response not in seen:
            seen.insert(0, self.response)
        return seen


def _parse_term(term):
    m = _TERM.match(term)
    if not m:
        raise ValueError(f"cannot parse term {term!r}")
    return m.group(1), int(m.group(2) or 1)


@dataclass
class DesignMatrix:
    """Dense regressor matrix with column names and row bookkeeping.

    ``row_index`` maps each design row back to its frame row; rows with a
    missing cell in any referenced column are absent. ``column_kinds``
    tags each column as ``intercept``, ``numeric``, ``dummy``, ``power`` or
    ``interaction``.
    """

    X: np.ndarray
    column_names: list
    has_intercept: bool = False
    row_index: np.ndarray | None = None
    n_dropped: int = 0
    column_kinds: list | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("design matrix must be two-dimensional")
        self.column_names = list(self.column_names)
        if len(self.column_names) != self.X.shape[1]:
            raise ValueError("column_names length does not match X")
        if self.row_index is None:
            self.row_index = np.arange(self.X.shape[0])
        if self.column_kinds is None:
            self.column_kinds = [
                "intercept" if (i == 0 and self.has_intercept) else
                ("dummy" if _is_binary(self.X[:, i]) else "numeric")
                for i in range(self.X.shape[1])
            ]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    @cached_property
    def rank_deficient(self):
        if self.n < self.k:
            return True
        return int(np.linalg.matrix_rank(self.X)) < self.k

    def take(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows)
        return DesignMatrix(
            self.X[rows], self.column_names, self.has_intercept,
            self.row_index[rows], 0, self.column_kinds,
        )

    def means(self):
        return self.X.mean(axis=0)

    def column(self, name):
        return self.X[:, self.column_names.index(name)]


def _is_binary(x):
    return x.size > 0 and bool(np.all((x == 0) | (x == 1)))


def _expand(frame, term, spec):
    """Expanded (names, matrix, kinds) for one main-effect term."""
    name, power = _parse_term(term)
    col = frame[name]
    if col.kind == "categorical":
        if power != 1:
            raise ValueError(f"power of categorical column {name!r}")
        ref = spec.reference.get(name)
        if ref is None:
            ref_code = 0
        else:
            if ref not in col.levels:
                raise ValueError(f"reference level {ref!r} not a level of {name!r}")
            ref_code = col.levels.index(ref)
        names, mats = [], []
        for code, level in enumerate(col.levels):
            if code == ref_code:
                continue
            names.append(f"{name}={level}")
            mats.append((col.values == code).astype(np.float64))
        return names, mats, ["dummy"] * len(names)
    x = col.values.astype(np.float64)
    if power == 1:
        return [name], [x], ["dummy" if col.kind == "boolean" else "numeric"]
    if col.kind != "numeric":
        raise ValueError(f"power of non-numeric column {name!r}")
    return [f"{name}^{power}"], [x ** power], ["power"]


def build_design(frame: Frame, spec: FormulaSpec):
    """Build ``(y, DesignMatrix)`` from a frame.

    Rows with a missing cell in any referenced column are dropped
    (listwise deletion). ``y`` is ``None`` when ``spec.response`` is.

    Raises
    ------
    MissingColumn
        A referenced column is absent.
    EmptyAfterDeletion
        No complete rows remain.
    """
    for name in spec.columns():
        if name not in frame:
            raise MissingColumn(f"formula references absent column {name!r}")

    keep = np.ones(frame.n_rows, dtype=bool)
    for name in spec.columns():
        keep &= ~frame[name].missing
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise EmptyAfterDeletion("no rows left after listwise deletion")
    sub = frame.take(rows)

    names, mats, kinds = [], [], []
    if spec.intercept:
        names.append("const")
        mats.append(np.ones(rows.size))
        kinds.append("intercept")
    for term in spec.terms:
        n_, m_, k_ = _expand(sub, term, spec)
        names += n_
        mats += m_
        kinds += k_
    for inter in spec.interactions:
        parts = [_expand(sub, t, spec) for t in inter]
        combos = [([], np.ones(rows.size))]
        for p_names, p_mats, _ in parts:
            combos = [
                (cn + [pn], cm * pm)
                for cn, cm in combos
                for pn, pm in zip(p_names, p_mats)
            ]
        for cn, cm in combos:
            names.append(":".join(cn))
            mats.append(cm)
            kinds.append("interaction")

    X = np.column_stack(mats) if mats else np.empty((rows.size, 0))
    design = DesignMatrix(
        X, names, spec.intercept, rows, frame.n_rows - rows.size, kinds
    )
    y = None
    if spec.response is not None:
        y = sub[spec.response].values.astype(np.float64)
    return y, design


def check_rank(design: DesignMatrix) -> bool:
    """Emit :class:`RankWarning` if the design is rank deficient."""
    if design.rank_deficient:
        warnings.warn(
            f"design with columns {design.column_names} is rank deficient",
            RankWarning,
            stacklevel=2,
        )
        return False
    return True
