"""
Three-fold Kitagawa-Blinder-Oaxaca decomposition of a mean outcome gap.

With group means ``xa``, ``xb`` and OLS slopes ``ba``, ``bb``::

    mean(y_a) - mean(y_b) = (xa - xb)'bb  +  xb'(ba - bb)  +  (xa - xb)'(ba - bb)
                            endowment        coefficient      interaction

Group ``b``'s coefficients price the endowment difference. Standard errors
follow the delta method with the two regressions independent and the
covariate means stochastic (``Var(x_bar) = S_x / n``).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_design, check_vector
from .estimators import FitResult, ols
from .exceptions import ColumnMismatch, RankDeficient, StratumSkipped, StratumTooSmall, TooFewRows
from .frame import DesignMatrix, FormulaSpec, Frame, build_design

COMPONENTS = ("endowment", "coefficient", "interaction")


@dataclass
class KboResult:
    """Three-fold decomposition with per-covariate detail.

    ``per_covariate[j]`` holds covariate ``j``'s contribution to the
    endowment, coefficient and interaction effects; ``se_per_covariate``
    has the matching delta-method standard errors.
    """

    overall_gap: float
    endowment: float
    coefficient: float
    interaction: float
    per_covariate: np.ndarray
    se: np.ndarray
    se_per_covariate: np.ndarray
    column_names: list
    n_a: int
    n_b: int
    mean_y_a: float
    mean_y_b: float
    xbar_a: np.ndarray = field(repr=False)
    xbar_b: np.ndarray = field(repr=False)
    fit_a: FitResult = field(repr=False)
    fit_b: FitResult = field(repr=False)
    zero_columns: dict = field(default_factory=dict)
    label: str | None = None

    @property
    def components(self):
        return np.array([self.endowment, self.coefficient, self.interaction])

    @property
    def unexplained(self):
        """Coefficient plus interaction effect (two-fold unexplained part)."""
        return self.coefficient + self.interaction

    def to_dict(self):
        return {
            "label": self.label,
            "overall_gap": self.overall_gap,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "components": {
                c: {"estimate": float(v), "se": float(s)}
                for c, v, s in zip(COMPONENTS, self.components, self.se)
            },
            "per_covariate": [
                {"covariate": name,
                 **{c: float(self.per_covariate[j, i]) for i, c in enumerate(COMPONENTS)},
                 **{f"{c}_se": float(self.se_per_covariate[j, i]) for i, c in enumerate(COMPONENTS)}}
                for j, name in enumerate(self.column_names)
            ],
            "zero_columns": {k: list(v) for k, v in self.zero_columns.items()},
        }

    def rows(self):
        """Tidy ``(component, covariate, estimate, se)`` rows incl. totals."""
        out = []
        for i, comp in enumerate(COMPONENTS):
            for j, name in enumerate(self.column_names):
                out.append((comp, name, float(self.per_covariate[j, i]),
                            float(self.se_per_covariate[j, i])))
            out.append((comp, "total", float(self.components[i]), float(self.se[i])))
        out.append(("overall", "total", float(self.overall_gap), float("nan")))
        return out


def _xbar_cov(X):
    n = X.shape[0]
    if n < 2:
        return np.zeros((X.shape[1], X.shape[1]))
    return np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1]) / n


def kbo_threefold(y_a, X_a, y_b, X_b, vcov_kind="robust_hc1", label=None) -> KboResult:
    """Three-fold decomposition of ``mean(y_a) - mean(y_b)``.

    Parameters
    ----------
    y_a, X_a : group ``a`` outcome and design (the gap's minuend)
    y_b, X_b : group ``b`` outcome and design; its slopes weight the
        endowment effect
    vcov_kind : {"robust_hc1", "classical"}
        Covariance of each group regression.

    Raises
    ------
    ColumnMismatch
        The designs do not have identical columns.
    RankDeficient, TooFewRows
        From either group's OLS fit.
    """
    da, db = as_design(X_a), as_design(X_b)
    if da.column_names != db.column_names:
        raise ColumnMismatch(
            f"design columns differ: {da.column_names} vs {db.column_names}"
        )
    ya = check_vector(y_a, da.n, "y_a")
    yb = check_vector(y_b, db.n, "y_b")
    zero = {}
    for tag, d in (("a", da), ("b", db)):
        z = [nm for j, nm in enumerate(d.column_names) if d.n and not np.any(d.X[:, j])]
        if z:
            zero[tag] = z
    fa = ols(ya, da, vcov_kind)
    fb = ols(yb, db, vcov_kind)

    xa, xb = da.X.mean(axis=0), db.X.mean(axis=0)
    dx = xa - xb
    dbeta = fa.beta - fb.beta
    E = dx * fb.beta
    C = xb * dbeta
    I = dx * dbeta
    per = np.column_stack([E, C, I])

    Sa, Sb = _xbar_cov(da.X), _xbar_cov(db.X)
    Va, Vb = fa.vcov, fb.vcov
    Vab = Va + Vb
    Sab = Sa + Sb
    var_tot = np.array([
        dx @ Vb @ dx + fb.beta @ Sab @ fb.beta,
        xb @ Vab @ xb + dbeta @ Sb @ dbeta,
        dx @ Vab @ dx + dbeta @ Sab @ dbeta,
    ])
    var_cell = np.column_stack([
        dx ** 2 * np.diag(Vb) + fb.beta ** 2 * np.diag(Sab),
        xb ** 2 * np.diag(Vab) + dbeta ** 2 * np.diag(Sb),
        dx ** 2 * np.diag(Vab) + dbeta ** 2 * np.diag(Sab),
    ])
    return KboResult(
        overall_gap=float(ya.mean() - yb.mean()),
        endowment=float(E.sum()),
        coefficient=float(C.sum()),
        interaction=float(I.sum()),
        per_covariate=per,
        se=np.sqrt(np.clip(var_tot, 0, None)),
        se_per_covariate=np.sqrt(np.clip(var_cell, 0, None)),
        column_names=list(da.column_names),
        n_a=da.n, n_b=db.n,
        mean_y_a=float(ya.mean()), mean_y_b=float(yb.mean()),
        xbar_a=xa, xbar_b=xb, fit_a=fa, fit_b=fb,
        zero_columns=zero, label=label,
    )


@dataclass
class TwofoldResult:
    overall_gap: float
    explained: float
    unexplained: float


def kbo_twofold(y_a, X_a, y_b, X_b) -> TwofoldResult:
    """Two-fold split with group ``b`` as the reference coefficient vector."""
    r = kbo_threefold(y_a, X_a, y_b, X_b)
    explained = float((r.xbar_a - r.xbar_b) @ r.fit_b.beta)
    unexplained = float(r.xbar_a @ (r.fit_a.beta - r.fit_b.beta))
    return TwofoldResult(r.overall_gap, explained, unexplained)


def _group_mask(col, value):
    if col.kind == "categorical":
        if str(value) not in col.levels:
            raise ValueError(f"{value!r} is not a level of {col.name!r}")
        return col.values == col.levels.index(str(value))
    return col.as_float() == float(value)


def kbo_by_period(frame: Frame, period: str, group: str, spec: FormulaSpec,
                  group_a=0, within=None) -> list:
    """One three-fold decomposition per level of ``period``.

    Parameters
    ----------
    frame : Frame
    period : str or None
        Column whose distinct values define the strata; ``None`` pools all
        rows into one stratum labelled ``"all"``.
    group : str
        Column identifying the two groups; rows equal to ``group_a`` form
        group ``a`` and all other non-missing rows group ``b``.
    spec : FormulaSpec
        Outcome and regressors, expanded once per stratum so both groups
        share the same columns. Dummy columns that are zero for the whole
        stratum are dropped.
    within : (column, value), optional
        Restrict every stratum to rows where ``column == value`` (for
        example one dominance group).

    Strata where a group has no more rows than regressors, or where a
    group's regression is rank deficient, are skipped with a
    :class:`StratumSkipped` warning.
    """
    gcol = frame[group]
    base = ~gcol.missing
    if within is not None:
        wname, wval = within
        base &= _group_mask(frame[wname], wval)
    if period is None:
        levels = [("all", np.ones(frame.n_rows, dtype=bool))]
    elif (pcol := frame[period]).kind == "categorical":
        levels = sorted(((lab, pcol.values == code) for code, lab in enumerate(pcol.levels)),
                        key=lambda t: t[0])
    else:
        vals = pcol.as_float()
        levels = [(f"{v:g}", vals == v) for v in np.unique(vals[~np.isnan(vals)])]
    in_a_all = _group_mask(gcol, group_a)
    out = []
    for lab, mask in levels:
        rows = np.flatnonzero(base & mask)
        if rows.size == 0:
            continue
        sub = frame.take(rows)
        try:
            y, design = build_design(sub, spec)
            keep_cols = [j for j in range(design.k)
                         if design.column_kinds[j] == "intercept" or np.any(design.X[:, j])]
            design = DesignMatrix(design.X[:, keep_cols],
                                  [design.column_names[j] for j in keep_cols],
                                  design.has_intercept, design.row_index, design.n_dropped,
                                  [design.column_kinds[j] for j in keep_cols])
            in_a = in_a_all[rows][design.row_index]
            ia, ib = np.flatnonzero(in_a), np.flatnonzero(~in_a)
            for tag, idx in (("a", ia), ("b", ib)):
                if idx.size <= design.k:
                    raise StratumTooSmall(
                        f"group {tag} has {idx.size} rows for {design.k} regressors"
                    )
            out.append(kbo_threefold(y[ia], design.take(ia), y[ib], design.take(ib), label=lab))
        except (StratumTooSmall, RankDeficient, TooFewRows) as exc:
            warnings.warn(f"stratum {period}={lab} skipped: {exc}", StratumSkipped, stacklevel=2)
    return out


def write_kbo_csv(results, path):
    """Tidy CSV of ``(period, component, covariate, estimate, se)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "component", "covariate", "estimate", "se"])
        for r in results:
            for comp, cov, est, se in r.rows():
                w.writerow([r.label if r.label is not None else "", comp, cov,
                            repr(est), "" if np.isnan(se) else repr(se)])


class ThreefoldDecomposition(BaseEstimator):
    """Estimator wrapper: ``fit(X, y, group)`` with ``group`` true for group a."""

    def __init__(self, vcov_kind="robust_hc1"):
        self.vcov_kind = vcov_kind

    def fit(self, X, y, group):
        design = as_design(X)
        g = np.asarray(group, dtype=bool)
        y = check_vector(y, design.n)
        ia, ib = np.flatnonzero(g), np.flatnonzero(~g)
        self.result_ = kbo_threefold(y[ia], design.take(ia), y[ib], design.take(ib),
                                     vcov_kind=self.vcov_kind)
        self.components_ = self.result_.components
        return self
