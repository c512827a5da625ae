"""
Predicted and residual log wages under own and reference coefficients,
empirical CDFs and two-sample Kolmogorov-Smirnov comparisons.

Subgroups are keyed by ``(gender, dominance)`` pairs such as
``("fml", "fml-dom")``. The reference subgroup's coefficient vector is
applied to every subgroup's covariates to form counterfactual predictions;
the counterfactual residual is whatever the prediction leaves unexplained.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import kolmogorov

from ._validation import as_design, check_vector
from .estimators import FitResult, ols
from .exceptions import ColumnMismatch, EmptyInput
from .frame import DesignMatrix, FormulaSpec, Frame, build_design

REFERENCE = ("ml", "ml-dom")
SUBGROUPS = (("ml", "ml-dom"), ("ml", "fml-dom"), ("fml", "ml-dom"), ("fml", "fml-dom"))
CDF_TOL = 1e-12


def subgroup_key(sub) -> str:
    """``("fml", "ml-dom")`` -> ``"fml/ml-dom"``; strings pass through."""
    return sub if isinstance(sub, str) else "/".join(sub)


def _exact_residual(y, yhat):
    """Residual ``r`` with ``yhat + r == y`` in floating point where possible.

    ``y - yhat`` already satisfies this whenever ``yhat`` lies within a
    factor of two of ``y``; elsewhere a few ulp nudges usually recover it.
    """
    r = y - yhat
    bad = (yhat + r) != y
    for _ in range(4):
        if not bad.any():
            break
        step = np.where((yhat[bad] + r[bad]) < y[bad], np.inf, -np.inf)
        r[bad] = np.nextafter(r[bad], step)
        bad = (yhat + r) != y
    return r


@dataclass
class WageDecomp:
    """Own-coefficient and counterfactual split of one subgroup's outcome."""

    subgroup: tuple
    y: np.ndarray
    predicted: np.ndarray
    residual: np.ndarray
    counterfactual_predicted: np.ndarray
    counterfactual_residual: np.ndarray

    @property
    def n(self):
        return self.y.shape[0]

    def series(self):
        return {
            "predicted": self.predicted,
            "residual": self.residual,
            "cf_predicted": self.counterfactual_predicted,
            "cf_residual": self.counterfactual_residual,
        }


def _fit_nonzero(y, design):
    """OLS on the non-zero columns; coefficients of all-zero columns are 0."""
    keep = np.any(design.X, axis=0)
    if keep.all():
        return ols(y, design)
    sub = DesignMatrix(design.X[:, keep], [n for n, m in zip(design.column_names, keep) if m],
                       design.has_intercept)
    f = ols(y, sub)
    beta = np.zeros(design.k)
    beta[keep] = f.beta
    vcov = np.zeros((design.k, design.k))
    vcov[np.ix_(keep, keep)] = f.vcov
    return FitResult(beta, vcov, f.residuals, f.fitted, f.n, design.k,
                     list(design.column_names), vcov_kind=f.vcov_kind)


def decompose_wages(subgroups, reference=REFERENCE, fits=None) -> dict:
    """Own and counterfactual predicted/residual wages for each subgroup.

    Parameters
    ----------
    subgroups : mapping
        ``{subgroup_id: (y, X)}`` where every ``X`` has the reference
        subgroup's columns in the same order.
    reference : hashable
        Key of the subgroup whose coefficients define the counterfactual.
    fits : mapping, optional
        Pre-computed :class:`FitResult` per subgroup. Missing entries are
        estimated by OLS; columns that are identically zero in a subgroup
        get a zero coefficient.

    Returns
    -------
    dict
        ``{subgroup_id: WageDecomp}``.

    Raises
    ------
    ColumnMismatch
        A subgroup's columns (or a supplied fit's) differ from the
        reference subgroup's.
    """
    if reference not in subgroups:
        raise KeyError(f"reference subgroup {reference!r} not supplied")
    fits = dict(fits or {})
    designs = {}
    for key, (y, X) in subgroups.items():
        d = as_design(X)
        designs[key] = (check_vector(y, d.n), d)
    ref_names = designs[reference][1].column_names
    for key, (y, d) in designs.items():
        if d.column_names != ref_names:
            raise ColumnMismatch(f"subgroup {key!r} columns {d.column_names} differ from {ref_names}")
        if key in fits:
            if list(fits[key].column_names) != list(ref_names):
                raise ColumnMismatch(f"fit for {key!r} has columns {fits[key].column_names}")
        else:
            fits[key] = _fit_nonzero(y, d)
    beta_ref = fits[reference].beta
    out = {}
    for key, (y, d) in designs.items():
        yhat = d.X @ fits[key].beta
        cf = d.X @ beta_ref
        out[key] = WageDecomp(key, y, yhat, _exact_residual(y, yhat), cf, _exact_residual(y, cf))
    return out


def decompose_frame(frame: Frame, spec: FormulaSpec, gender: str, dominance: str,
                    female_value=1, fd_value=1, reference=REFERENCE) -> dict:
    """Build the four subgroup designs from one formula and decompose.

    The design is expanded once on the whole frame so every subgroup shares
    the reference column set; levels absent from a subgroup become zero
    columns there.
    """
    y, design = build_design(frame, spec)
    rows = design.row_index
    fem = (frame[gender].as_float()[rows] == float(female_value))
    fd = (frame[dominance].as_float()[rows] == float(fd_value))
    groups = {}
    for g_lab, g_mask in (("ml", ~fem), ("fml", fem)):
        for d_lab, d_mask in (("ml-dom", ~fd), ("fml-dom", fd)):
            idx = np.flatnonzero(g_mask & d_mask)
            if idx.size:
                groups[(g_lab, d_lab)] = (y[idx], design.take(idx))
    return decompose_wages(groups, reference)


def write_decomp_csv(decomps, path):
    """Tidy ``(subgroup, kind, value)`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subgroup", "kind", "value"])
        for key in sorted(decomps, key=subgroup_key):
            for kind, vals in decomps[key].series().items():
                for v in vals:
                    w.writerow([subgroup_key(key), kind, repr(float(v))])


# --------------------------------------------------------------------------
# Empirical distributions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CdfSeries:
    """Right-continuous step function: ``F(x) = prob[i]`` for
    ``support[i] <= x < support[i+1]``."""

    support: np.ndarray
    prob: np.ndarray
    n: int

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(self.support, x, side="right")
        return np.where(idx == 0, 0.0, self.prob[np.maximum(idx - 1, 0)])


def _sample(values, name):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput(f"{name} is empty")
    if np.isnan(v).any():
        raise ValueError(f"{name} contains NaN")
    return v


def ecdf(values) -> CdfSeries:
    """Empirical CDF with tied values merged into one jump.

    Raises
    ------
    EmptyInput
    """
    v = np.sort(_sample(values, "values"))
    support, counts = np.unique(v, return_counts=True)
    cum = np.cumsum(counts)
    return CdfSeries(support, cum / v.size, v.size)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n1: int
    n2: int

    def to_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value,
                "n1": self.n1, "n2": self.n2}


def ks_test(a, b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test.

    ``D = max |F_a - F_b|`` is found by one sweep over the merged sorted
    samples, evaluating both step functions after each run of ties. The
    p-value is asymptotic: ``Q_KS(sqrt(n1 n2 / (n1 + n2)) D)``.

    Raises
    ------
    EmptyInput
    """
    x = np.sort(_sample(a, "a"))
    y = np.sort(_sample(b, "b"))
    n1, n2 = x.size, y.size
    pts = np.union1d(x, y)
    # counts at or below each jump point; the division mirrors F = rank / n
    ca = np.searchsorted(x, pts, side="right")
    cb = np.searchsorted(y, pts, side="right")
    D = float(np.max(np.abs(ca / n1 - cb / n2)))
    en = n1 * n2 / (n1 + n2)
    p = float(kolmogorov(np.sqrt(en) * D))
    return KsResult(D, min(max(p, 0.0), 1.0), n1, n2)


def cdf_relation(a, b, tol=CDF_TOL) -> str:
    """Order two samples' CDFs on their merged jump points.

    Returns ``"dominates"`` when ``F_a >= F_b`` everywhere (``a`` lies to
    the left), ``"dominated"`` when ``F_a <= F_b`` everywhere, otherwise
    ``"crosses"``. Differences within ``tol`` count as equal, so identical
    samples return ``"dominates"``.
    """
    Fa = a if isinstance(a, CdfSeries) else ecdf(a)
    Fb = b if isinstance(b, CdfSeries) else ecdf(b)
    pts = np.union1d(Fa.support, Fb.support)
    diff = Fa(pts) - Fb(pts)
    if np.all(diff >= -tol):
        return "dominates"
    if np.all(diff <= tol):
        return "dominated"
    return "crosses"


def ks_table(samples, order=None) -> dict:
    """All pairwise K-S tests between named samples.

    Returns ``{row: {col: KsResult}}`` over ``order`` (default: sorted
    keys), diagonal included.
    """
    keys = list(order) if order is not None else sorted(samples, key=subgroup_key)
    return {r: {c: ks_test(samples[r], samples[c]) for c in keys} for r in keys}


def write_ks_json(table, path):
    """Square K-S table as JSON ``{"rows": [...], "cells": {r: {c: {...}}}}``."""
    keys = list(table)
    doc = {
        "rows": [subgroup_key(k) for k in keys],
        "cells": {subgroup_key(r): {subgroup_key(c): table[r][c].to_dict() for c in table[r]}
                  for r in keys},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
