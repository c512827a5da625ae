"""
Propensity-score matching and weighting.

Scores come from a probit fit. :func:`match_att` pairs each treated unit
with its ``k`` nearest controls on the score (with replacement; equal
distances are resolved in favour of the lower control index) after
trimming treated units outside the controls' score range.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator

from ._validation import as_design, check_binary, check_vector
from .estimators import FitResult, probit
from .exceptions import EmptySupport, ExtremeWeights, NoControls
from .frame import DesignMatrix, FormulaSpec, Frame, build_design

SCORE_FLOOR = 1e-12


@dataclass
class PScoreModel:
    """Propensity scores with the probit fit and design that produced them."""

    scores: np.ndarray
    treatment: np.ndarray
    fit: FitResult | None = None
    design: DesignMatrix | None = None

    def __post_init__(self):
        self.scores = np.clip(np.asarray(self.scores, dtype=np.float64),
                              SCORE_FLOOR, 1.0 - SCORE_FLOOR)
        self.treatment = check_binary(check_vector(self.treatment, self.scores.size, "treatment"))

    @property
    def n(self):
        return self.scores.size

    @property
    def row_index(self):
        return None if self.design is None else self.design.row_index


def fit_pscore(treatment, X) -> PScoreModel:
    """Probit propensity model of ``treatment`` on ``X``."""
    design = as_design(X)
    fit = probit(treatment, design)
    return PScoreModel(fit.fitted, treatment, fit, design)


def estimate_pscore(frame: Frame, treatment: str, spec: FormulaSpec) -> PScoreModel:
    """Fit the propensity model ``treatment ~ spec.terms`` on ``frame``.

    Rows with a missing value in the treatment or any covariate are
    dropped; ``model.row_index`` maps scores back to frame rows.
    """
    spec = FormulaSpec(treatment, spec.terms, spec.interactions, spec.intercept, spec.reference)
    D, design = build_design(frame, spec)
    return fit_pscore(D, design)


@dataclass
class MatchResult:
    """Nearest-neighbour ATT with the match structure kept for diagnostics.

    ``matches[i]`` lists the ``k`` control positions (into the full sample)
    matched to ``treated_on_support[i]``; every match carries weight
    ``1/k``.
    """

    att: float
    se_naive: float
    t_stat: float
    mean_treated: float
    mean_control_matched: float
    n_treated_on_support: int
    n_untreated_on_support: int
    n_treated_off_support: int
    k: int
    treated_on_support: np.ndarray = field(repr=False)
    matches: np.ndarray = field(repr=False)
    control_weights: np.ndarray = field(repr=False)

    @property
    def n_treated(self):
        return self.n_treated_on_support + self.n_treated_off_support

    def to_dict(self):
        return {
            "att": self.att,
            "se_naive": self.se_naive,
            "t_stat": self.t_stat,
            "mean_treated": self.mean_treated,
            "mean_control_matched": self.mean_control_matched,
            "n_treated_on_support": self.n_treated_on_support,
            "n_untreated_on_support": self.n_untreated_on_support,
            "n_treated_off_support": self.n_treated_off_support,
            "k": self.k,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _score_blocks(scores, idx):
    """Distinct control scores and, per score, its controls in index order."""
    order = np.lexsort((idx, scores))
    s_sorted = scores[order]
    i_sorted = idx[order]
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s_sorted.size]
    return s_sorted[starts], i_sorted, starts, ends


def _nearest(s, values, members, starts, ends, k, caliper):
    """The ``k`` nearest controls to score ``s``; ties to the lowest index."""
    pos = int(np.searchsorted(values, s))
    left, right = pos - 1, pos
    chosen = []
    nb = values.size
    while len(chosen) < k and (left >= 0 or right < nb):
        dl = s - values[left] if left >= 0 else np.inf
        dr = values[right] - s if right < nb else np.inf
        d = min(dl, dr)
        if caliper is not None and d > caliper:
            break
        if dl == dr:
            pool = np.sort(np.r_[members[starts[left]:ends[left]],
                                 members[starts[right]:ends[right]]])
            left -= 1
            right += 1
        elif dl < dr:
            pool = members[starts[left]:ends[left]]
            left -= 1
        else:
            pool = members[starts[right]:ends[right]]
            right += 1
        chosen.extend(pool[: k - len(chosen)].tolist())
    return chosen


def match_att(ps: PScoreModel, outcome, k=5, common_support=True, caliper=None) -> MatchResult:
    """Average treatment effect on the treated by k-nearest-neighbour matching.

    Parameters
    ----------
    ps : PScoreModel
    outcome : array_like
        Outcome aligned with ``ps.scores``.
    k : int
        Controls per treated unit, drawn with replacement.
    common_support : bool
        Drop treated units whose score lies outside ``[min, max]`` of the
        control scores.
    caliper : float, optional
        Maximum score distance for a match. Treated units with fewer than
        ``k`` controls inside the caliper are counted as off support.

    Returns
    -------
    MatchResult
        ``se_naive`` treats the matches and the scores as fixed.

    Raises
    ------
    NoControls
        No untreated units.
    EmptySupport
        No treated unit is left to match.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    y = check_vector(outcome, ps.n, "outcome")
    D = ps.treatment == 1
    treated = np.flatnonzero(D)
    controls = np.flatnonzero(~D)
    if controls.size == 0:
        raise NoControls("no untreated units to match against")
    if treated.size == 0:
        raise EmptySupport("no treated units")
    p = ps.scores
    pc = p[controls]
    lo, hi = pc.min(), pc.max()
    on = np.ones(treated.size, dtype=bool)
    if common_support:
        on = (p[treated] >= lo) & (p[treated] <= hi)

    values, members, starts, ends = _score_blocks(pc, controls)
    kk = min(k, controls.size)
    match_rows = []
    keep = []
    for i, t in enumerate(treated):
        if not on[i]:
            continue
        chosen = _nearest(p[t], values, members, starts, ends, kk, caliper)
        if len(chosen) < kk:
            # caliper left too few controls
            on[i] = False
            continue
        match_rows.append(chosen)
        keep.append(t)
    if not keep:
        raise EmptySupport("no treated unit has a control on the common support")

    matches = np.array(match_rows, dtype=np.int64).reshape(len(keep), kk)
    t_on = np.array(keep, dtype=np.int64)
    yT = y[t_on]
    y_matched = y[matches].mean(axis=1)
    n_on = t_on.size
    mean_t = float(yT.mean())
    mean_c = float(y_matched.mean())
    att = mean_t - mean_c
    var_t = float(yT.var(ddof=1)) if n_on > 1 else 0.0
    var_c = float(y_matched.var(ddof=1)) if n_on > 1 else 0.0
    se = float(np.sqrt(var_t / n_on + var_c / n_on))
    weights = np.zeros(ps.n)
    np.add.at(weights, matches.ravel(), 1.0 / kk)

    pt_on = p[t_on]
    ctrl_on = int(np.count_nonzero((pc >= pt_on.min()) & (pc <= pt_on.max())))
    return MatchResult(
        att=att,
        se_naive=se,
        t_stat=att / se if se > 0 else float("nan"),
        mean_treated=mean_t,
        mean_control_matched=mean_c,
        n_treated_on_support=int(n_on),
        n_untreated_on_support=ctrl_on,
        n_treated_off_support=int(treated.size - n_on),
        k=kk,
        treated_on_support=t_on,
        matches=matches,
        control_weights=weights,
    )


@dataclass
class IpwResult:
    ate: float
    se: float
    n: int
    max_abs_weight: float

    def to_dict(self):
        return {"ate": self.ate, "se": self.se, "n": self.n,
                "max_abs_weight": self.max_abs_weight}


def ipw_ate(ps: PScoreModel, outcome, weight_limit=100.0) -> IpwResult:
    """Inverse-probability-weighted ATE: ``mean((D - p) / (p (1 - p)) * y)``.

    The standard error is the sample standard deviation of the summand
    over ``sqrt(n)``. Warns with :class:`ExtremeWeights` when any
    ``|(D - p) / (p (1 - p))|`` exceeds ``weight_limit``.
    """
    y = check_vector(outcome, ps.n, "outcome")
    p = ps.scores
    w = (ps.treatment - p) / (p * (1.0 - p))
    wmax = float(np.max(np.abs(w)))
    if wmax > weight_limit:
        warnings.warn(
            f"{int(np.sum(np.abs(w) > weight_limit))} inverse-probability weight(s) exceed "
            f"{weight_limit:g} in absolute value (max {wmax:.3g})",
            ExtremeWeights, stacklevel=2,
        )
    term = w * y
    n = y.size
    se = float(term.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return IpwResult(float(term.mean()), se, int(n), wmax)


@dataclass
class BalanceTable:
    """Standardized bias (percent) of each covariate before and after matching."""

    names: list
    bias_before: np.ndarray
    bias_after: np.ndarray
    threshold: float = 5.0

    @property
    def passed(self):
        return np.abs(self.bias_after) <= self.threshold

    @property
    def all_passed(self):
        return bool(np.all(self.passed))

    def to_rows(self):
        return [
            {"covariate": n, "bias_before": float(b), "bias_after": float(a), "pass": bool(ok)}
            for n, b, a, ok in zip(self.names, self.bias_before, self.bias_after, self.passed)
        ]


def _std_bias(diff, var_t, var_c):
    pooled = np.sqrt((var_t + var_c) / 2.0)
    out = np.zeros_like(diff)
    nz = pooled > 0
    out[nz] = 100.0 * diff[nz] / pooled[nz]
    # constant in both groups: 0 when the means agree, infinite otherwise
    out[~nz & (diff != 0)] = np.inf * np.sign(diff[~nz & (diff != 0)])
    return out


def _weighted_var(X, w):
    sw = w.sum()
    mean = (w @ X) / sw
    ss = w @ (X - mean) ** 2
    return ss / (sw - 1.0) if sw > 1 else np.zeros(X.shape[1])


def balance(ps: PScoreModel, covariates, matches: MatchResult, threshold=5.0) -> BalanceTable:
    """Standardized bias ``100 (mean_T - mean_C) / sqrt((s2_T + s2_C) / 2)``.

    Before matching compares all treated with all controls. After matching
    compares on-support treated units with their matched controls, each
    control weighted by how often it was used. The intercept column, if
    present, is skipped.
    """
    design = as_design(covariates)
    X = design.X
    if X.shape[0] != ps.n:
        raise ValueError("covariates are not aligned with the propensity scores")
    cols = [j for j, kind in enumerate(design.column_kinds) if kind != "intercept"]
    X = X[:, cols]
    names = [design.column_names[j] for j in cols]
    D = ps.treatment == 1
    XT, XC = X[D], X[~D]
    before = _std_bias(XT.mean(axis=0) - XC.mean(axis=0),
                       XT.var(axis=0, ddof=1), XC.var(axis=0, ddof=1))

    t_on = matches.treated_on_support
    XT_on = X[t_on]
    # per-treated differences first, so exact matches give exactly zero
    diff = (XT_on[:, None, :] - X[matches.matches]).mean(axis=1).mean(axis=0)
    used = matches.control_weights > 0
    var_t = XT_on.var(axis=0, ddof=1) if t_on.size > 1 else np.zeros(len(cols))
    var_c = _weighted_var(X[used], matches.control_weights[used])
    after = _std_bias(diff, var_t, var_c)
    return BalanceTable(names, before, after, threshold)


class NearestNeighborMatching(BaseEstimator):
    """Probit propensity score plus k-nearest-neighbour ATT.

    Parameters
    ----------
    k : int
    common_support : bool
    caliper : float or None
    """

    def __init__(self, k=5, common_support=True, caliper=None):
        self.k = k
        self.common_support = common_support
        self.caliper = caliper

    def fit(self, X, treatment, outcome):
        self.pscore_ = fit_pscore(treatment, X)
        self.result_ = match_att(self.pscore_, outcome, self.k, self.common_support, self.caliper)
        self.balance_ = balance(self.pscore_, X, self.result_)
        self.att_ = self.result_.att
        self.se_ = self.result_.se_naive
        return self

    def predict_proba(self, X):
        p = ndtr(as_design(X).X @ self.pscore_.fit.beta)
        return np.column_stack([1 - p, p])
