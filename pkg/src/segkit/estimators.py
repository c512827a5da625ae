"""
Least squares, probit and lasso estimators.

Functional entry points (:func:`ols`, :func:`probit`, :func:`probit_ame`,
:func:`lasso_bic`) return plain result containers. The estimator classes
at the bottom wrap them behind the scikit-learn ``fit``/``predict``
protocol so they compose with pipelines and ``get_params``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtr
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_design, check_binary, check_vector, intercept_index
from .exceptions import (
    DegenerateColumn,
    MaxIterations,
    NoVariationInY,
    PerfectSeparation,
    RankDeficient,
    TooFewRows,
)
from .frame import DesignMatrix

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class FitResult:
    """Coefficients, covariance and residuals from an OLS/probit/lasso fit."""

    beta: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    n: int
    k: int
    column_names: list
    loglik: float | None = None
    vcov_kind: str = "classical"
    n_iter: int | None = None
    loglik_trace: list | None = None

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def tstat(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.beta / self.se

    def coef(self, name):
        return float(self.beta[self.column_names.index(name)])

    def predict(self, X):
        X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)
        return X @ self.beta

    def to_dict(self, include_vcov=False):
        out = {
            "names": list(self.column_names),
            "beta": [float(b) for b in self.beta],
            "se": [float(s) for s in self.se],
            "n": int(self.n),
            "k": int(self.k),
            "vcov_kind": self.vcov_kind,
        }
        if self.loglik is not None:
            out["loglik"] = float(self.loglik)
        if include_vcov:
            out["vcov"] = [[float(v) for v in row] for row in self.vcov]
        return out

    def to_json(self, include_vcov=False):
        return json.dumps(self.to_dict(include_vcov), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        k = d["k"]
        vcov = np.asarray(d["vcov"]) if "vcov" in d else np.diag(np.square(d["se"]))
        return cls(
            beta=np.asarray(d["beta"], dtype=np.float64),
            vcov=vcov,
            residuals=np.empty(0),
            fitted=np.empty(0),
            n=d["n"],
            k=k,
            column_names=list(d["names"]),
            loglik=d.get("loglik"),
            vcov_kind=d.get("vcov_kind", "classical"),
        )


# --------------------------------------------------------------------------
# OLS
# --------------------------------------------------------------------------

def _pivoted_qr(X, names):
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        dependent = sorted(piv[rank:])
        raise RankDeficient(
            "design is rank deficient; dependent column(s): "
            + ", ".join(names[j] for j in dependent),
            [names[j] for j in dependent],
        )
    return Q, R, piv


def hc1_vcov(X, residuals, bread=None):
    """HC1 sandwich: ``n/(n-k) (X'X)^-1 X' diag(e^2) X (X'X)^-1``."""
    n, k = X.shape
    if bread is None:
        bread = np.linalg.inv(X.T @ X)
    Xe = X * residuals[:, None]
    meat = Xe.T @ Xe
    V = bread @ meat @ bread
    V = V * (n / (n - k))
    return 0.5 * (V + V.T)


def ols(y, X, vcov_kind="robust_hc1") -> FitResult:
    """Ordinary least squares via a column-pivoted QR decomposition.

    Parameters
    ----------
    y : array_like, shape (n,)
    X : DesignMatrix or array_like, shape (n, k)
    vcov_kind : {"robust_hc1", "classical"}

    Raises
    ------
    TooFewRows
        ``n <= k``.
    RankDeficient
        ``X`` lacks full column rank; the exception lists the dependent
        columns.
    """
    if vcov_kind not in ("robust_hc1", "classical"):
        raise ValueError(f"unknown vcov_kind {vcov_kind!r}")
    design = as_design(X)
    Xm = design.X
    n, k = Xm.shape
    y = check_vector(y, n)
    if n <= k:
        raise TooFewRows(f"need more rows than columns (n={n}, k={k})")
    Q, R, piv = _pivoted_qr(Xm, design.column_names)
    beta_p = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = beta_p
    fitted = Xm @ beta
    resid = y - fitted

    Rinv = linalg.solve_triangular(R, np.eye(k))
    bread_p = Rinv @ Rinv.T
    bread = np.empty_like(bread_p)
    bread[np.ix_(piv, piv)] = bread_p
    if vcov_kind == "classical":
        s2 = resid @ resid / (n - k)
        vcov = s2 * bread
    else:
        vcov = hc1_vcov(Xm, resid, bread)
    return FitResult(beta, vcov, resid, fitted, n, k, list(design.column_names),
                     vcov_kind=vcov_kind)


# --------------------------------------------------------------------------
# Probit
# --------------------------------------------------------------------------

def _mills(q, z):
    # q * phi(z) / Phi(q z), evaluated in log space
    return q * np.exp(-0.5 * z * z - _LOG_SQRT_2PI - log_ndtr(q * z))


def probit_loglik(beta, y, X):
    z = X @ beta
    return float(np.sum(log_ndtr((2.0 * y - 1.0) * z)))


def probit_score(beta, y, X):
    z = X @ beta
    return X.T @ _mills(2.0 * y - 1.0, z)


def probit_hessian(beta, y, X):
    z = X @ beta
    lam = _mills(2.0 * y - 1.0, z)
    w = lam * (lam + z)
    return -(X * w[:, None]).T @ X


def probit(y, X, max_iter=100, tol_score=1e-8, tol_loglik=1e-12) -> FitResult:
    """Probit maximum likelihood by Newton-Raphson with step halving.

    Iterates until ``max|score| < tol_score`` and the relative change in
    the log-likelihood is below ``tol_loglik``. The covariance is the
    inverse observed information.

    Raises
    ------
    NoVariationInY
        Only one outcome class present.
    PerfectSeparation
        The linear index diverges (some ``|x'b| > 30`` and growing over
        three consecutive iterations while the likelihood still rises).
    MaxIterations
        No convergence after ``max_iter`` Newton steps.
    """
    design = as_design(X)
    Xm = design.X
    n, k = Xm.shape
    y = check_binary(check_vector(y, n))
    if y.min() == y.max():
        raise NoVariationInY("outcome has a single class")
    if n <= k:
        raise TooFewRows(f"need more rows than columns (n={n}, k={k})")
    _pivoted_qr(Xm, design.column_names)

    beta = np.zeros(k)
    ll = probit_loglik(beta, y, Xm)
    trace = [ll]
    growth = 0
    prev_zmax = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = probit_score(beta, y, Xm)
        H = probit_hessian(beta, y, Xm)
        try:
            step = linalg.solve(-H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_new = probit_loglik(cand, y, Xm)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            # no ascent left at machine precision
            if prev_zmax > 30:
                raise PerfectSeparation(
                    "linear index diverges; outcome is (quasi-)perfectly separated"
                )
            if np.max(np.abs(g)) < 1e-6 * max(1.0, n):
                converged = True
                break
            raise MaxIterations("step halving failed to increase the log-likelihood")
        if t == 1.0:
            # keep doubling while the likelihood still rises past the Newton
            # point; inert near an interior optimum, geometric under separation
            for _ in range(50):
                cand2 = beta + 2.0 * t * step
                ll2 = probit_loglik(cand2, y, Xm)
                if not ll2 > ll_new:
                    break
                t, cand, ll_new = 2.0 * t, cand2, ll2
        rel = abs(ll_new - ll) / max(abs(ll_new), 1e-300)
        beta, ll = cand, ll_new
        trace.append(ll)

        zmax = float(np.max(np.abs(Xm @ beta)))
        growth = growth + 1 if zmax > prev_zmax else 0
        prev_zmax = zmax
        if zmax > 30 and growth >= 3:
            raise PerfectSeparation(
                "linear index diverges; outcome is (quasi-)perfectly separated"
            )

        g = probit_score(beta, y, Xm)
        if np.max(np.abs(g)) < tol_score and rel < tol_loglik:
            converged = True
            break
        if np.max(np.abs(t * step)) < 1e-15 * (1.0 + np.max(np.abs(beta))):
            # Newton step below floating resolution
            converged = True
            break
    if converged and prev_zmax > 30:
        # the score vanished only because fitted probabilities hit 0 or 1
        raise PerfectSeparation(
            "linear index diverges; outcome is (quasi-)perfectly separated"
        )
    if not converged:
        raise MaxIterations(f"probit did not converge in {max_iter} iterations")

    H = probit_hessian(beta, y, Xm)
    try:
        vcov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        raise PerfectSeparation("information matrix is singular at the optimum") from None
    vcov = 0.5 * (vcov + vcov.T)
    fitted = ndtr(Xm @ beta)
    return FitResult(beta, vcov, y - fitted, fitted, n, k,
                     list(design.column_names), loglik=ll,
                     vcov_kind="observed_information", n_iter=it,
                     loglik_trace=trace)


@dataclass
class ProbitMarginals:
    """Average marginal effects with delta-method standard errors."""

    ame: np.ndarray
    se: np.ndarray
    column_names: list
    discrete: np.ndarray = field(default=None)

    def to_dict(self):
        return {
            name: {"ame": float(a), "se": float(s)}
            for name, a, s in zip(self.column_names, self.ame, self.se)
        }


def probit_ame(fit: FitResult, X) -> ProbitMarginals:
    """Average marginal effects of a probit fit.

    Continuous columns: ``mean(phi(x'b)) * b_j``. Dummy columns: mean of
    ``Phi(x'b | x_j=1) - Phi(x'b | x_j=0)``. Standard errors by the delta
    method using ``fit.vcov``. The intercept gets an AME of zero.
    """
    design = as_design(X)
    Xm = design.X
    beta = fit.beta
    n, k = Xm.shape
    z = Xm @ beta
    pdf = np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
    const = intercept_index(design)

    ame = np.zeros(k)
    jac = np.zeros((k, k))
    discrete = np.zeros(k, dtype=bool)
    for j in range(k):
        if j == const:
            continue
        kind = design.column_kinds[j]
        if kind == "dummy" or (kind == "interaction" and _binary(Xm[:, j])):
            discrete[j] = True
            X1 = Xm.copy()
            X1[:, j] = 1.0
            X0 = Xm.copy()
            X0[:, j] = 0.0
            z1, z0 = X1 @ beta, X0 @ beta
            ame[j] = np.mean(ndtr(z1) - ndtr(z0))
            p1 = np.exp(-0.5 * z1 * z1 - _LOG_SQRT_2PI)
            p0 = np.exp(-0.5 * z0 * z0 - _LOG_SQRT_2PI)
            jac[j] = (p1 @ X1 - p0 @ X0) / n
        else:
            ame[j] = np.mean(pdf) * beta[j]
            jac[j] = -beta[j] * ((pdf * z) @ Xm) / n
            jac[j, j] += np.mean(pdf)
    V = jac @ fit.vcov @ jac.T
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    return ProbitMarginals(ame, se, list(design.column_names), discrete)


def _binary(x):
    return bool(np.all((x == 0) | (x == 1)))


# --------------------------------------------------------------------------
# Lasso
# --------------------------------------------------------------------------

@dataclass
class LassoPath:
    """Lasso solutions along a descending penalty grid.

    ``coef`` is on the original scale of ``X`` (intercept included in its
    own column); ``std_coef`` holds the slopes on the standardized scale
    the penalty acts on.
    """

    lambda_grid: np.ndarray
    coef: np.ndarray
    std_coef: np.ndarray
    bic: np.ndarray
    rss: np.ndarray
    df: np.ndarray
    selected_index: int
    post_ols: FitResult
    column_names: list
    penalized: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    gram: np.ndarray
    xty: np.ndarray
    n_sweeps: np.ndarray

    @property
    def selected_lambda(self):
        return float(self.lambda_grid[self.selected_index])

    @property
    def selected_columns(self):
        row = self.coef[self.selected_index]
        return [nm for nm, b, p in zip(self.column_names, row, self.penalized)
                if p and b != 0.0]


def _soft(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def _cd_solve(G, c, lam, b, tol, max_sweeps):
    k = b.size
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for j in range(k):
            gj = c[j] - G[j] @ b + b[j]
            new = _soft(gj, lam)
            d = new - b[j]
            if d != 0.0:
                b[j] = new
                delta = max(delta, abs(d))
        if delta < tol:
            return sweep
    return max_sweeps


def lasso_bic(y, X, grid_size=100, ratio=1e-4, lambdas=None,
              tol=1e-13, max_sweeps=100_000) -> LassoPath:
    """Lasso path by cyclic coordinate descent, model chosen by BIC.

    Minimizes ``(1/2n)||y - a - Zb||^2 + lam * ||b||_1`` where ``Z`` is
    ``X`` standardized to mean 0 and variance 1 per column (intercept
    excluded and unpenalized). The grid runs log-spaced from
    ``lam_max = max_j |z_j'(y - ybar)|/n`` down to ``lam_max * ratio``
    with warm starts; pass ``lambdas`` to supply an explicit grid.
    ``BIC = n log(RSS/n) + log(n) df`` with ``df`` the support size. The
    selected support is refit by unpenalized OLS.

    Zero-variance columns are excluded with a :class:`DegenerateColumn`
    warning.
    """
    design = as_design(X)
    Xm = design.X
    n, k = Xm.shape
    y = check_vector(y, n)
    if n <= 2:
        raise TooFewRows("lasso needs more than two rows")
    const = intercept_index(design)
    penalized = np.ones(k, dtype=bool)
    if const is not None:
        penalized[const] = False

    if const is not None:
        center = Xm.mean(axis=0)
        center[const] = 0.0
        ybar = float(y.mean())
    else:
        center = np.zeros(k)
        ybar = 0.0
    Xc = Xm - center
    scale = np.sqrt(np.mean(Xc * Xc, axis=0))
    active = penalized.copy()
    for j in np.flatnonzero(penalized):
        if scale[j] <= 1e-12 * max(1.0, np.max(np.abs(Xm[:, j]))):
            warnings.warn(f"column {design.column_names[j]!r} has zero variance; excluded",
                          DegenerateColumn, stacklevel=2)
            active[j] = False
    idx = np.flatnonzero(active)
    Z = Xc[:, idx] / scale[idx]
    yc = y - ybar
    G = Z.T @ Z / n
    c = Z.T @ yc / n

    lam_max = float(np.max(np.abs(c))) if idx.size else 0.0
    if lambdas is None:
        if lam_max == 0.0:
            grid = np.zeros(1)
        else:
            grid = lam_max * np.logspace(0.0, np.log10(ratio), grid_size)
    else:
        grid = np.sort(np.asarray(lambdas, dtype=np.float64))[::-1]
        if np.any(grid < 0):
            raise ValueError("penalties must be non-negative")

    m = grid.size
    std_coef = np.zeros((m, idx.size))
    coef = np.zeros((m, k))
    rss = np.zeros(m)
    df = np.zeros(m, dtype=int)
    sweeps = np.zeros(m, dtype=int)
    b = np.zeros(idx.size)
    for i, lam in enumerate(grid):
        if idx.size:
            # lam_max is itself only known to rounding; treat that band as above it
            if lam >= lam_max * (1.0 - 64 * np.finfo(float).eps):
                b[:] = 0.0
            else:
                sweeps[i] = _cd_solve(G, c, lam, b, tol, max_sweeps)
        std_coef[i] = b
        slopes = np.zeros(k)
        slopes[idx] = b / scale[idx]
        if const is not None:
            slopes[const] = ybar - slopes @ center
        coef[i] = slopes
        r = y - Xm @ slopes
        rss[i] = r @ r
        df[i] = int(np.count_nonzero(b))
    with np.errstate(divide="ignore"):
        bic = n * np.log(rss / n) + np.log(n) * df
    # only supports whose OLS refit is identified are eligible
    n_unpen = int(np.count_nonzero(~penalized))
    eligible = np.isfinite(bic) & (df + n_unpen < n)
    selected = int(np.argmin(np.where(eligible, bic, np.inf))) if eligible.any() else 0

    support = [j for j in range(k) if (not penalized[j]) or coef[selected, j] != 0.0]
    sub = DesignMatrix(Xm[:, support], [design.column_names[j] for j in support],
                       const is not None and support and support[0] == const,
                       design.row_index)
    post = ols(y, sub, vcov_kind="robust_hc1") if support else None
    return LassoPath(grid, coef, std_coef, bic, rss, df, selected, post,
                     list(design.column_names), penalized, center, scale,
                     G, c, sweeps)


# --------------------------------------------------------------------------
# scikit-learn style estimators
# --------------------------------------------------------------------------

class OLSRegressor(RegressorMixin, BaseEstimator):
    """Least-squares regression with classical or HC1 covariance.

    Parameters
    ----------
    vcov_kind : {"robust_hc1", "classical"}
    fit_intercept : bool
        Prepend a constant column to ``X`` before fitting.
    """

    def __init__(self, vcov_kind="robust_hc1", fit_intercept=False):
        self.vcov_kind = vcov_kind
        self.fit_intercept = fit_intercept

    def _design(self, X):
        design = as_design(X)
        if self.fit_intercept:
            design = DesignMatrix(
                np.column_stack([np.ones(design.n), design.X]),
                ["const", *design.column_names], True, design.row_index,
            )
        return design

    def fit(self, X, y):
        self.result_ = ols(y, self._design(X), vcov_kind=self.vcov_kind)
        self.coef_ = self.result_.beta
        self.n_features_in_ = as_design(X).k
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return self._design(X).X @ self.coef_


class ProbitClassifier(ClassifierMixin, BaseEstimator):
    """Binary probit fitted by Newton-Raphson maximum likelihood."""

    def __init__(self, max_iter=100, tol=1e-8):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        self.result_ = probit(y, X, max_iter=self.max_iter, tol_score=self.tol)
        self.coef_ = self.result_.beta
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = as_design(X).k
        return self

    def decision_function(self, X):
        check_is_fitted(self, "result_")
        return as_design(X).X @ self.coef_

    def predict_proba(self, X):
        p = ndtr(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def marginal_effects(self, X):
        check_is_fitted(self, "result_")
        return probit_ame(self.result_, X)


class LassoBICRegressor(RegressorMixin, BaseEstimator):
    """Lasso with BIC-selected penalty and post-selection OLS coefficients."""

    def __init__(self, grid_size=100, ratio=1e-4):
        self.grid_size = grid_size
        self.ratio = ratio

    def fit(self, X, y):
        design = as_design(X)
        self.path_ = lasso_bic(y, design, grid_size=self.grid_size, ratio=self.ratio)
        coef = np.zeros(design.k)
        post = self.path_.post_ols
        if post is not None:
            for name, b in zip(post.column_names, post.beta):
                coef[design.column_names.index(name)] = b
        self.coef_ = coef
        self.lambda_ = self.path_.selected_lambda
        self.n_features_in_ = design.k
        return self

    def predict(self, X):
        check_is_fitted(self, "path_")
        return as_design(X).X @ self.coef_
