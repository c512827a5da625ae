"""Input validation helpers shared by estimators."""
import numpy as np

from .frame import DesignMatrix


def as_design(X, column_names=None):
    """Coerce ``X`` to a :class:`DesignMatrix`.

    Plain arrays get names ``x0, x1, ...``; an all-ones first column is
    recognised as an intercept.
    """
    if isinstance(X, DesignMatrix):
        return X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D design, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("design contains NaN or infinite values")
    if column_names is None:
        column_names = [f"x{i}" for i in range(X.shape[1])]
    has_const = X.shape[1] > 0 and X.shape[0] > 0 and bool(np.all(X[:, 0] == 1.0))
    return DesignMatrix(X, column_names, has_const)


def check_vector(y, n=None, name="y"):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"{name} has {y.shape[0]} rows, design has {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return y


def check_binary(y, name="y"):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must be coded 0/1")
    return y


def intercept_index(design):
    """Index of the constant column, or None."""
    if design.has_intercept:
        return 0
    for j in range(design.k):
        if design.n and np.all(design.X[:, j] == 1.0):
            return j
    return None
