"""Linear outcome models and the Linear-1 / Linear-2 effect estimators.

Linear-1 fits one model on ``(x, t)``; Linear-2 fits one model per arm.
Continuous outcomes use ordinary least squares, binary outcomes logistic
regression.  A ``1e-8`` ridge on the slopes keeps singular designs solvable.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from ..errors import InvalidInputError
from ..evaluation import CatePredictions

RIDGE = 1e-8


def _design(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("design matrix must be (n, d) with n > 0")
    return np.hstack([np.ones((X.shape[0], 1)), X])


class LinearRegression:
    """Least squares with an intercept; ``coef_[0]`` is the intercept."""

    def fit(self, X, y):
        A = _design(X)
        y = np.asarray(y, dtype=float)
        reg = RIDGE * np.eye(A.shape[1])
        reg[0, 0] = 0.0
        gram = A.T @ A + reg
        self.coef_ = np.linalg.solve(gram, A.T @ y)
        resid = y - A @ self.coef_
        dof = max(A.shape[0] - A.shape[1], 1)
        sigma2 = float(resid @ resid) / dof
        self.stderr_ = np.sqrt(np.clip(np.diag(np.linalg.inv(gram)) * sigma2, 0.0, None))
        return self

    def predict(self, X):
        return _design(X) @ self.coef_


class LogisticRegression:
    """Maximum-likelihood logistic regression; ``predict`` returns probabilities."""

    def __init__(self, ridge=RIDGE, tol=1e-10, max_iter=2000):
        self.ridge = ridge
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        A = _design(X)
        y = np.asarray(y, dtype=float)
        n = A.shape[0]
        mask = np.ones(A.shape[1])
        mask[0] = 0.0

        def objective(w):
            z = A @ w
            nll = -np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)) / n
            grad = A.T @ (expit(z) - y) / n
            return nll + 0.5 * self.ridge * np.sum(mask * w * w), grad + self.ridge * mask * w

        res = minimize(objective, np.zeros(A.shape[1]), jac=True, method="L-BFGS-B",
                       options={"gtol": self.tol, "ftol": 1e-15, "maxiter": self.max_iter})
        self.coef_ = res.x
        p = expit(A @ self.coef_)
        info = (A * (p * (1 - p))[:, None]).T @ A + n * self.ridge * np.diag(mask)
        self.stderr_ = np.sqrt(np.clip(np.diag(np.linalg.pinv(info)), 0.0, None))
        return self

    def decision_function(self, X):
        return _design(X) @ self.coef_

    def predict(self, X):
        return expit(self.decision_function(X))


def _model(kind):
    if kind == "binary":
        return LogisticRegression()
    if kind == "continuous":
        return LinearRegression()
    raise InvalidInputError(f"unknown outcome kind {kind!r}")


class LinearSingle:
    """Linear-1: one outcome model on ``(x, t)``."""

    name = "linear1"

    def fit(self, data):
        if data.n == 0:
            raise InvalidInputError("empty training data")
        self.model = _model(data.outcome_kind).fit(np.column_stack([data.x, data.t]), data.y)
        return self

    def predict(self, data):
        x = data.x
        f0 = self.model.predict(np.column_stack([x, np.zeros(data.n)]))
        f1 = self.model.predict(np.column_stack([x, np.ones(data.n)]))
        return CatePredictions(f0=f0, f1=f1, score=f1 - f0)


class LinearTwo:
    """Linear-2: separate outcome models for the control and treated arms."""

    name = "linear2"

    def fit(self, data):
        arms = [data.t == a for a in (0, 1)]
        if not all(m.any() for m in arms):
            raise InvalidInputError("both treatment arms must be non-empty")
        self.models = [_model(data.outcome_kind).fit(data.x[m], data.y[m]) for m in arms]
        return self

    def predict(self, data):
        f0, f1 = (m.predict(data.x) for m in self.models)
        return CatePredictions(f0=f0, f1=f1, score=f1 - f0)


def fit_linear_single(data):
    return LinearSingle().fit(data)


def fit_linear_two(data):
    return LinearTwo().fit(data)
