"""k-nearest-neighbour effect estimator."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..evaluation import CatePredictions


class KNNCate:
    """Difference of mean outcomes among the ``k`` nearest rows of each arm.

    Distances are Euclidean on features z-scored with the training mean and
    standard deviation (constant columns keep unit scale).  Equidistant
    neighbours are taken in training-row order.
    """

    name = "knn"

    def __init__(self, k=10):
        if k < 1:
            raise InvalidInputError("k must be at least 1")
        self.k = int(k)

    def fit(self, data):
        X = data.x
        self.mean_ = X.mean(axis=0) if data.n else np.zeros(X.shape[1])
        scale = X.std(axis=0) if data.n else np.ones(X.shape[1])
        self.scale_ = np.where(scale > 0, scale, 1.0)
        Z = (X - self.mean_) / self.scale_
        self.arms_ = []
        for a in (0, 1):
            m = data.t == a
            if m.sum() < self.k:
                raise InvalidInputError(f"arm t={a} has {int(m.sum())} rows, fewer than k={self.k}")
            self.arms_.append((Z[m], data.y[m]))
        return self

    def _arm_means(self, Zq, arm):
        Z, y = self.arms_[arm]
        out = np.empty(Zq.shape[0])
        for i, z in enumerate(Zq):
            d2 = np.sum((Z - z) ** 2, axis=1)
            nearest = np.argsort(d2, kind="stable")[: self.k]
            out[i] = y[nearest].mean()
        return out

    def predict_x(self, X):
        Zq = (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean_) / self.scale_
        return self._arm_means(Zq, 0), self._arm_means(Zq, 1)

    def predict(self, data):
        f0, f1 = self.predict_x(data.x)
        return CatePredictions(f0=f0, f1=f1, score=f1 - f0)


def knn_cate(data, x, k):
    """k-NN effect estimate at a single feature vector ``x``."""
    f0, f1 = KNNCate(k).fit(data).predict_x(np.asarray(x, dtype=float).reshape(1, -1))
    return float(f1[0] - f0[0])
