"""Axis-aligned CART trees and bootstrap-aggregated ensembles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError


@dataclass
class Node:
    value: float
    n: int
    feature: int | None = None
    threshold: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self):
        return self.feature is None


def _impurity(count, s, s2, criterion):
    """Count-weighted impurity from the sum and sum of squares of targets."""
    with np.errstate(invalid="ignore", divide="ignore"):
        sse = s2 - s * s / count
        if criterion == "mse":
            return sse
        # Gini for 0/1 labels: count * 2 p (1 - p)
        p = s / count
        return 2.0 * count * p * (1.0 - p)


def best_split(X, y, min_samples_leaf=1, criterion="mse"):
    """Exhaustive search for the impurity-minimizing split.

    Candidate thresholds are midpoints between consecutive distinct values
    of each feature; rows with ``x <= threshold`` go left.  Returns
    ``(gain, feature, threshold)`` or ``None`` when no split reduces the
    impurity.  Ties keep the first feature and the lowest threshold.
    """
    n, d = X.shape
    if n < 2 * min_samples_leaf:
        return None
    # centering keeps the prefix-sum squared errors accurate
    target = y - y.mean() if criterion == "mse" else y
    parent = float(_impurity(n, target.sum(), (target * target).sum(), criterion))
    tie = 1e-12 * max(abs(parent), 1.0)
    best = None
    counts = np.arange(1, n)
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = target[order]
        full = np.cumsum(ys)
        full2 = np.cumsum(ys * ys)
        cs, cs2 = full[:-1], full2[:-1]
        tot, tot2 = full[-1], full2[-1]
        left = _impurity(counts, cs, cs2, criterion)
        right = _impurity(n - counts, tot - cs, tot2 - cs2, criterion)
        gain = parent - (left + right)
        valid = (xs[1:] > xs[:-1]) & (counts >= min_samples_leaf) & (n - counts >= min_samples_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        # gains equal up to rounding count as ties so the first candidate wins
        i = int(np.argmax(gain >= gain.max() - tie))
        g = float(gain[i])
        if g > tie and (best is None or g > best[0] + tie):
            best = (g, j, float((xs[i] + xs[i + 1]) / 2.0))
    return best


class CartTree:
    """Binary regression/classification tree grown greedily to ``max_depth``.

    ``criterion="mse"`` minimizes squared error; ``criterion="gini"``
    expects 0/1 labels and leaves predict the fraction of ones.
    """

    def __init__(self, max_depth=6, min_samples_leaf=5, criterion="mse", max_features=None, rng=None):
        if max_depth is not None and max_depth < 0:
            raise InvalidInputError("max_depth must be non-negative")
        if min_samples_leaf < 1:
            raise InvalidInputError("min_samples_leaf must be positive")
        if criterion not in ("mse", "gini"):
            raise InvalidInputError(f"unknown criterion {criterion!r}")
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.criterion = criterion
        self.max_features = max_features
        self.rng = rng
        self.root = None

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise InvalidInputError("X must be (n, d) with n = len(y) > 0")
        if self.criterion == "gini" and not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("gini criterion needs 0/1 labels")
        self.n_features_ = X.shape[1]
        self.root = self._grow(X, y, 0)
        return self

    def _grow(self, X, y, depth):
        node = Node(value=float(y.mean()), n=y.shape[0])
        if self.max_depth is not None and depth >= self.max_depth:
            return node
        cols = np.arange(X.shape[1])
        if self.max_features is not None and self.max_features < X.shape[1]:
            cols = np.sort(self.rng.choice(X.shape[1], self.max_features, replace=False))
        split = best_split(X[:, cols], y, self.min_samples_leaf, self.criterion)
        if split is None:
            return node
        _, j, thr = split
        node.feature, node.threshold = int(cols[j]), thr
        go_left = X[:, node.feature] <= thr
        node.left = self._grow(X[go_left], y[go_left], depth + 1)
        node.right = self._grow(X[~go_left], y[~go_left], depth + 1)
        return node

    def predict(self, X):
        if self.root is None:
            raise InvalidInputError("tree is not fitted")
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape[0])
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.value
                continue
            go_left = X[idx, node.feature] <= node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def leaves(self):
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend((node.right, node.left))
        return out

    def export_text(self, feature_names=None, precision=4):
        """Indented if/else rules, one line per split branch or leaf."""
        names = feature_names or [f"x{j}" for j in range(self.n_features_)]
        lines = []

        def walk(node, indent):
            pad = "  " * indent
            if node.is_leaf:
                lines.append(f"{pad}value={node.value:.{precision}f} (n={node.n})")
                return
            name = names[node.feature]
            lines.append(f"{pad}if {name} <= {node.threshold:.{precision}f}:")
            walk(node.left, indent + 1)
            lines.append(f"{pad}else:  # {name} > {node.threshold:.{precision}f}")
            walk(node.right, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines)


class BaggedTrees:
    """Average of trees fit to bootstrap resamples."""

    def __init__(self, n_trees=50, max_depth=6, min_samples_leaf=5, criterion="mse",
                 max_features=None, seed=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.criterion = criterion
        self.max_features = max_features
        self.seed = seed
        self.trees = []

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        rng = np.random.default_rng(self.seed)
        self.trees = []
        for _ in range(self.n_trees):
            idx = rng.integers(0, X.shape[0], size=X.shape[0])
            tree = CartTree(self.max_depth, self.min_samples_leaf, self.criterion,
                            self.max_features, rng=rng)
            self.trees.append(tree.fit(X[idx], y[idx]))
        return self

    def predict(self, X):
        return np.mean([t.predict(X) for t in self.trees], axis=0)
