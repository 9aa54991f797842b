"""Effect-estimation and subgroup-identification metrics.

PEHE against known effects, propensity models, the inverse probability of
treatment weighted (IPTW) subgroup effect, subgroup-effect-versus-size
curves and ROC analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from . import core
from .errors import InvalidInputError

logger = logging.getLogger(__name__)

CLIP = (0.01, 0.99)
CURVE_QUANTILES = tuple(np.round(np.arange(1, 20) * 0.05, 2))


@dataclass(frozen=True)
class CatePredictions:
    """Estimated potential outcomes per row plus a subgroup score.

    ``score`` ranks rows by membership in the enhanced subgroup; higher
    means more likely.
    """

    f0: np.ndarray
    f1: np.ndarray
    score: np.ndarray | None = None

    @property
    def cate(self):
        return self.f1 - self.f0


def hemm_predictions(p, data):
    """Potential outcomes and enhanced-subgroup membership probabilities of a fitted model."""
    f0, f1, r = core.potential_outcomes(p, data.x_cont, data.x_disc)
    return CatePredictions(f0=f0, f1=f1, score=r[:, core.enhanced_group_index(p)])


class PEHE(NamedTuple):
    pehe: float
    root: float


def pehe(pred, truth):
    """Mean squared error of estimated effects against the true per-row effect.

    ``truth`` is either an array of true effects or a dataset carrying both
    potential outcomes, in which case ``y1 - y0`` is used.
    """
    cate = pred.cate if isinstance(pred, CatePredictions) else np.asarray(pred, dtype=float)
    if hasattr(truth, "has_potential_outcomes"):
        if not truth.has_potential_outcomes:
            raise InvalidInputError("dataset has no potential outcomes; PEHE undefined")
        tau = truth.y1 - truth.y0
    elif truth is None:
        raise InvalidInputError("true effects required for PEHE")
    else:
        tau = np.asarray(truth, dtype=float)
    if tau.shape != cate.shape or cate.size == 0:
        raise InvalidInputError("predictions and true effects must be non-empty and aligned")
    value = float(np.mean((cate - tau) ** 2))
    return PEHE(value, float(np.sqrt(value)))


# -- propensity ---------------------------------------------------------------


class PropensityModel:
    """Estimator of ``P(T=1 | x)`` with outputs clipped into ``clip``."""

    def __init__(self, estimator, clip=CLIP, kind="forest", diagnostics=None):
        self.estimator = estimator
        self.clip = clip
        self.kind = kind
        self.diagnostics = diagnostics or {}

    def predict(self, data_or_x):
        x = data_or_x.x if hasattr(data_or_x, "x_cont") else np.asarray(data_or_x, dtype=float)
        return np.clip(self.estimator.predict(x), *self.clip)


class _Constant:
    def __init__(self, value):
        self.value = float(value)

    def predict(self, x):
        return np.full(np.asarray(x).shape[0], self.value)


def positivity_histogram(e, t, bins=10):
    """Counts of propensity scores per arm on a fixed ``[0, 1]`` grid."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    return {
        "edges": edges.tolist(),
        "treated": np.histogram(e[t == 1], bins=edges)[0].tolist(),
        "control": np.histogram(e[t == 0], bins=edges)[0].tolist(),
    }


def _log_loss(p, t):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def fit_propensity(train, dev=None, method="forest", n_trees=50, max_depth=6,
                   depth_grid=(2, 4, 6), clip=CLIP, seed=0):
    """Fit a propensity model on ``train``.

    ``method="forest"`` bags classification trees; when ``dev`` is given the
    depth is chosen from ``depth_grid`` by dev log-loss, otherwise
    ``max_depth`` is used.  ``method="logistic"`` fits a logistic
    regression.  A positivity histogram of the fitted scores on ``train``
    is attached as ``diagnostics``.
    """
    from .baselines.cart import BaggedTrees
    from .baselines.linear import LogisticRegression

    if train.n == 0 or np.unique(train.t).size < 2:
        raise InvalidInputError("propensity fitting needs both treatment arms in train")
    X = train.x
    if X.shape[1] == 0:
        est = _Constant(train.t.mean())
    elif method == "logistic":
        est = LogisticRegression().fit(X, train.t)
    elif method == "forest":
        depths = depth_grid if dev is not None and dev.n else (max_depth,)
        best = None
        for depth in depths:
            cand = BaggedTrees(n_trees=n_trees, max_depth=depth, criterion="gini", seed=seed)
            cand.fit(X, train.t)
            if len(depths) == 1:
                best = (0.0, cand)
                break
            loss = _log_loss(np.clip(cand.predict(dev.x), *clip), dev.t)
            if best is None or loss < best[0]:
                best = (loss, cand)
        est = best[1]
    else:
        raise InvalidInputError(f"unknown propensity method {method!r}")
    model = PropensityModel(est, clip=clip, kind=method)
    model.diagnostics = positivity_histogram(model.predict(X), train.t)
    return model


# -- IPTW ---------------------------------------------------------------------


def _propensities(data, e):
    if isinstance(e, PropensityModel):
        return e.predict(data)
    e = np.asarray(e, dtype=float)
    return np.full(data.n, float(e)) if e.ndim == 0 else e


def iptw_terms(data, e):
    """Per-row terms ``y t / e - y (1 - t) / (1 - e)``."""
    ev = _propensities(data, e)
    y, t = data.y, data.t
    return y * t / ev - y * (1 - t) / (1.0 - ev)


def _members(data, members):
    if members is None:
        return np.ones(data.n, dtype=bool)
    m = np.asarray(members)
    if m.dtype != bool:
        mask = np.zeros(data.n, dtype=bool)
        mask[m.astype(int)] = True
        m = mask
    return m


def iptw_subgroup_ate(data, members, e):
    """IPTW estimate of the average effect within the subgroup ``members``.

    ``members`` is a boolean mask or an index array (``None`` means the
    whole population); ``e`` is a :class:`PropensityModel`, an array of
    per-row propensities or a constant.
    """
    mask = _members(data, members)
    if not mask.any():
        raise InvalidInputError("subgroup is empty")
    return float(np.mean(iptw_terms(data, e)[mask]))


def iptw_standard_error(data, members, e):
    """Normal-approximation standard error of :func:`iptw_subgroup_ate`."""
    mask = _members(data, members)
    terms = iptw_terms(data, e)[mask]
    if terms.size < 2:
        return float("nan")
    return float(terms.std(ddof=1) / np.sqrt(terms.size))


def ate_size_curve(data, scores, e, quantiles=CURVE_QUANTILES):
    """Subgroup effect as the membership threshold sweeps score quantiles.

    The subgroup at threshold ``c`` is ``{i : score_i >= c}``.  Returns
    ``(threshold, fraction, tau_hat)`` triples ordered by increasing
    fraction and ending at the full population.  Thresholds that select
    the same rows as another are dropped.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (data.n,):
        raise InvalidInputError("one score per row required")
    terms = iptw_terms(data, e)
    thresholds = [float(np.quantile(scores, q)) for q in sorted(quantiles, reverse=True)]
    thresholds.append(float(scores.min()))
    points = {}
    for c in thresholds:
        mask = scores >= c
        count = int(mask.sum())
        if count == 0 or count in points:
            continue
        points[count] = (c, count / data.n, float(np.mean(terms[mask])))
    return [points[c] for c in sorted(points)]


# -- ROC ----------------------------------------------------------------------


def roc_auc(scores, labels):
    """ROC curve and area under it.

    Returns ``((fpr, tpr, thresholds), auc)``.  The curve has one vertex per
    distinct score; the trapezoidal area equals the Mann-Whitney statistic
    with ties counted as one half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels must be aligned")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("ROC analysis needs both classes")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(l)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return (fpr, tpr, thresholds), auc


def mann_whitney_auc(scores, labels):
    """AUC from average ranks; equals :func:`roc_auc` for any ties."""
    labels = np.asarray(labels).astype(int)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
