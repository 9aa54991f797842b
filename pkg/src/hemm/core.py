"""Probability computations of the heterogeneous effect mixture model.

A fitted model has ``K`` latent subgroups sharing a uniform prior.  Within
subgroup ``k`` continuous covariates are diagonal Gaussian with mean
``mu[k]`` and variances ``sigma2[k]``, binary covariates are independent
Bernoulli with means ``pi[k]``.  The outcome depends on the subgroup only
through an additive treatment coefficient ``gamma[k]``::

    binary:      p(y=1 | x, t, z=k) = sigmoid(f(x; w_t) + gamma[k] * t)
    continuous:  E[y | x, t, z=k]   = f(x; w_t) + gamma[k] * t

All functions here are pure; batch variants take ``(n, d)`` arrays and
return one row per observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DegeneratePosteriorError, InvalidInputError
from .nn import Network

LOG_2PI = np.log(2.0 * np.pi)
OUTCOME_KINDS = ("binary", "continuous")
PENALTY_KINDS = ("laplace_l1", "group_l12")
REPORT_CLAMP = 1e-12


def as_blocks(x_cont, x_disc, d_cont, d_disc):
    """Coerce covariate blocks to ``(n, d_c)`` and ``(n, d_b)`` float arrays.

    Either block may be ``None`` or empty when its dimension is zero.
    """
    blocks = []
    for a, d in ((x_cont, d_cont), (x_disc, d_disc)):
        a = np.zeros((0, d)) if a is None else np.asarray(a, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, d) if d else a.reshape(0, 0)
        blocks.append(a)
    n = max(b.shape[0] for b in blocks)
    blocks = [b if b.size or b.shape[1] else np.zeros((n, 0)) for b in blocks]
    return blocks[0], blocks[1]


@dataclass(frozen=True)
class MixtureParams:
    """Per-component covariate distributions.

    ``mu`` and ``sigma2`` have shape ``(K, d_c)``; ``pi`` has shape
    ``(K, d_b)``.  The mixing weights are fixed at ``1/K``.
    """

    mu: np.ndarray
    sigma2: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        sigma2 = np.atleast_2d(np.asarray(self.sigma2, dtype=float))
        pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        K = max(mu.shape[0], pi.shape[0])
        mu = mu.reshape(K, -1) if mu.size else np.zeros((K, 0))
        sigma2 = sigma2.reshape(K, -1) if sigma2.size else np.zeros((K, 0))
        pi = pi.reshape(K, -1) if pi.size else np.zeros((K, 0))
        if mu.shape != sigma2.shape:
            raise InvalidInputError("mu and sigma2 must have equal shapes")
        if not np.all(sigma2 > 0):
            raise InvalidInputError("sigma2 must be strictly positive")
        if not np.all((pi >= 0) & (pi <= 1)):
            raise InvalidInputError("pi must lie in [0, 1]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "pi", pi)

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def d_cont(self):
        return self.mu.shape[1]

    @property
    def d_disc(self):
        return self.pi.shape[1]


@dataclass(frozen=True)
class OutcomeParams:
    """Treatment coefficients and the two-headed outcome function."""

    gamma: np.ndarray
    net: Network
    outcome_kind: str = "binary"
    sigma_y: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).reshape(-1))
        if self.outcome_kind not in OUTCOME_KINDS:
            raise InvalidInputError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.outcome_kind == "continuous" and not self.sigma_y > 0:
            raise InvalidInputError("sigma_y must be positive")


@dataclass(frozen=True)
class ModelParams:
    mixture: MixtureParams
    outcome: OutcomeParams

    def __post_init__(self):
        if self.mixture.K != self.outcome.gamma.shape[0]:
            raise InvalidInputError(
                f"mixture has {self.mixture.K} components but gamma has "
                f"{self.outcome.gamma.shape[0]} entries"
            )
        d = self.mixture.d_cont + self.mixture.d_disc
        if self.outcome.net.d_in != d:
            raise InvalidInputError(
                f"network expects {self.outcome.net.d_in} inputs, covariates have {d}"
            )

    @property
    def K(self):
        return self.mixture.K


@dataclass(frozen=True)
class Covariates:
    """One observation's continuous and binary covariates."""

    x_cont: np.ndarray
    x_disc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_cont", np.asarray(self.x_cont, dtype=float).reshape(-1))
        object.__setattr__(self, "x_disc", np.asarray(self.x_disc, dtype=float).reshape(-1))

    @property
    def x(self):
        return np.concatenate([self.x_cont, self.x_disc])


def _check_dims(m, x_cont, x_disc):
    if x_cont.shape[1] != m.d_cont or x_disc.shape[1] != m.d_disc:
        raise InvalidInputError(
            f"covariates have ({x_cont.shape[1]} cont, {x_disc.shape[1]} disc) columns; "
            f"model expects ({m.d_cont}, {m.d_disc})"
        )
    if x_cont.shape[0] != x_disc.shape[0]:
        raise InvalidInputError("continuous and binary blocks have different row counts")


def bernoulli_log_mass(x_disc, log_pi, log1m_pi):
    """``sum_j x_j log pi_kj + (1 - x_j) log(1 - pi_kj)`` for every row and k.

    Zero-probability terms that are not observed contribute exactly zero,
    so ``pi`` at 0 or 1 only yields ``-inf`` for contradicting rows.
    """
    on = x_disc[:, None, :] > 0.5
    with np.errstate(invalid="ignore"):
        terms = np.where(on, log_pi[None], log1m_pi[None])
    return terms.sum(axis=2)


def gaussian_log_density(x_cont, mu, sigma2):
    """Diagonal Gaussian log density of every row under every component."""
    diff = x_cont[:, None, :] - mu[None]
    return -0.5 * (LOG_2PI + np.log(sigma2)[None] + diff * diff / sigma2[None]).sum(axis=2)


def component_log_densities(m, x_cont, x_disc):
    """``log p(x_i | z=k)`` as an ``(n, K)`` array."""
    x_cont, x_disc = as_blocks(x_cont, x_disc, m.d_cont, m.d_disc)
    _check_dims(m, x_cont, x_disc)
    with np.errstate(divide="ignore"):
        log_pi = np.log(m.pi)
        log1m_pi = np.log1p(-m.pi)
    return gaussian_log_density(x_cont, m.mu, m.sigma2) + bernoulli_log_mass(x_disc, log_pi, log1m_pi)


def log_component_density(m, x, k):
    """Log density of covariates ``x`` under component ``k``.

    Returns ``-inf`` when a binary covariate contradicts a mean of exactly
    0 or 1.
    """
    if not 0 <= k < m.K:
        raise InvalidInputError(f"component {k} out of range for K={m.K}")
    return float(component_log_densities(m, x.x_cont[None, :], x.x_disc[None, :])[0, k])


def normalize_log_rows(logits, what="posterior"):
    """Row-wise softmax of log weights via log-sum-exp.

    Raises :class:`DegeneratePosteriorError` naming the first row whose
    weights are all ``-inf``.
    """
    lse = logsumexp(logits, axis=1, keepdims=True)
    bad = ~np.isfinite(lse[:, 0])
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DegeneratePosteriorError(
            f"{what} of sample {i} is degenerate: no component has finite log weight", index=i
        )
    return np.exp(logits - lse)


def membership_posteriors(m, x_cont, x_disc):
    """``p(z=k | x_i)`` for every row under the uniform prior, shape ``(n, K)``."""
    return normalize_log_rows(component_log_densities(m, x_cont, x_disc))


def membership_posterior(m, x):
    return membership_posteriors(m, x.x_cont[None, :], x.x_disc[None, :])[0]


def _link(p, eta):
    return expit(eta) if p.outcome.outcome_kind == "binary" else eta


def head_outputs(p, x_cont, x_disc):
    """``f(x_i; w_0)`` and ``f(x_i; w_1)`` for every row."""
    x_cont, x_disc = as_blocks(x_cont, x_disc, p.mixture.d_cont, p.mixture.d_disc)
    X = np.hstack([x_cont, x_disc])
    net = p.outcome.net
    return net.forward_batch(X, 0), net.forward_batch(X, 1)


def outcome_means(p, x_cont, x_disc, t):
    """Outcome mean for every row and component under treatment ``t``."""
    f0, f1 = head_outputs(p, x_cont, x_disc)
    f = f1 if t == 1 else f0
    return _link(p, f[:, None] + p.outcome.gamma[None, :] * t)


def outcome_mean(p, x, t, k):
    """Mean outcome of one observation in component ``k`` under treatment ``t``."""
    if t not in (0, 1):
        raise InvalidInputError(f"t must be 0 or 1, got {t!r}")
    if not 0 <= k < p.K:
        raise InvalidInputError(f"component {k} out of range for K={p.K}")
    return float(outcome_means(p, x.x_cont[None, :], x.x_disc[None, :], t)[0, k])


def potential_outcomes(p, x_cont, x_disc):
    """Posterior-averaged potential outcome means ``(f0, f1, posterior)``."""
    r = membership_posteriors(p.mixture, x_cont, x_disc)
    mu0 = (r * outcome_means(p, x_cont, x_disc, 0)).sum(axis=1)
    mu1 = (r * outcome_means(p, x_cont, x_disc, 1)).sum(axis=1)
    return mu0, mu1, r


def predict_cates(p, x_cont, x_disc):
    """``sum_k p(z=k|x) (E[y|x,1,k] - E[y|x,0,k])`` for every row."""
    mu0, mu1, _ = potential_outcomes(p, x_cont, x_disc)
    return mu1 - mu0


def predict_cate(p, x):
    return float(predict_cates(p, x.x_cont[None, :], x.x_disc[None, :])[0])


def sparsity_penalty(pi, kind):
    """Sparsity penalty on the ``(K, d_b)`` Bernoulli means.

    ``laplace_l1`` sums absolute values; ``group_l12`` sums, over binary
    covariates, the Euclidean norm of that covariate's means across
    components.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.ndim == 1:
        pi = pi[:, None]
    if kind == "laplace_l1":
        return float(np.abs(pi).sum())
    if kind == "group_l12":
        return float(np.sqrt((pi * pi).sum(axis=0)).sum())
    raise InvalidInputError(f"unknown penalty kind {kind!r}")


def enhanced_group_index(p):
    """Component with the largest treatment coefficient; ties go to the lowest index."""
    gamma = p.outcome.gamma if isinstance(p, ModelParams) else np.asarray(p, dtype=float)
    return int(np.argmax(gamma))


def subgroup_feature_report(m, k, names=None):
    """Relative prevalence ``pi[k, j] / sum_k' pi[k', j]`` of each binary covariate.

    Returns ``(name, ratio)`` pairs sorted by descending ratio.  Covariates
    whose means are zero in every component get ratio ``None`` and come
    last.  A ratio of ``1/K`` means no enrichment.
    """
    if not 0 <= k < m.K:
        raise InvalidInputError(f"component {k} out of range for K={m.K}")
    names = list(names) if names is not None else [f"disc{j}" for j in range(m.d_disc)]
    if len(names) != m.d_disc:
        raise InvalidInputError("one name per binary covariate required")
    totals = m.pi.sum(axis=0)
    defined, undefined = [], []
    for j, name in enumerate(names):
        if totals[j] > 0:
            defined.append((name, float(m.pi[k, j] / totals[j])))
        else:
            undefined.append((name, None))
    defined.sort(key=lambda item: -item[1])
    return defined + undefined


def format_feature_report(report, top=None):
    lines = []
    for name, ratio in report[:top]:
        shown = "undefined" if ratio is None else f"{max(ratio, REPORT_CLAMP):.4f}"
        lines.append(f"{shown}\t{name}")
    return "\n".join(lines)
