"""Fitting the mixture model by penalized conditional likelihood.

Two optimizers are provided.  :func:`train_elbo` ascends the evidence
lower bound obtained by using ``p(z | x)`` as the variational distribution,

    ELBO_i = sum_k p(z_i=k | x_i) * log p(y_i | x_i, t_i, z_i=k),

minus ``lam * penalty(pi)``, with Adam on shuffled minibatches and
gradients flowing through both factors.  :func:`train_em` alternates
responsibilities ``h_ik = p(z_i=k | y_i, x_i, t_i)`` with a few Adam steps
on the expected complete-data log-likelihood.

Optimization runs on unconstrained coordinates: ``sigma2 = 1e-6 +
exp(log_var)``, ``pi = sigmoid(logit_pi)`` and, when learned,
``sigma_y = exp(log_sigma_y)``.
"""

from __future__ import annotations

import csv
import io
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from . import core
from .core import MixtureParams, ModelParams, OutcomeParams
from .errors import InvalidInputError, NumericalError
from .nn import HEAD_TYPES, AdamState, Network, adam_step

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
PI_INIT_CLIP = 1e-6
ZERO_PI = 1e-3


def substream(seed, name, *extra):
    """Independent generator for a named purpose, derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of a single training run.

    ``lam`` is the prior strength, ``prior_kind`` one of ``laplace_l1`` and
    ``group_l12``.  ``heads`` picks the outcome function (``linear``,
    ``mlp1``, ``mlp2``) unless ``hidden`` gives explicit widths.
    ``restart`` selects the random draw of the initial treatment
    coefficients.
    """

    K: int = 2
    lam: float = 0.0
    prior_kind: str = "laplace_l1"
    outcome_kind: str = "binary"
    heads: str = "linear"
    head_mode: str = "separate"
    hidden: tuple | None = None
    step_size: float = 1e-4
    minibatch: int = 10
    max_epochs: int = 500
    early_stop: bool = True
    patience: int = 1
    weight_decay: float = 1e-3
    seed: int = 0
    restart: int = 0
    restarts: int = 5
    pretrain_epochs: int = 20
    pretrain_step: float = 1e-3
    m_step_iters: int = 10
    sigma_y: float = 1.0
    learn_sigma_y: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise InvalidInputError("K must be at least 1")
        if self.lam < 0:
            raise InvalidInputError("lam must be non-negative")
        if self.prior_kind not in core.PENALTY_KINDS:
            raise InvalidInputError(f"unknown prior kind {self.prior_kind!r}")
        if self.outcome_kind not in core.OUTCOME_KINDS:
            raise InvalidInputError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.hidden is None and self.heads not in HEAD_TYPES:
            raise InvalidInputError(f"unknown head type {self.heads!r}")
        if self.head_mode not in ("separate", "shared"):
            raise InvalidInputError(f"unknown head mode {self.head_mode!r}")
        if not self.step_size > 0 or not self.pretrain_step > 0:
            raise InvalidInputError("step sizes must be positive")
        if self.minibatch < 1 or self.max_epochs < 0 or self.patience < 1:
            raise InvalidInputError("minibatch, max_epochs and patience must be positive")
        if self.m_step_iters < 1 or self.restarts < 1:
            raise InvalidInputError("m_step_iters and restarts must be positive")
        if not self.sigma_y > 0:
            raise InvalidInputError("sigma_y must be positive")
        if self.hidden is not None:
            object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self):
        return self.hidden if self.hidden is not None else HEAD_TYPES[self.heads]

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden) if self.hidden is not None else None
        return d


# -- unconstrained parameterization -------------------------------------------


@dataclass(frozen=True)
class _Layout:
    d_cont: int
    d_disc: int
    hidden: tuple
    head_mode: str
    outcome_kind: str
    sigma_y: float
    learn_sigma_y: bool

    @classmethod
    def of(cls, p, learn_sigma_y=False):
        net = p.outcome.net
        return cls(p.mixture.d_cont, p.mixture.d_disc, net.hidden, net.mode,
                   p.outcome.outcome_kind, float(p.outcome.sigma_y), learn_sigma_y)

    def network(self, theta):
        net = Network.__new__(Network)
        net.d_in = self.d_cont + self.d_disc
        net.hidden = self.hidden
        net.mode = self.head_mode
        net.params = {k[4:]: v for k, v in theta.items() if k.startswith("net.")}
        return net

    def sigma_y_of(self, theta):
        return float(np.exp(theta["log_sigma_y"][0])) if self.learn_sigma_y else self.sigma_y


def pack(p, learn_sigma_y=False):
    """Unconstrained coordinates of ``p`` as a dict of float arrays."""
    with np.errstate(divide="ignore"):
        theta = {
            "mu": p.mixture.mu.copy(),
            "log_var": np.log(np.maximum(p.mixture.sigma2 - VAR_FLOOR, 1e-300)),
            "logit_pi": np.log(p.mixture.pi) - np.log1p(-p.mixture.pi),
            "gamma": p.outcome.gamma.copy(),
        }
    if learn_sigma_y:
        theta["log_sigma_y"] = np.array([np.log(p.outcome.sigma_y)])
    for name, arr in p.outcome.net.params.items():
        theta[f"net.{name}"] = arr.copy()
    return theta


def unpack(theta, layout):
    net = layout.network({k: v.copy() for k, v in theta.items()})
    return ModelParams(
        MixtureParams(theta["mu"].copy(), VAR_FLOOR + np.exp(theta["log_var"]), expit(theta["logit_pi"])),
        OutcomeParams(theta["gamma"].copy(), net, layout.outcome_kind, layout.sigma_y_of(theta)),
    )


def _copy(theta):
    return {k: v.copy() for k, v in theta.items()}


def _penalty_and_grad(logit_pi, kind):
    pi = expit(logit_pi)
    if pi.size == 0:
        return 0.0, np.zeros_like(pi)
    dpi = pi * (1.0 - pi)
    if kind == "laplace_l1":
        return float(pi.sum()), dpi
    norms = np.sqrt((pi * pi).sum(axis=0))
    return float(norms.sum()), pi / norms[None, :] * dpi


def _forward(theta, layout, batch):
    """Shared forward pass: mixture log densities and per-component outcome terms."""
    xc, xd, t, y = batch.x_cont, batch.x_disc, batch.t, batch.y
    n = t.shape[0]
    var = VAR_FLOOR + np.exp(theta["log_var"])
    u = theta["logit_pi"]
    log_pi = -np.logaddexp(0.0, -u)
    log1m_pi = -np.logaddexp(0.0, u)
    a = core.gaussian_log_density(xc, theta["mu"], var) + xd @ log_pi.T + (1.0 - xd) @ log1m_pi.T

    net = layout.network(theta)
    X = np.hstack([xc, xd])
    f = np.empty(n)
    caches = {}
    for arm in (0, 1):
        idx = np.flatnonzero(t == arm)
        if idx.size:
            f[idx], cache = net.forward_batch(X[idx], arm, return_cache=True)
            caches[arm] = (idx, cache)
    eta = f[:, None] + theta["gamma"][None, :] * t[:, None]
    if layout.outcome_kind == "binary":
        ell = y[:, None] * eta - np.logaddexp(0.0, eta)
        dell = y[:, None] - expit(eta)
    else:
        s2 = layout.sigma_y_of(theta) ** 2
        resid = y[:, None] - eta
        ell = -0.5 * (core.LOG_2PI + np.log(s2)) - resid * resid / (2.0 * s2)
        dell = resid / s2
    return a, ell, dell, eta, net, caches


def _evaluate(theta, layout, batch, kind="elbo", lam=0.0, prior_kind="laplace_l1",
              h=None, grad=True):
    """Objective over ``batch`` and, optionally, its gradient.

    ``kind`` selects the data term: ``elbo``, ``q`` (expected complete-data
    log-likelihood under fixed responsibilities ``h``) or ``loglik`` (exact
    conditional log-likelihood).  The returned value is the data term summed
    over rows minus ``lam * penalty``; gradients are ascent directions.
    """
    xc, xd, t, y = batch.x_cont, batch.x_disc, batch.t, batch.y
    a, ell, dell, eta, net, caches = _forward(theta, layout, batch)
    log_r = a - logsumexp(a, axis=1, keepdims=True)
    r = np.exp(log_r)
    mu = theta["mu"]
    var = VAR_FLOOR + np.exp(theta["log_var"])
    u = theta["logit_pi"]

    if kind == "elbo":
        per_row = (r * ell).sum(axis=1)
        weights = r
        da = r * (ell - per_row[:, None])
    elif kind == "q":
        if h is None:
            raise InvalidInputError("responsibilities required for the Q objective")
        with np.errstate(invalid="ignore"):
            per_row = np.where(h > 0, h * (log_r + ell), 0.0).sum(axis=1)
        weights = h
        da = h - r * h.sum(axis=1, keepdims=True)
    elif kind == "loglik":
        joint = log_r + ell
        per_row = logsumexp(joint, axis=1)
        weights = np.exp(joint - per_row[:, None])
        da = weights - r
    else:
        raise InvalidInputError(f"unknown objective {kind!r}")

    pen, dpen = _penalty_and_grad(u, prior_kind) if lam else (0.0, None)
    value = float(per_row.sum()) - lam * pen
    if not grad:
        return value, None

    g = {}
    col = da.sum(axis=0)[:, None]
    g["mu"] = (da.T @ xc - col * mu) / var
    sq = da.T @ (xc * xc) - 2.0 * mu * (da.T @ xc) + col * mu * mu
    g["log_var"] = (-0.5 * col / var + 0.5 * sq / (var * var)) * np.exp(theta["log_var"])
    g["logit_pi"] = da.T @ xd - col * expit(u)
    if lam:
        g["logit_pi"] = g["logit_pi"] - lam * dpen
    g_eta = weights * dell
    g["gamma"] = (g_eta * t[:, None]).sum(axis=0)
    if layout.learn_sigma_y:
        if layout.outcome_kind == "continuous":
            s2 = layout.sigma_y_of(theta) ** 2
            g["log_sigma_y"] = np.array([(weights * (-1.0 + (y[:, None] - eta) ** 2 / s2)).sum()])
        else:
            g["log_sigma_y"] = np.zeros(1)
    adj = g_eta.sum(axis=1)
    net_grads = net.zeros_like()
    for arm, (idx, cache) in caches.items():
        for name, arr in net.backward(cache, adj[idx]).items():
            net_grads[name] += arr
    for name, arr in net_grads.items():
        g[f"net.{name}"] = arr
    return value, g


def _check_finite(value, theta, grads=None, where=""):
    for name, arr in list(theta.items()) + list((grads or {}).items()):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(
                f"non-finite values in parameter block {name!r}{where}", block=name,
                diagnostics={"block": name, "objective": value},
            )
    if not np.isfinite(value):
        block = "mixture" if not np.all(np.isfinite(theta["logit_pi"])) else "objective"
        raise NumericalError(f"non-finite objective{where}", block=block,
                             diagnostics={"objective": value})


# -- public objectives on ModelParams -----------------------------------------


def component_outcome_loglik(p, batch):
    """``log p(y_i | x_i, t_i, z=k)`` for every row and component."""
    f0, f1 = core.head_outputs(p, batch.x_cont, batch.x_disc)
    t = batch.t
    eta = np.where(t == 1, f1, f0)[:, None] + p.outcome.gamma[None, :] * t[:, None]
    y = batch.y[:, None]
    if p.outcome.outcome_kind == "binary":
        return y * eta - np.logaddexp(0.0, eta)
    s2 = p.outcome.sigma_y ** 2
    return -0.5 * (core.LOG_2PI + np.log(s2)) - (y - eta) ** 2 / (2.0 * s2)


def elbo(p, batch):
    """Sum over rows of ``sum_k p(z=k|x) log p(y|x,t,z=k)``."""
    if batch.n == 0:
        raise InvalidInputError("empty batch")
    r = core.membership_posteriors(p.mixture, batch.x_cont, batch.x_disc)
    ell = component_outcome_loglik(p, batch)
    return float(np.where(r > 0, r * ell, 0.0).sum())


def conditional_log_likelihood(p, batch):
    """Exact ``sum_i log sum_k p(z=k|x_i) p(y_i|x_i,t_i,z=k)``."""
    a = core.component_log_densities(p.mixture, batch.x_cont, batch.x_disc)
    r = core.normalize_log_rows(a)
    with np.errstate(divide="ignore"):
        log_r = np.log(r)
    return float(logsumexp(log_r + component_outcome_loglik(p, batch), axis=1).sum())


def penalized_objective(p, batch, cfg):
    """``elbo(batch) - lam * penalty(pi)``."""
    return elbo(p, batch) - cfg.lam * core.sparsity_penalty(p.mixture.pi, cfg.prior_kind)


def q_objective(p, batch, h, cfg):
    """Penalized expected complete-data log-likelihood under responsibilities ``h``."""
    a = core.component_log_densities(p.mixture, batch.x_cont, batch.x_disc)
    log_r = a - logsumexp(a, axis=1, keepdims=True)
    ell = component_outcome_loglik(p, batch)
    with np.errstate(invalid="ignore"):
        q = np.where(h > 0, h * (log_r + ell), 0.0).sum()
    return float(q) - cfg.lam * core.sparsity_penalty(p.mixture.pi, cfg.prior_kind)


def predict_outcome(p, data):
    """Model mean of the factual outcome, ``sum_k p(z=k|x) E[y|x,t,z=k]``."""
    mu0, mu1, _ = core.potential_outcomes(p, data.x_cont, data.x_disc)
    return np.where(data.t == 1, mu1, mu0)


def pi_zero_fraction(p, threshold=ZERO_PI):
    pi = p.mixture.pi
    return float(np.mean(pi < threshold)) if pi.size else 0.0


def dev_metric(p, data):
    """AU-ROC of the predicted factual outcome (binary) or its RMSE (continuous)."""
    from .evaluation import roc_auc

    pred = predict_outcome(p, data)
    if p.outcome.outcome_kind == "binary":
        if np.unique(data.y).size < 2:
            return float("nan")
        return roc_auc(pred, data.y)[1]
    return float(np.sqrt(np.mean((pred - data.y) ** 2)))


# -- initialization -----------------------------------------------------------


def _pretrain_heads(net, data, cfg, rng):
    """Fit both heads to factual outcomes without the subgroup treatment term."""
    X = data.x
    adam = AdamState(alpha=cfg.pretrain_step, weight_decay=cfg.weight_decay,
                     decay_keys=frozenset(net.params))
    n = data.n
    bs = min(cfg.minibatch, n)
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            grads = net.zeros_like()
            for arm in (0, 1):
                rows = idx[data.t[idx] == arm]
                if rows.size == 0:
                    continue
                f, cache = net.forward_batch(X[rows], arm, return_cache=True)
                if cfg.outcome_kind == "binary":
                    adj = expit(f) - data.y[rows]
                else:
                    adj = f - data.y[rows]
                for name, arr in net.backward(cache, adj).items():
                    grads[name] += arr
            adam_step(adam, net.params, grads)
    return net


def init_params(data, cfg):
    """Initial parameters from data moments, pre-trained heads and positive ``gamma``.

    Every component starts at the sample mean of the covariates with the
    sample (population) variances.  Treatment coefficients are drawn from
    ``(0, 0.1]`` using the ``restarts`` substream indexed by ``cfg.restart``.
    """
    if data.n == 0:
        raise InvalidInputError("cannot initialize from an empty dataset")
    K = cfg.K
    mu = data.x_cont.mean(axis=0)
    var = data.x_cont.var(axis=0)
    if np.any(var < VAR_FLOOR):
        logger.warning("continuous covariates %s have (near) zero variance; floored at %g",
                       [data.cont_names[j] for j in np.flatnonzero(var < VAR_FLOOR)], VAR_FLOOR)
        var = np.maximum(var, VAR_FLOOR * 2)
    pi = data.x_disc.mean(axis=0)
    pi = np.clip(pi, PI_INIT_CLIP, 1.0 - PI_INIT_CLIP)
    init_rng = substream(cfg.seed, "init")
    net = Network(data.d_cont + data.d_disc, cfg.widths, cfg.head_mode, rng=init_rng)
    if cfg.pretrain_epochs:
        _pretrain_heads(net, data, cfg, init_rng)
    gamma = 0.1 - substream(cfg.seed, "restarts", cfg.restart).uniform(0.0, 0.1, size=K)
    return ModelParams(
        MixtureParams(np.tile(mu, (K, 1)), np.tile(var, (K, 1)), np.tile(pi, (K, 1))),
        OutcomeParams(gamma, net, cfg.outcome_kind, cfg.sigma_y),
    )


# -- training -----------------------------------------------------------------

TRACE_COLUMNS = ("epoch", "train_objective", "dev_objective", "dev_metric", "train_nll", "dev_nll")


@dataclass
class Trace:
    """Per-epoch training record; epoch 0 is the initial state.

    Objectives are per-row means of the ELBO (train: minus ``lam *
    penalty / n``), NLLs are per-row exact negative conditional
    log-likelihoods.  Both trainers emit the same columns.
    """

    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, **values):
        self.rows.append({c: values.get(c, float("nan")) for c in TRACE_COLUMNS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in TRACE_COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text


def _record(trace, epoch, theta, layout, train, dev, cfg):
    lam_pen = 0.0
    if cfg.lam:
        lam_pen = cfg.lam * _penalty_and_grad(theta["logit_pi"], cfg.prior_kind)[0]
    tr_elbo, _ = _evaluate(theta, layout, train, "elbo", grad=False)
    tr_ll, _ = _evaluate(theta, layout, train, "loglik", grad=False)
    row = {"epoch": epoch, "train_objective": (tr_elbo - lam_pen) / train.n, "train_nll": -tr_ll / train.n}
    _check_finite(tr_elbo, theta, where=f" at epoch {epoch}")
    if dev is not None and dev.n:
        dv_elbo, _ = _evaluate(theta, layout, dev, "elbo", grad=False)
        dv_ll, _ = _evaluate(theta, layout, dev, "loglik", grad=False)
        row.update(dev_objective=dv_elbo / dev.n, dev_nll=-dv_ll / dev.n,
                   dev_metric=dev_metric(unpack(theta, layout), dev))
    trace.append(**row)
    return row


def _check_run(train, dev, cfg):
    if train.n == 0:
        raise InvalidInputError("training set is empty")
    if cfg.minibatch > train.n:
        raise InvalidInputError(f"minibatch {cfg.minibatch} exceeds training size {train.n}")
    if cfg.early_stop and (dev is None or dev.n == 0):
        raise InvalidInputError("early stopping needs a non-empty dev split")
    if train.outcome_kind != cfg.outcome_kind:
        raise InvalidInputError(
            f"data outcome is {train.outcome_kind} but config says {cfg.outcome_kind}")


def _run(train, dev, cfg, init, step_fn):
    _check_run(train, dev, cfg)
    p0 = init if init is not None else init_params(train, cfg)
    layout = _Layout.of(p0, cfg.learn_sigma_y)
    theta = pack(p0, cfg.learn_sigma_y)
    adam = AdamState(alpha=cfg.step_size, weight_decay=cfg.weight_decay,
                     decay_keys=frozenset(k for k in theta if k.startswith("net.")))
    rng = substream(cfg.seed, "shuffle", cfg.restart)
    trace = Trace()
    row = _record(trace, 0, theta, layout, train, dev, cfg)
    best = row.get("dev_objective", -np.inf)
    best_theta = _copy(theta)
    bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train.n)
        for start in range(0, train.n, cfg.minibatch):
            batch = train.subset(order[start:start + cfg.minibatch])
            step_fn(theta, layout, batch, adam)
        row = _record(trace, epoch, theta, layout, train, dev, cfg)
        if not cfg.early_stop:
            best_theta = theta
            trace.best_epoch = epoch
            continue
        if row["dev_objective"] > best:
            best, bad = row["dev_objective"], 0
            best_theta = _copy(theta)
            trace.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                trace.stopped_early = True
                break
    return unpack(best_theta, layout), trace


def _elbo_step(cfg):
    def step(theta, layout, batch, adam):
        value, g = _evaluate(theta, layout, batch, "elbo", cfg.lam, cfg.prior_kind)
        _check_finite(value, theta, g)
        adam_step(adam, theta, {k: -v for k, v in g.items()})
    return step


def train_elbo(train, dev=None, cfg=None, init=None):
    """Maximize the penalized ELBO with minibatch Adam.

    Each epoch visits the shuffled training rows in minibatches.  With
    ``cfg.early_stop`` training halts once the dev ELBO has failed to improve
    for ``cfg.patience`` consecutive epochs and the best-dev parameters are
    returned; otherwise the final parameters are.  Returns
    ``(ModelParams, Trace)``.
    """
    cfg = cfg or TrainConfig()
    return _run(train, dev, cfg, init, _elbo_step(cfg))


def _e_step(theta, layout, batch):
    a, ell, *_ = _forward(theta, layout, batch)
    return core.normalize_log_rows(a + ell, what="responsibility row")


def em_e_step(p, batch):
    """Responsibilities ``h_ik proportional to p(y_i|x_i,t_i,k) p(x_i|k)``, rows normalized."""
    a = core.component_log_densities(p.mixture, batch.x_cont, batch.x_disc)
    return core.normalize_log_rows(a + component_outcome_loglik(p, batch), what="responsibility row")


def _m_step(theta, layout, batch, h, cfg, adam, max_halvings=30):
    """``cfg.m_step_iters`` Adam steps on Q, each backtracked until Q does not drop."""
    for _ in range(cfg.m_step_iters):
        q0, g = _evaluate(theta, layout, batch, "q", cfg.lam, cfg.prior_kind, h=h)
        _check_finite(q0, theta, g)
        old = _copy(theta)
        adam_step(adam, theta, {k: -v for k, v in g.items()})
        delta = {k: theta[k] - old[k] for k in theta}
        scale = 1.0
        for _ in range(max_halvings):
            q1, _ = _evaluate(theta, layout, batch, "q", cfg.lam, cfg.prior_kind, h=h, grad=False)
            if q1 >= q0:
                break
            scale *= 0.5
            for k in theta:
                theta[k][...] = old[k] + scale * delta[k]
        else:
            for k in theta:
                theta[k][...] = old[k]
    return theta


def em_m_step(p, batch, h, cfg, adam=None):
    """Improve the penalized Q for fixed responsibilities ``h``.

    Runs ``cfg.m_step_iters`` Adam ascent steps; a step that would lower Q
    is halved until it does not, so Q never decreases.  Pass ``adam`` to
    carry moment estimates across calls.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (batch.n, p.K) or not np.allclose(h.sum(axis=1), 1.0, atol=1e-9) or np.any(h < 0):
        raise InvalidInputError("responsibilities must be an (n, K) row-stochastic array")
    layout = _Layout.of(p, cfg.learn_sigma_y)
    theta = pack(p, cfg.learn_sigma_y)
    if adam is None:
        adam = AdamState(alpha=cfg.step_size, weight_decay=cfg.weight_decay,
                         decay_keys=frozenset(k for k in theta if k.startswith("net.")))
    return unpack(_m_step(theta, layout, batch, h, cfg, adam), layout)


def _em_step(cfg):
    def step(theta, layout, batch, adam):
        h = _e_step(theta, layout, batch)
        _m_step(theta, layout, batch, h, cfg, adam)
    return step


def train_em(train, dev=None, cfg=None, init=None):
    """Minibatch EM: an E-step and a gradient M-step on every minibatch.

    Same stopping rule and :class:`Trace` schema as :func:`train_elbo`.
    """
    cfg = cfg or TrainConfig()
    return _run(train, dev, cfg, init, _em_step(cfg))


TRAINERS = {"elbo": train_elbo, "em": train_em}


# -- grid search --------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    Ks: tuple = (2, 3, 4)
    lams: tuple = (0.0, 1e-3, 1e-2, 1e-1)
    restarts: int = 5
    head_modes: tuple = ("separate", "shared")

    def cells(self):
        return [(K, lam, r, mode) for K in self.Ks for lam in self.lams
                for r in range(self.restarts) for mode in self.head_modes]


def _sort_key(binary):
    def key(rec):
        m = rec["dev_metric"]
        if np.isnan(m):
            m_key = np.inf
        else:
            m_key = -m if binary else m
        return (m_key, rec["K"], rec["lambda"], rec["restart"], rec["head_mode"])
    return key


def grid_search(train, dev, cfg=None, grid=None, trainer="elbo", checkpoint_dir=None, n_jobs=1):
    """Train every grid cell and rank them on the dev split.

    Cells vary ``K``, ``lam``, the restart index (initial ``gamma``) and the
    head mode.  Binary outcomes are ranked by dev AU-ROC (higher first),
    continuous ones by dev RMSE (lower first); ties go to smaller ``K``,
    then smaller ``lam``.  Returns ``(best ModelParams, leaderboard)``
    where the leaderboard is a list of dicts in rank order.
    """
    from .checkpoint import save_params

    cfg = cfg or TrainConfig()
    grid = grid or Grid(restarts=cfg.restarts)
    cells = grid.cells()
    if not cells:
        raise InvalidInputError("empty grid")
    if dev is None or dev.n == 0:
        raise InvalidInputError("grid search needs a dev split")
    fit = TRAINERS[trainer]

    def run(cell):
        K, lam, r, mode = cell
        cell_cfg = replace(cfg, K=K, lam=lam, restart=r, head_mode=mode)
        p, trace = fit(train, dev, cell_cfg)
        rec = {
            "K": K, "lambda": lam, "restart": r, "head_mode": mode,
            "dev_metric": dev_metric(p, dev),
            "pi_zero_fraction": pi_zero_fraction(p),
            "epochs": len(trace.rows) - 1,
            "checkpoint": None,
        }
        if checkpoint_dir is not None:
            path = f"{checkpoint_dir}/K{K}_lam{lam:g}_r{r}_{mode}.ckpt"
            save_params(p, path)
            rec["checkpoint"] = path
        return rec, p

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    order = sorted(range(len(results)), key=lambda i: _sort_key(cfg.outcome_kind == "binary")(results[i][0]))
    board = [results[i][0] for i in order]
    return results[order[0]][1], board
