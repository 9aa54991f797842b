"""Small feedforward outcome networks with two treatment heads.

The network maps covariates ``x`` to one scalar per treatment arm.  Two
parameterizations are supported:

``separate``
    Each arm owns a complete network (``arm0.*`` and ``arm1.*``).
``shared``
    Hidden layers are shared (``trunk.*``) and each arm owns a scalar
    output layer (``head0.*`` and ``head1.*``).

With no hidden layers both modes reduce to two independent linear maps.
Hidden layers use the rectifier, outputs are linear.  Weights are stored
as ``(fan_in, fan_out)`` arrays so a batch ``X`` maps as ``X @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

MODES = ("separate", "shared")
HEAD_TYPES = {"linear": (), "mlp1": (16,), "mlp2": (16, 8)}


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Network:
    """Two-headed rectifier network ``f(x; w_t)``.

    Parameters
    ----------
    d_in : int
        Input dimension.
    hidden : sequence of int
        Hidden layer widths; empty for a linear model.
    mode : {"separate", "shared"}
        Whether arms own disjoint parameters or share the hidden trunk.
    params : dict, optional
        Parameter arrays keyed by name.  Drawn with Glorot-uniform weights
        and zero biases when omitted.
    rng : numpy.random.Generator, optional
        Source of randomness for the initial weights.
    """

    def __init__(self, d_in, hidden=(), mode="separate", params=None, rng=None):
        if mode not in MODES:
            raise InvalidInputError(f"unknown network mode {mode!r}")
        if d_in < 0 or any(int(h) < 1 for h in hidden):
            raise InvalidInputError("layer widths must be positive")
        self.d_in = int(d_in)
        self.hidden = tuple(int(h) for h in hidden)
        self.mode = mode
        shapes = self.param_shapes()
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = {}
            for name, shape in shapes.items():
                if ".W" in name:
                    params[name] = _glorot(rng, *shape)
                else:
                    params[name] = np.zeros(shape)
        else:
            params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
            if set(params) != set(shapes):
                raise InvalidInputError(
                    f"parameter names {sorted(params)} do not match topology {sorted(shapes)}"
                )
            for name, shape in shapes.items():
                if params[name].shape != shape:
                    raise InvalidInputError(
                        f"{name} has shape {params[name].shape}, expected {shape}"
                    )
        self.params = params

    @property
    def widths(self):
        return (self.d_in, *self.hidden, 1)

    def param_shapes(self):
        """Names and shapes of every trainable array, in a fixed order."""
        widths = self.widths
        n_layers = len(widths) - 1
        shapes = {}
        if self.mode == "separate":
            for t in (0, 1):
                for l in range(n_layers):
                    shapes[f"arm{t}.W{l}"] = (widths[l], widths[l + 1])
                    shapes[f"arm{t}.b{l}"] = (widths[l + 1],)
        else:
            for l in range(n_layers - 1):
                shapes[f"trunk.W{l}"] = (widths[l], widths[l + 1])
                shapes[f"trunk.b{l}"] = (widths[l + 1],)
            for t in (0, 1):
                shapes[f"head{t}.W"] = (widths[-2], 1)
                shapes[f"head{t}.b"] = (1,)
        return shapes

    def _layers(self, head):
        """Ordered ``(W name, b name)`` pairs along the path of one head."""
        n_layers = len(self.widths) - 1
        if self.mode == "separate":
            return [(f"arm{head}.W{l}", f"arm{head}.b{l}") for l in range(n_layers)]
        path = [(f"trunk.W{l}", f"trunk.b{l}") for l in range(n_layers - 1)]
        return path + [(f"head{head}.W", f"head{head}.b")]

    def copy(self):
        return Network(self.d_in, self.hidden, self.mode,
                       params={k: v.copy() for k, v in self.params.items()})

    def with_params(self, params):
        return Network(self.d_in, self.hidden, self.mode, params=params)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward_batch(self, X, head, return_cache=False):
        """Evaluate one head on every row of ``X``; returns shape ``(n,)``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise InvalidInputError(
                f"expected inputs of shape (n, {self.d_in}), got {X.shape}"
            )
        if head not in (0, 1):
            raise InvalidInputError(f"head must be 0 or 1, got {head!r}")
        layers = self._layers(head)
        acts = [X]
        pre = []
        h = X
        for i, (wn, bn) in enumerate(layers):
            z = h @ self.params[wn] + self.params[bn]
            if i < len(layers) - 1:
                pre.append(z)
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        out = h[:, 0]
        if return_cache:
            return out, (head, acts, pre)
        return out

    def backward(self, cache, adjoint):
        """Reverse-mode gradient of ``sum_i adjoint_i * f(x_i)``.

        Returns a full parameter-shaped dict; arrays off the active path
        are zero.
        """
        head, acts, pre = cache
        layers = self._layers(head)
        grads = self.zeros_like()
        delta = np.asarray(adjoint, dtype=float).reshape(-1, 1)
        for i in range(len(layers) - 1, -1, -1):
            wn, bn = layers[i]
            grads[wn] = acts[i].T @ delta
            grads[bn] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[wn].T) * (pre[i - 1] > 0)
        return grads

    def min_abs_preactivation(self, X, head):
        """Distance of the nearest hidden pre-activation from the kink at 0."""
        _, (_, _, pre) = self.forward_batch(X, head, return_cache=True)
        if not pre:
            return np.inf
        return min(float(np.min(np.abs(z))) for z in pre)


def forward(net, x, head):
    """Scalar output of ``head`` at a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError("forward expects a single input vector")
    return float(net.forward_batch(x[None, :], head)[0])


def gradient(net, adjoint, x, head):
    """Gradient of ``adjoint * f(x; w_head)`` for every network parameter."""
    x = np.asarray(x, dtype=float)
    _, cache = net.forward_batch(x[None, :], head, return_cache=True)
    return net.backward(cache, np.array([adjoint], dtype=float))


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters for :func:`adam_step`.

    ``decay_keys`` names the parameters that receive weight decay.
    """

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_keys: frozenset = frozenset()
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected Adam descent step, updating ``params`` in place.

    Parameters without an entry in ``grads`` are left alone apart from
    weight decay.  Decay is decoupled: ``p -= alpha * weight_decay * p``.
    Returns ``(params, state)``.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.alpha * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if state.weight_decay:
        shrink = state.alpha * state.weight_decay
        for name in state.decay_keys:
            params[name] -= shrink * params[name]
    return params, state


def _flat(d, names):
    return np.concatenate([d[n].ravel() for n in names])


def _pattern(net, x, head):
    _, (_, _, pre) = net.forward_batch(x[None, :], head, return_cache=True)
    return [z > 0 for z in pre]


def _central_differences(trial, names, x, head, adjoint, h):
    """Central differences of ``adjoint * f``; ``None`` if a stencil point crosses a kink."""
    base = _pattern(trial, x, head)
    out = []
    for name in names:
        arr = trial.params[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            values = []
            for step in (h, -h):
                arr[idx] = orig + step
                if any(np.any(a != b) for a, b in zip(_pattern(trial, x, head), base)):
                    arr[idx] = orig
                    return None
                values.append(forward(trial, x, head))
            arr[idx] = orig
            out.append(adjoint * (values[0] - values[1]) / (2.0 * h))
    return np.array(out)


def finite_diff_check(net, trials=100, seed=0, h=1e-5, kink_margin=1e-6):
    """Largest relative gap between analytic and central-difference gradients.

    Each trial redraws every weight of ``net``'s topology, a random input
    and a random head.  An input is redrawn when a hidden pre-activation
    lies within ``kink_margin`` of zero or when any finite-difference
    stencil point flips a rectifier.  The relative error of a trial is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|)`` over the flattened gradient.
    """
    if trials < 1:
        raise InvalidInputError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    names = list(net.param_shapes())
    worst = 0.0
    for _ in range(trials):
        trial = Network(net.d_in, net.hidden, net.mode, rng=rng)
        for name in names:
            if ".b" in name:
                trial.params[name] = rng.normal(scale=0.5, size=trial.params[name].shape)
        head = int(rng.integers(2))
        adjoint = rng.normal()
        numeric = None
        while numeric is None:
            x = rng.normal(size=net.d_in)
            if trial.min_abs_preactivation(x[None, :], head) <= kink_margin:
                continue
            numeric = _central_differences(trial, names, x, head, adjoint, h)
        analytic = _flat(gradient(trial, adjoint, x, head), names)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
