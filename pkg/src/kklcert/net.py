"""Dense tanh networks with exact gradients, plus Adam and L-BFGS.

The forward pass optionally carries a tangent (forward-mode directional
derivative ``J(x) v``), so a loss of both the output and ``J(x) v`` can be
differentiated with respect to the parameters by a single reverse sweep.
That is what the PDE-residual term of the observer loss needs.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.optimize import line_search


@dataclass
class Mlp:
    """Feed-forward network: tanh on hidden layers, identity on the last."""

    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.weights = [np.array(W, dtype=float) for W in self.weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of layers does not match layer_dims")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[k + 1], self.layer_dims[k])
            if W.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {k}: expected W{shape}, got W{W.shape} b{b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")

    @classmethod
    def init(cls, layer_dims, seed=0):
        """Xavier-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            lim = np.sqrt(6.0 / (din + dout))
            weights.append(rng.uniform(-lim, lim, size=(dout, din)))
            biases.append(np.zeros(dout))
        return cls(list(layer_dims), weights, biases, seed=seed)

    @classmethod
    def linear(cls, W, b=None):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        b = np.zeros(W.shape[0]) if b is None else b
        return cls([W.shape[1], W.shape[0]], [W], [b])

    @classmethod
    def zeros(cls, layer_dims):
        return cls(list(layer_dims),
                   [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
                   [np.zeros(o) for o in layer_dims[1:]])

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def copy(self):
        return Mlp(self.layer_dims, [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.seed, dict(self.meta))

    # -- parameters ---------------------------------------------------------

    def get_flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in
                               zip(self.weights, self.biases)])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for k, W in enumerate(self.weights):
            n = W.size
            self.weights[k] = theta[pos:pos + n].reshape(W.shape).copy()
            pos += n
            m = self.biases[k].size
            self.biases[k] = theta[pos:pos + m].copy()
            pos += m
        if pos != theta.size:
            raise ValueError("parameter vector has wrong length")

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    # -- evaluation ---------------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        return x

    def forward(self, x):
        x = self._check(x)
        a = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W.T + b)
        return a @ self.weights[-1].T + self.biases[-1]

    __call__ = forward

    def forward_tangent(self, x, v=None):
        """Return ``(net(x), J(x) v, cache)`` for batched ``x`` and direction ``v``.

        With ``v=None`` only the plain forward pass is cached and ``J(x) v`` is ``None``.
        """
        a = self._check(x)
        t = None if v is None else np.asarray(v, dtype=float)
        acts, tans, sdots = [a], [t], [None]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W.T + b)
            acts.append(a)
            if t is not None:
                sd = t @ W.T
                t = (1.0 - a * a) * sd
                sdots.append(sd)
                tans.append(t)
        W, b = self.weights[-1], self.biases[-1]
        dout = None if t is None else t @ W.T
        return a @ W.T + b, dout, (acts, tans, sdots)

    def tangent_backward(self, cache, g_out, g_dout=None):
        """Reverse sweep through :meth:`forward_tangent`; returns the flat gradient."""
        acts, tans, sdots = cache
        if tans[0] is None:
            g_dout = None
        L = self.n_layers
        grads = [None] * L
        a_bar, t_bar = g_out, g_dout
        for k in range(L - 1, -1, -1):
            W = self.weights[k]
            if k == L - 1:
                s_bar, sd_bar = a_bar, t_bar
            else:
                a = acts[k + 1]
                d = 1.0 - a * a
                if t_bar is None:
                    s_bar, sd_bar = a_bar * d, None
                else:
                    s_bar = (a_bar - 2.0 * a * sdots[k + 1] * t_bar) * d
                    sd_bar = d * t_bar
            dW = s_bar.T @ acts[k]
            if sd_bar is not None:
                dW = dW + sd_bar.T @ tans[k]
            grads[k] = (dW, s_bar.sum(axis=0))
            a_bar = s_bar @ W
            t_bar = None if sd_bar is None else sd_bar @ W
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])

    def input_jacobian(self, x):
        """Exact Jacobian ``d net / d x``: ``(d_L, d_0)`` or batched ``(N, d_L, d_0)``."""
        x = self._check(x)
        single = x.ndim == 1
        a = np.atleast_2d(x)
        J = np.broadcast_to(np.eye(self.input_dim), (a.shape[0],) + (self.input_dim,) * 2)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W.T + b)
            J = (1.0 - a * a)[:, :, None] * np.einsum("ij,njk->nik", W, J)
        J = np.einsum("ij,njk->nik", self.weights[-1], J)
        return J[0] if single else J

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {"layer_dims": self.layer_dims, "activation": "tanh",
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases],
                "seed": self.seed, **self.meta}

    @classmethod
    def from_dict(cls, d):
        if d.get("activation", "tanh") != "tanh":
            raise ValueError("only tanh networks are supported")
        known = {"layer_dims", "activation", "weights", "biases", "seed"}
        return cls(d["layer_dims"], d["weights"], d["biases"], d.get("seed"),
                   {k: v for k, v in d.items() if k not in known})

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self):
        return hashlib.sha256(self.get_flat().tobytes()).hexdigest()[:16]


def compose(first: Mlp, second: Mlp) -> Mlp:
    """The tanh network computing ``second(first(x))``.

    The last (affine) layer of ``first`` is merged into the first layer of
    ``second``.
    """
    if first.output_dim != second.input_dim:
        raise ValueError("dimension mismatch in composition")
    W = second.weights[0] @ first.weights[-1]
    b = second.weights[0] @ first.biases[-1] + second.biases[0]
    dims = first.layer_dims[:-1] + second.layer_dims[1:]
    return Mlp(dims, first.weights[:-1] + [W] + second.weights[1:],
               first.biases[:-1] + [b] + second.biases[1:])


def loss_gradient(net: Mlp, x, loss_fn, v=None):
    """Value and flat parameter gradient of ``loss_fn(net(x), J(x) v)``.

    ``loss_fn(out, dout)`` returns ``(value, d value / d out, d value / d dout)``;
    ``dout`` is ``None`` when no direction ``v`` is given.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, dout, cache = net.forward_tangent(x, v)
    value, g_out, g_dout = loss_fn(out, dout)
    return value, net.tangent_backward(cache, g_out, g_dout)


# -- optimizers ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0


def adam_step(state: AdamState, net, grad):
    """One bias-corrected Adam update, applied to an ``Mlp`` or a parameter array.

    Returns the updated parameters (the same ``Mlp`` object, modified in place,
    or a new array).
    """
    is_net = isinstance(net, Mlp)
    theta = net.get_flat() if is_net else np.asarray(net, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    if state.m.shape != theta.shape:
        raise ValueError("optimizer state does not match parameter shape")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    theta = theta - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if is_net:
        net.set_flat(theta)
        return net
    return theta


@dataclass
class LbfgsState:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = 25
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)

    def push(self, s, y):
        if y @ s <= 1e-12 * (y @ y):
            return
        self.s_hist.append(s)
        self.y_hist.append(y)
        if len(self.s_hist) > self.memory:
            self.s_hist.pop(0)
            self.y_hist.pop(0)

    def direction(self, g):
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((rho, a))
            q -= a * y
        if self.s_hist:
            s, y = self.s_hist[-1], self.y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y), (rho, a) in zip(zip(self.s_hist, self.y_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    n_iter: int
    status: str
    history: list


def lbfgs_minimize(fun: Callable, x0, state: Optional[LbfgsState] = None,
                   max_iters=100, gtol=1e-8):
    """Minimize ``fun(x) -> (value, gradient)`` with L-BFGS and a strong-Wolfe search.

    Accepted iterates have non-increasing loss.  ``status`` is one of
    ``"converged"``, ``"max_iters"`` or ``"line_search_failed"``; in every case
    the last accepted iterate is returned.
    """
    state = state or LbfgsState()
    x = np.array(x0, dtype=float, copy=True)
    f, g = fun(x)
    history = [float(f)]
    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fun(z)
        return cache[key]

    old_old = None
    status = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) <= gtol:
            status = "converged"
            it -= 1
            break
        p = state.direction(g)
        if p @ g >= 0:
            state.s_hist.clear()
            state.y_hist.clear()
            p = -g
        if old_old is None:
            old_old = f + 0.5 * np.linalg.norm(g)
        with warnings.catch_warnings():
            # scipy signals a failed search with a RuntimeWarning subclass and alpha None
            warnings.simplefilter("ignore", RuntimeWarning)
            alpha, _, _, f_new, _, _ = line_search(
                lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, p, gfk=g,
                old_fval=f, old_old_fval=old_old, c1=state.c1, c2=state.c2,
                maxiter=state.max_ls)
        if alpha is None or f_new is None or not np.isfinite(f_new) or f_new > f:
            status = "line_search_failed"
            it -= 1
            break
        x_new = x + alpha * p
        f_new, g_new = evaluate(x_new)
        state.push(x_new - x, g_new - g)
        old_old, f = f, f_new
        x, g = x_new, g_new
        history.append(float(f))
    return LbfgsResult(x, float(f), it, status, history)
