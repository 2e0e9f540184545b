"""Learned KKL observer: PDE residual, closed-loop simulation, error envelopes."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import Box, rk4_integrate, sample_boxes
from .linalg import ObserverDesign
from .net import Mlp


@dataclass
class LearnedObserver:
    design: ObserverDesign
    forward_net: Mlp
    inverse_net: Mlp
    z0: Optional[np.ndarray] = None

    def __post_init__(self):
        nz = self.design.n_z
        if self.forward_net.output_dim != nz or self.inverse_net.input_dim != nz:
            raise ValueError("network dimensions do not match the observer dimension")
        if self.inverse_net.output_dim != self.forward_net.input_dim:
            raise ValueError("inverse network must map back to the state space")
        self.z0 = np.zeros(nz) if self.z0 is None else np.asarray(self.z0, dtype=float)

    @property
    def state_dim(self):
        return self.forward_net.input_dim


@dataclass
class NoiseSpec:
    """Bounded measurement noise, ``||v(t)|| <= vbar``, zero-order hold per step."""

    vbar: float
    seed: int = 0

    def __post_init__(self):
        if self.vbar < 0:
            raise ValueError("noise bound must be non-negative")

    def realize(self, n_steps, n_y, rng):
        """Uniform in the cube, then rescaled onto the ball where it pokes out."""
        v = rng.uniform(-self.vbar, self.vbar, size=(n_steps, n_y))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        over = norms > self.vbar
        v = np.where(over, v * (self.vbar / np.where(over, norms, 1.0)), v)
        # the rescale can land an ulp outside the ball; step inward until it does not
        for _ in range(8):
            over = np.linalg.norm(v, axis=1) > self.vbar
            if not over.any():
                break
            v[over] *= 1.0 - 2.0 ** -52
        return v


def exact_linear_observer(F, H, design: ObserverDesign):
    """Observer for ``xdot = F x, y = H x`` with the exact linear map.

    ``T`` solves ``T F - A T = B H``; the inverse is its pseudo-inverse.
    """
    from scipy.linalg import solve_sylvester
    F = np.atleast_2d(np.asarray(F, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    T = solve_sylvester(-design.A, F, design.B @ H)
    return LearnedObserver(design, Mlp.linear(T), Mlp.linear(np.linalg.pinv(T)))


def residual(net: Mlp, design: ObserverDesign, system, x):
    """``dT/dx(x) f(x) - A T(x) - B h(x)`` for a batch of states."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    T, Jf, _ = net.forward_tangent(x, system.drift(x))
    return Jf - T @ design.A.T - system.output(x) @ design.B.T


def pde_residual(observer: LearnedObserver, system, x):
    x = np.asarray(x, dtype=float)
    R = residual(observer.forward_net, observer.design, system, x)
    return R[0] if x.ndim == 1 else R


@dataclass
class ObserverRun:
    times: np.ndarray
    x: np.ndarray          # (n_rec, K, n_x)
    zhat: np.ndarray       # (n_rec, K, n_z)
    xhat: np.ndarray       # (n_rec, K, n_x)
    error: np.ndarray      # (n_rec, K)
    diverged: np.ndarray   # (K,) first bad step or -1
    noise: Optional[np.ndarray] = None   # (n_steps, K, n_y)

    def error_z(self, observer):
        """``||zhat - T(x)||`` along the run."""
        Tx = observer.forward_net(self.x.reshape(-1, self.x.shape[-1])).reshape(self.zhat.shape)
        return np.linalg.norm(self.zhat - Tx, axis=-1)


def _noise_batch(noise, n_steps, K, n_y):
    if noise is None:
        return None
    seqs = np.random.SeedSequence(noise.seed).spawn(K)
    return np.stack([noise.realize(n_steps, n_y, np.random.default_rng(s)) for s in seqs], axis=1)


def simulate_batch(observer: LearnedObserver, system, X0, dt, n_steps, noise=None,
                   record_every=1, guard=1e3):
    """Co-integrate the plant and the observer from each row of ``X0``."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    K, nx = X0.shape
    A, B = observer.design.A, observer.design.B
    ny = B.shape[1]

    def rhs(y, u=None):
        x, z = y[:, :nx], y[:, nx:]
        meas = system.output(x)
        if u is not None:
            meas = meas + u
        return np.hstack([system.drift(x), z @ A.T + meas @ B.T])

    inputs = _noise_batch(noise, n_steps, K, ny)
    y0 = np.hstack([X0, np.tile(observer.z0, (K, 1))])
    with np.errstate(over="ignore", invalid="ignore"):
        samples, bad = rk4_integrate(rhs, y0, dt, n_steps, record_every, guard, inputs)
    x, zhat = samples[..., :nx], samples[..., nx:]
    xhat = observer.inverse_net(zhat.reshape(-1, zhat.shape[-1])).reshape(x.shape)
    err = np.linalg.norm(xhat - x, axis=-1)
    times = dt * record_every * np.arange(samples.shape[0])
    return ObserverRun(times, x, zhat, xhat, err, bad, inputs)


def simulate_observer(observer, system, x0, dt, horizon, noise=None, record_every=1):
    n_steps = int(round(horizon / dt))
    return simulate_batch(observer, system, np.reshape(x0, (1, -1)), dt, n_steps, noise,
                          record_every)


@dataclass
class EnvelopeResult:
    envelope: float
    per_trajectory: np.ndarray
    n_excluded: int
    transient: float
    peak_output: float
    run: ObserverRun


def empirical_error_envelope(observer, system, initial, n_trajectories, dt, horizon,
                             transient, noise=None, seed=0, record_every=10):
    """Max over trajectories of ``sup_{t >= transient} ||xhat(t) - x(t)||``.

    ``initial`` is a ``Box``, a list of boxes, or an explicit array of initial
    states.  Divergent trajectories are excluded and counted.
    """
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    if isinstance(initial, Box):
        initial = [initial]
    if isinstance(initial, (list, tuple)) and initial and isinstance(initial[0], Box):
        X0 = sample_boxes(initial, n_trajectories, seed)
    else:
        X0 = np.atleast_2d(np.asarray(initial, dtype=float))[:n_trajectories]
    n_steps = int(round(horizon / dt))
    record_every = max(1, min(record_every, n_steps))
    run = simulate_batch(observer, system, X0, dt, n_steps, noise, record_every)
    ok = run.diverged < 0
    after = run.times >= transient - 1e-12
    if not after.any():
        after[-1] = True
    per = np.where(ok, np.max(np.where(after[:, None], run.error, -np.inf), axis=0), np.nan)
    peak = float(np.nanmax(np.abs(system.output(run.x[:, ok].reshape(-1, X0.shape[1]))))) \
        if ok.any() else float("nan")
    env = float(np.nanmax(per)) if ok.any() else float("nan")
    return EnvelopeResult(env, per, int((~ok).sum()), float(transient), peak, run)


def error_dynamics_defect(observer, system, x0, dt, horizon, noise=None):
    """Check ``d/dt e_z = A e_z - R(x) + B v`` along a simulated trajectory.

    Over each step the noise is constant, so the difference quotient of
    ``e_z`` is compared with the trapezoidal average of the right-hand side;
    the mismatch is ``O(dt^2)``.  Returns ``(max defect, max defect / dt^2)``.
    """
    run = simulate_observer(observer, system, x0, dt, horizon, noise)
    x = run.x[:, 0, :]
    zhat = run.zhat[:, 0, :]
    net, A, B = observer.forward_net, observer.design.A, observer.design.B
    ez = zhat - net(x)
    R = residual(net, observer.design, system, x)
    v = np.zeros((len(x) - 1, B.shape[1])) if run.noise is None else run.noise[:, 0, :]
    rhs_lo = ez[:-1] @ A.T - R[:-1] + v @ B.T
    rhs_hi = ez[1:] @ A.T - R[1:] + v @ B.T
    quotient = (ez[1:] - ez[:-1]) / dt
    defect = float(np.max(np.linalg.norm(quotient - 0.5 * (rhs_lo + rhs_hi), axis=1)))
    return defect, defect / dt ** 2
