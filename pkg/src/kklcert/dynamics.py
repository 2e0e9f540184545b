"""Benchmark systems and fixed-step RK4 integration.

Vector fields are written component-wise (a function of the state components
returning a list of components), which lets one definition serve point
evaluation, interval extension and affine-arithmetic extension.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .arith import AffineForm, Interval, join, split


class IntegrationDiverged(RuntimeError):
    """Raised when a trajectory becomes non-finite or leaves the guard box."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-D vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self):
        return self.upper - self.lower

    def volume(self):
        return float(np.prod(self.widths))

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def corners(self):
        grids = np.meshgrid(*[[l, u] for l, u in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lower"], d["upper"])


@dataclass
class Trajectory:
    t0: float
    dt: float
    states: np.ndarray
    outputs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or len(self.states) == 0:
            raise ValueError("trajectory needs a non-empty (n_samples, n_x) state array")

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.states))

    def __len__(self):
        return len(self.states)

    def to_csv(self, path):
        n = self.states.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)]
        cols = [self.times[:, None], self.states]
        if self.outputs is not None:
            header += [f"y{i + 1}" for i in range(self.outputs.shape[1])]
            cols.append(self.outputs)
        data = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow([f"{v:.17g}" for v in row])


@dataclass
class SystemModel:
    """Autonomous plant ``xdot = f(x)``, ``y = h(x)``.

    ``drift_fn`` and ``output_fn`` take the state components as positional
    arguments and return a list of components; they must only use ``+ - *``,
    integer powers and scalar constants so that they extend to intervals and
    affine forms.
    """

    name: str
    state_dim: int
    output_dim: int
    drift_fn: Callable
    output_fn: Callable
    params: dict = field(default_factory=dict)
    energy_fn: Optional[Callable] = None
    # c -> (lower, upper) bounding box of the sublevel set {energy <= c}
    energy_box: Optional[Callable] = None

    def _apply(self, fn, x):
        return join(fn(*split(x, self.state_dim)))

    def drift(self, x):
        return self._apply(self.drift_fn, np.asarray(x, dtype=float))

    def output(self, x):
        return self._apply(self.output_fn, np.asarray(x, dtype=float))

    def drift_interval(self, box):
        return self._apply(self.drift_fn, _as_interval(box))

    def output_interval(self, box):
        return self._apply(self.output_fn, _as_interval(box))

    def drift_affine(self, form: AffineForm):
        return self._apply(self.drift_fn, form)

    def output_affine(self, form: AffineForm):
        return self._apply(self.output_fn, form)

    def energy(self, x):
        if self.energy_fn is None:
            raise AttributeError(f"{self.name} has no conserved energy")
        return self.energy_fn(*split(np.asarray(x, dtype=float), self.state_dim))

    def describe(self):
        return {"name": self.name, "state_dim": self.state_dim,
                "output_dim": self.output_dim, **self.params}


def _as_interval(box):
    if isinstance(box, Interval):
        return box
    if isinstance(box, Box):
        return Interval(box.lower, box.upper)
    lo, hi = box
    return Interval(lo, hi)


def reverse_duffing():
    return SystemModel(
        name="reverse_duffing", state_dim=2, output_dim=1,
        drift_fn=lambda x1, x2: [x2 ** 3, -x1],
        output_fn=lambda x1, x2: [x1],
        energy_fn=lambda x1, x2: 0.5 * x1 ** 2 + 0.25 * x2 ** 4,
        energy_box=lambda c: (np.array([-np.sqrt(2 * c), -(4 * c) ** 0.25]),
                              np.array([np.sqrt(2 * c), (4 * c) ** 0.25])),
    )


def van_der_pol(mu=1.0):
    mu = float(mu)
    return SystemModel(
        name="van_der_pol", state_dim=2, output_dim=1,
        drift_fn=lambda x1, x2: [x2, mu * ((1.0 - x1 ** 2) * x2) - x1],
        output_fn=lambda x1, x2: [x1],
        params={"mu": mu},
    )


def linear_system(F, H, name="linear"):
    """``xdot = F x``, ``y = H x``; used for exact-solution regressions."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n, m = F.shape[0], H.shape[0]

    def lin(M):
        def fn(*xs):
            return [sum(M[i, j] * xs[j] for j in range(n) if M[i, j] != 0.0) + 0.0 * xs[0]
                    for i in range(M.shape[0])]
        return fn

    return SystemModel(name=name, state_dim=n, output_dim=m, drift_fn=lin(F),
                       output_fn=lin(H), params={"F": F.tolist(), "H": H.tolist()})


SYSTEMS = {"reverse_duffing": reverse_duffing, "van_der_pol": van_der_pol}


def make_system(name, **params):
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return factory(**params)


def rk4_integrate(rhs, y0, dt, n_steps, record_every=1, guard=None, inputs=None):
    """Batched classical RK4 with a fixed step.

    ``y0`` has shape ``(K, d)``.  ``inputs`` (optional, shape ``(n_steps, K, q)``)
    is held constant over each step and passed as ``rhs(y, u)``.  Rows that
    become non-finite or exceed ``guard`` in max-norm are frozen as NaN.

    Returns ``(samples, diverged_step)`` where ``samples`` has shape
    ``(n_steps // record_every + 1, K, d)`` and ``diverged_step[k]`` is the
    first bad step index for row ``k`` (``-1`` if none).
    """
    if dt <= 0 or n_steps < 1:
        raise ValueError("need dt > 0 and n_steps >= 1")
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim != 2:
        raise ValueError("y0 must have shape (K, d)")
    K = y.shape[0]
    n_rec = n_steps // record_every + 1
    out = np.empty((n_rec,) + y.shape)
    out[0] = y
    bad = np.full(K, -1)
    h2, h6 = 0.5 * dt, dt / 6.0
    for step in range(n_steps):
        if inputs is None:
            f = rhs
        else:
            u = inputs[step]
            f = lambda v, u=u: rhs(v, u)  # noqa: E731
        k1 = f(y)
        k2 = f(y + h2 * k1)
        k3 = f(y + h2 * k2)
        k4 = f(y + dt * k3)
        y = y + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        with np.errstate(invalid="ignore"):
            off = ~np.all(np.isfinite(y), axis=1)
            if guard is not None:
                off |= np.max(np.abs(y), axis=1) > guard
        newly = off & (bad < 0)
        if newly.any():
            bad[newly] = step + 1
            y[off] = np.nan
        if (step + 1) % record_every == 0:
            out[(step + 1) // record_every] = y
    return out, bad


DEFAULT_GUARD = 1e3


def _integrate(system, x0, dt, n_steps, sign, guard):
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if x0.shape[1] != system.state_dim:
        raise ValueError("initial state has wrong dimension")
    if sign > 0:
        rhs = system.drift
    else:
        rhs = lambda x: -system.drift(x)  # noqa: E731
    with np.errstate(over="ignore", invalid="ignore"):
        samples, bad = rk4_integrate(rhs, x0, dt, n_steps, guard=guard)
    if bad[0] >= 0:
        raise IntegrationDiverged(int(bad[0]))
    return samples[:, 0, :]


def integrate_forward(system, x0, dt, n_steps, guard=DEFAULT_GUARD):
    states = _integrate(system, x0, dt, n_steps, +1, guard)
    return Trajectory(0.0, dt, states, system.output(states))


def integrate_backward(system, x0, dt, n_steps, guard=DEFAULT_GUARD):
    """Backward solution on ``[-n_steps*dt, 0]``; the last sample equals ``x0``."""
    states = _integrate(system, x0, dt, n_steps, -1, guard)[::-1].copy()
    return Trajectory(-n_steps * dt, dt, states, system.output(states))


def sample_box(box: Box, count, seed=None):
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return box.lower + rng.random((count, box.dim)) * box.widths


def sample_boxes(boxes: Sequence[Box], count, seed=None):
    """Uniform samples from a union of boxes (volume-weighted, overlaps ignored)."""
    rng = np.random.default_rng(seed)
    vols = np.array([max(b.volume(), 1e-300) for b in boxes])
    which = rng.choice(len(boxes), size=count, p=vols / vols.sum())
    lo = np.stack([b.lower for b in boxes])[which]
    hi = np.stack([b.upper for b in boxes])[which]
    return lo + rng.random(lo.shape) * (hi - lo)


def limit_cycle(system, x0=(2.0, 0.0), dt=1e-3, settle=60.0, span=15.0):
    """One period of an attracting limit cycle, as an ``(N, n_x)`` closed polyline.

    The period is detected from successive downward crossings of ``x2 = 0`` with
    ``x1 > 0``.
    """
    settle_steps = int(round(settle / dt))
    start = integrate_forward(system, x0, dt, settle_steps).states[-1]
    orbit = integrate_forward(system, start, dt, int(round(span / dt))).states
    x1, x2 = orbit[:, 0], orbit[:, 1]
    up = np.nonzero((x2[:-1] > 0) & (x2[1:] <= 0) & (x1[1:] > 0))[0]
    if len(up) < 2:
        raise RuntimeError("no periodic orbit detected; increase span")
    return orbit[up[0] + 1:up[1] + 2]
