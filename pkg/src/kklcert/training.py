"""Dataset generation and the three-stage observer learning pipeline."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .dynamics import Box, rk4_integrate, sample_boxes
from .kkl import LearnedObserver, residual
from .linalg import ObserverDesign
from .net import AdamState, LbfgsState, Mlp, adam_step, lbfgs_minimize, loss_gradient

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or an unusable dataset."""


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    p: int = 200
    horizon: float = 20.0
    dt: float = 1e-3
    T_b: float = 20.0
    sample_period: float = 0.1
    n_collocation: Optional[int] = None      # collocation initial conditions; None -> p
    nu: float = 1.0
    epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 256
    hidden_layers: int = 3
    width: int = 64
    inverse_hidden_layers: Optional[int] = None
    inverse_width: Optional[int] = None
    finetune_rounds: int = 10
    pool_size: int = 4096
    keep_fraction: float = 0.25
    lbfgs_iters: int = 40
    inverse_samples: int = 20000
    inverse_epochs: int = 30
    boundary_fraction: float = 0.5
    guard: float = 1e3
    max_discard_fraction: float = 0.5
    seed: int = 0

    def validate(self):
        positive = ["p", "horizon", "dt", "T_b", "sample_period", "epochs", "learning_rate",
                    "batch_size", "hidden_layers", "width", "pool_size", "inverse_samples",
                    "inverse_epochs", "guard"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"training.{name} must be positive")
        if self.nu < 0:
            raise ConfigError("training.nu must be non-negative")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("training.keep_fraction must lie in (0, 1]")
        if self.finetune_rounds < 0 or self.lbfgs_iters < 0:
            raise ConfigError("fine-tuning counts must be non-negative")
        return self

    @property
    def record_every(self):
        return max(1, int(round(self.sample_period / self.dt)))

    def forward_dims(self, n_x, n_z):
        return [n_x] + [self.width] * self.hidden_layers + [n_z]

    def inverse_dims(self, n_x, n_z):
        layers = self.inverse_hidden_layers or self.hidden_layers
        width = self.inverse_width or self.width
        return [n_z] + [width] * layers + [n_x]


@dataclass
class KklDataset:
    x: np.ndarray            # (N_data, n_x)
    z: np.ndarray            # (N_data, n_z)
    collocation: np.ndarray  # (N_pde, n_x)
    meta: dict = field(default_factory=dict)

    def save(self, path_pairs, path_colloc=None, path_meta=None):
        nx, nz = self.x.shape[1], self.z.shape[1]
        _write_csv(path_pairs, [f"x{i + 1}" for i in range(nx)] + [f"z{i + 1}" for i in range(nz)],
                   np.hstack([self.x, self.z]))
        if path_colloc:
            _write_csv(path_colloc, [f"x{i + 1}" for i in range(nx)], self.collocation)
        if path_meta:
            with open(path_meta, "w") as fh:
                json.dump(self.meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_pairs, path_colloc=None, path_meta=None):
        header, data = _read_csv(path_pairs)
        nx = sum(h.startswith("x") for h in header)
        colloc = np.empty((0, nx))
        if path_colloc:
            colloc = _read_csv(path_colloc)[1].reshape(-1, nx)
        meta = {}
        if path_meta:
            with open(path_meta) as fh:
                meta = json.load(fh)
        return cls(data[:, :nx], data[:, nx:], colloc, meta)


def _write_csv(path, header, data):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.atleast_2d(data):
            w.writerow([f"{v:.17g}" for v in row])


def _read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return header, data.reshape(-1, len(header))


# -- dataset generation -------------------------------------------------------

def backward_init_batch(system, design: ObserverDesign, X0, T_b, dt, guard=1e3, chunk=64):
    """Truncated backward integral ``int_{-T_b}^0 exp(-A tau) B h(x(tau)) dtau``.

    Each row of ``X0`` is integrated backward and the integral evaluated by the
    composite trapezoid rule on the integration grid.  Returns ``(Z0, ok)``;
    rows whose backward solution diverges get ``ok = False`` and NaN.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    n_steps = int(round(T_b / dt))
    lam = -np.diag(design.A)
    tau = -dt * np.arange(n_steps + 1)           # sample k of the reversed run sits at -k dt
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    kern = w[:, None] * np.exp(lam[None, :] * tau[:, None])   # exp(-A tau), A = -diag(lam)
    Z0 = np.full((len(X0), design.n_z), np.nan)
    ok = np.zeros(len(X0), dtype=bool)
    rev = lambda x: -system.drift(x)  # noqa: E731
    for start in range(0, len(X0), chunk):
        rows = slice(start, start + chunk)
        with np.errstate(over="ignore", invalid="ignore"):
            traj, bad = rk4_integrate(rev, X0[rows], dt, n_steps, guard=guard)
        good = bad < 0
        if good.any():
            y = system.output(traj[:, good, :].reshape(-1, X0.shape[1]))
            y = y.reshape(n_steps + 1, int(good.sum()), -1)
            By = y @ design.B.T                                   # (steps, K, n_z)
            Z0[np.arange(len(X0))[rows][good]] = np.einsum("sk,sjk->jk", kern, By)
        ok[rows] = good
    return Z0, ok


def backward_init(system, design, x0, T_b, dt, guard=1e3):
    """Single-point version of :func:`backward_init_batch`; raises on divergence."""
    from .dynamics import IntegrationDiverged
    Z0, ok = backward_init_batch(system, design, np.reshape(x0, (1, -1)), T_b, dt, guard)
    if not ok[0]:
        raise IntegrationDiverged(-1, "backward solution diverged; discard this point")
    return Z0[0]


def cosimulate(system, design, X0, Z0, dt, n_steps, record_every, guard=1e3):
    """Forward RK4 on the joint ``(x, z)`` system ``zdot = A z + B h(x)``."""
    nx = X0.shape[1]

    def rhs(y):
        x, z = y[:, :nx], y[:, nx:]
        return np.hstack([system.drift(x), z @ design.A.T + system.output(x) @ design.B.T])

    with np.errstate(over="ignore", invalid="ignore"):
        samples, bad = rk4_integrate(rhs, np.hstack([X0, Z0]), dt, n_steps, record_every, guard)
    return samples[..., :nx], samples[..., nx:], bad


def _draw_initial(sampler, count, seed):
    if isinstance(sampler, Box):
        sampler = [sampler]
    if isinstance(sampler, (list, tuple)):
        return sample_boxes(sampler, count, seed)
    if hasattr(sampler, "sample"):
        return sampler.sample(count, seed)
    return sampler(count, seed)


def sample_region(region, count, seed, boundary_fraction=0.0):
    """Points from a region: a ``Region`` (shape-aware), a box list, or a ``Box``."""
    if hasattr(region, "sample"):
        shell = region.meta.get("boundary_shell") if hasattr(region, "meta") else None
        return region.sample(count, seed, boundary_fraction=boundary_fraction, shell=shell)
    boxes = [region] if isinstance(region, Box) else list(region)
    if not boxes:
        raise ConfigError("region must contain at least one box")
    return sample_boxes(boxes, count, seed)


def generate_dataset(system, design, config: TrainingConfig, sampler, x0=None):
    """Backward-integral initialization plus forward co-simulation.

    ``sampler`` is a ``Box``, list of boxes, or an object with ``sample(count,
    seed)``; ``x0`` overrides the sampled initial conditions.
    """
    config.validate()
    X0 = _draw_initial(sampler, config.p, config.seed) if x0 is None \
        else np.atleast_2d(np.asarray(x0, dtype=float))
    Z0, ok = backward_init_batch(system, design, X0, config.T_b, config.dt, config.guard)
    n_steps = int(round(config.horizon / config.dt))
    xs, zs, bad = cosimulate(system, design, X0[ok], Z0[ok], config.dt, n_steps,
                             config.record_every, config.guard)
    fwd_ok = bad < 0
    n_discard = int((~ok).sum() + (~fwd_ok).sum())
    if n_discard > config.max_discard_fraction * len(X0):
        raise TrainingError(f"{n_discard} of {len(X0)} initial conditions diverged")
    # pair order: initial condition major, time minor
    x_pairs = np.transpose(xs[:, fwd_ok], (1, 0, 2)).reshape(-1, X0.shape[1])
    z_pairs = np.transpose(zs[:, fwd_ok], (1, 0, 2)).reshape(-1, design.n_z)

    n_col = config.n_collocation or config.p
    Xc = _draw_initial(sampler, n_col, config.seed + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        col, col_bad = rk4_integrate(system.drift, Xc, config.dt, n_steps,
                                     config.record_every, config.guard)
    colloc = np.transpose(col[:, col_bad < 0], (1, 0, 2)).reshape(-1, X0.shape[1])
    meta = {"seed": config.seed, "dt": config.dt, "T_b": config.T_b,
            "horizon": config.horizon, "sample_period": config.sample_period,
            "p": len(X0), "discarded": n_discard,
            "collocation_discarded": int((col_bad >= 0).sum()),
            "x0": X0[ok][fwd_ok].tolist(), "z0": Z0[ok][fwd_ok].tolist(),
            "system": system.describe()}
    return KklDataset(x_pairs, z_pairs, colloc, meta)


# -- losses -------------------------------------------------------------------

def physics_loss(net, design, system, x, z, colloc, nu):
    """Data MSE plus ``nu`` times the mean squared PDE residual; value and gradient."""
    def data_term(out, _):
        d = out - z
        return (d * d).sum() / len(z), 2.0 * d / len(z), None

    value, grad = loss_gradient(net, x, data_term)
    if nu > 0 and len(colloc):
        h = system.output(colloc)
        F = system.drift(colloc)
        n = len(colloc)

        def pde_term(out, dout):
            R = dout - out @ design.A.T - h @ design.B.T
            g = 2.0 * nu * R / n
            return nu * (R * R).sum() / n, -g @ design.A, g

        v2, g2 = loss_gradient(net, colloc, pde_term, F)
        value, grad = value + v2, grad + g2
    return value, grad


def residual_norm_loss(net, design, system, x):
    """Mean PDE-residual norm (not squared) over ``x``; value and gradient."""
    h, F, n = system.output(x), system.drift(x), len(x)

    def term(out, dout):
        R = dout - out @ design.A.T - h @ design.B.T
        nr = np.linalg.norm(R, axis=1, keepdims=True)
        g = np.where(nr > 0, R / np.where(nr > 0, nr, 1.0), 0.0) / n
        return nr.sum() / n, -g @ design.A, g

    return loss_gradient(net, x, term, F)


def _check_finite(value, stage):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss during {stage}")


# -- training stages ----------------------------------------------------------

def train_forward(net: Mlp, dataset: KklDataset, design, system, config: TrainingConfig):
    """Adam on the physics-informed loss; returns ``(net, history)``.

    ``history`` holds the full-dataset loss before training and after every epoch.
    """
    x, z, colloc = dataset.x, dataset.z, dataset.collocation
    if len(x) == 0:
        raise ConfigError("empty dataset")
    if config.nu > 0 and len(colloc) == 0:
        raise ConfigError("nu > 0 needs collocation points")
    rng = np.random.default_rng(config.seed + 11)
    state = AdamState(lr=config.learning_rate)
    n_batches = max(1, int(np.ceil(len(x) / config.batch_size)))
    history = [physics_loss(net, design, system, x, z, colloc, config.nu)[0]]
    _check_finite(history[0], "forward training")
    for _ in range(config.epochs):
        perm = rng.permutation(len(x))
        cperm = rng.permutation(len(colloc))
        for bx, bc in zip(np.array_split(perm, n_batches), np.array_split(cperm, n_batches)):
            value, grad = physics_loss(net, design, system, x[bx], z[bx], colloc[bc], config.nu)
            _check_finite(value, "forward training")
            adam_step(state, net, grad)
        history.append(physics_loss(net, design, system, x, z, colloc, config.nu)[0])
        _check_finite(history[-1], "forward training")
        log.info("forward epoch %d loss %.3e", len(history) - 1, history[-1])
    return net, history


def finetune_forward(net: Mlp, design, system, region, config: TrainingConfig):
    """Hard-point mining rounds, each followed by L-BFGS on the mean residual norm.

    Each round draws a fresh pool, keeps the top ``keep_fraction`` by residual
    norm and adds them to the points mined in earlier rounds, so later rounds
    cannot undo earlier gains.  Returns ``(net, history)``; every history entry
    records the newly mined points' mean and the pool max at the start of the
    round, the size of the accumulated set and the final loss.
    """
    history = []
    mined = np.zeros((0, system.state_dim))
    for rnd in range(config.finetune_rounds):
        pool = sample_region(region, config.pool_size, config.seed + 1000 + rnd,
                             config.boundary_fraction)
        norms = np.linalg.norm(residual(net, design, system, pool), axis=1)
        keep = max(1, int(round(config.keep_fraction * len(pool))))
        top = np.argsort(-norms, kind="stable")[:keep]
        mean0 = float(norms[top].mean())
        entry = {"round": rnd, "mined_mean": mean0, "mined_max": float(norms.max())}
        if mean0 == 0.0:
            entry.update(final=0.0, status="zero_residual", iters=0, n_mined=len(mined))
            history.append(entry)
            continue
        mined = np.vstack([mined, pool[np.sort(top)]])

        def fun(theta):
            trial = net.copy()
            trial.set_flat(theta)
            return residual_norm_loss(trial, design, system, mined)

        res = lbfgs_minimize(fun, net.get_flat(), LbfgsState(), max_iters=config.lbfgs_iters)
        _check_finite(res.fun, "fine-tuning")
        net.set_flat(res.x)
        entry.update(final=res.fun, status=res.status, iters=res.n_iter, n_mined=len(mined))
        history.append(entry)
        log.info("finetune round %d: mined mean %.3e -> %.3e on %d points (%s)", rnd, mean0,
                 res.fun, len(mined), res.status)
    return net, history


def train_inverse(inverse_net: Mlp, forward_net: Mlp, region, config: TrainingConfig,
                  samples=None):
    """Fit the left inverse on ``(T(x'), x')`` with Adam; returns ``(net, history)``.

    Samples are put into a canonical (lexicographic) order first, so the
    result does not depend on how the caller ordered them.
    """
    if samples is None:
        samples = sample_region(region, config.inverse_samples, config.seed + 2,
                                config.boundary_fraction)
    xs = np.atleast_2d(np.asarray(samples, dtype=float))
    xs = xs[np.lexsort(xs.T[::-1])]
    zs = forward_net(xs)
    rng = np.random.default_rng(config.seed + 13)
    state = AdamState(lr=config.learning_rate)
    n_batches = max(1, int(np.ceil(len(xs) / config.batch_size)))

    def loss(net, zb, xb):
        def term(out, _):
            d = out - xb
            return (d * d).sum() / len(xb), 2.0 * d / len(xb), None
        return loss_gradient(net, zb, term)

    history = [loss(inverse_net, zs, xs)[0]]
    for _ in range(config.inverse_epochs):
        for b in np.array_split(rng.permutation(len(xs)), n_batches):
            value, grad = loss(inverse_net, zs[b], xs[b])
            _check_finite(value, "inverse training")
            adam_step(state, inverse_net, grad)
        history.append(loss(inverse_net, zs, xs)[0])
        _check_finite(history[-1], "inverse training")
    return inverse_net, history


@dataclass
class PipelineResult:
    observer: LearnedObserver
    dataset: KklDataset
    forward_history: List[float]
    finetune_history: list
    inverse_history: List[float]
    forward_before_finetune: Mlp


def fit_observer(system, design, config: TrainingConfig, sampler, region) -> PipelineResult:
    """Run data generation, forward training, fine-tuning and inverse training."""
    config.validate()
    data = generate_dataset(system, design, config, sampler)
    fwd = Mlp.init(config.forward_dims(system.state_dim, design.n_z), seed=config.seed)
    fwd, h1 = train_forward(fwd, data, design, system, config)
    before = fwd.copy()
    fwd, h2 = finetune_forward(fwd, design, system, region, config)
    inv = Mlp.init(config.inverse_dims(system.state_dim, design.n_z), seed=config.seed + 7)
    inv, h3 = train_inverse(inv, fwd, region, config)
    fwd.meta["training_config"] = config_digest(config)
    inv.meta["training_config"] = config_digest(config)
    return PipelineResult(LearnedObserver(design, fwd, inv), data, h1, h2, h3, before)


def config_digest(config):
    import hashlib
    blob = json.dumps(asdict(config), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
