"""Sound bounds for tanh networks over boxes, with branch-and-bound refinement.

Three quantities are certified over a box region:

* the sup of the PDE residual ``||dT/dx f - A T - B h||``,
* a Lipschitz constant of the inverse network over an enclosure of the image,
* the sup of the reconstruction error ``||T*(T(x)) - x||``.

Each per-box bound intersects two routes: forward affine arithmetic (which
keeps the correlation between ``x`` and the network's tangent) and interval /
CROWN bounds.  Everything is vectorized over a batch of boxes.
"""

import hashlib
import heapq
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .arith import (EPS, TANH_ULPS, AffineForm, Interval, _pad, _radius, chord_slope,
                    interval_matmul, interval_matvec, sech2, tanh_offsets)
from .dynamics import Box, limit_cycle, sample_boxes
from .kkl import residual
from .linalg import norm_upper, power_iteration_norm
from .net import Mlp


# -- box batches ----------------------------------------------------------------

def _as_batch(box):
    """Return ``(lo, hi, single)`` with ``lo, hi`` of shape ``(K, n)``."""
    if isinstance(box, Box):
        return box.lower[None, :], box.upper[None, :], True
    if isinstance(box, Interval):
        lo, hi = box.lo, box.hi
    elif isinstance(box, (list, tuple)) and box and isinstance(box[0], Box):
        lo = np.stack([b.lower for b in box])
        hi = np.stack([b.upper for b in box])
        return lo, hi, False
    else:
        lo, hi = box
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    single = lo.ndim == 1
    return np.atleast_2d(lo), np.atleast_2d(hi), single


def _squeeze(iv, single):
    return iv[0] if single else iv


def _check_dim(net, lo):
    if lo.shape[1] != net.input_dim:
        raise ValueError(f"box dimension {lo.shape[1]} does not match network input {net.input_dim}")


def _sqrt_sum_sq(iv: Interval):
    """Upper bound on the 2-norm of any vector inside the interval vector."""
    m = iv.mag()
    s = np.sqrt(np.sum(m * m, axis=-1))
    return s + _pad(s, m.shape[-1] + 2)


# -- interval bound propagation ----------------------------------------------------

def ibp_forward(net: Mlp, box):
    """Interval enclosure of ``net`` over a box (or a batch of boxes)."""
    lo, hi, single = _as_batch(box)
    _check_dim(net, lo)
    a = Interval(lo, hi)
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = a.matvec(W, b)
        if k < last:
            a = a.tanh()
    return _squeeze(a, single)


# -- CROWN ------------------------------------------------------------------------

@dataclass
class LinearBounds:
    """Affine bounds ``lower_A x + lower_b <= g(x) <= upper_A x + upper_b`` per box.

    Shapes carry a leading batch axis: ``lower_A`` is ``(K, m, n)``.
    ``bounds`` holds the concrete enclosure after intersection with IBP.
    """

    lower_A: np.ndarray
    lower_b: np.ndarray
    upper_A: np.ndarray
    upper_b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    bounds: Interval
    preactivations: list = field(default_factory=list, repr=False)

    def concretize(self, lo=None, hi=None):
        lo = self.lower if lo is None else np.atleast_2d(lo)
        hi = self.upper if hi is None else np.atleast_2d(hi)
        return _concretize(self.lower_A, self.lower_b, self.upper_A, self.upper_b, lo, hi)

    def evaluate(self, x):
        """Lower and upper lines at points ``x`` of shape ``(K, N, n)``."""
        x = np.asarray(x, dtype=float)
        low = np.einsum("kmn,kpn->kpm", self.lower_A, x) + self.lower_b[:, None, :]
        up = np.einsum("kmn,kpn->kpm", self.upper_A, x) + self.upper_b[:, None, :]
        return low, up


def _concretize(LA, lb, UA, ub, lo, hi):
    c, r = _radius(lo, hi)
    n = lo.shape[-1]
    xmag = np.abs(c) + r
    up = np.einsum("kmn,kn->km", UA, c) + np.einsum("kmn,kn->km", np.abs(UA), r) + ub
    low = np.einsum("kmn,kn->km", LA, c) - np.einsum("kmn,kn->km", np.abs(LA), r) + lb
    pad_up = _pad(np.einsum("kmn,kn->km", np.abs(UA), xmag) + np.abs(ub), n + 2)
    pad_low = _pad(np.einsum("kmn,kn->km", np.abs(LA), xmag) + np.abs(lb), n + 2)
    return Interval(low - pad_low, up + pad_up)


def tanh_relaxation(l, u):
    """Sound lines ``kl s + bl <= tanh(s) <= ku s + bu`` on ``[l, u]``.

    On the convex side (``u <= 0``) the upper line is the chord and the lower
    line the tangent at the midpoint; mirrored on the concave side.  Mixed
    intervals use, for each side, whichever of the chord slope and the smaller
    endpoint derivative gives the narrower band.  Offsets come from the exact
    range of ``tanh(s) - k s``, so every line is sound for any slope.
    """
    chord = chord_slope(l, u)
    tang = sech2(0.5 * (l + u))
    endp = np.minimum(sech2(l), sech2(u))
    cmin, cmax = tanh_offsets(chord, l, u)
    emin, emax = tanh_offsets(endp, l, u)
    mixed = np.where(cmax - cmin <= emax - emin, chord, endp)
    convex, concave = u <= 0, l >= 0
    ku = np.where(convex, chord, np.where(concave, tang, mixed))
    kl = np.where(convex, tang, np.where(concave, chord, mixed))
    bu = tanh_offsets(ku, l, u)[1]
    bl = tanh_offsets(kl, l, u)[0]
    return kl, bl, ku, bu


def _mv(M, v):
    return np.einsum("kmi,ki->km", M, v)


def _backward(net, j, relax, smag, amag, xmag):
    """Linear bounds, in terms of the input, on the pre-activation of layer ``j``.

    ``smag[k]`` bounds the pre-activations of layer ``k``, ``amag[k]`` the
    activations entering layer ``k`` and ``xmag`` the input.  The rounding
    error of the pass is bounded along the way and folded into the offsets,
    so the returned lines hold for the exact network.
    """
    m = net.layer_dims[j + 1]
    U = L = None
    ub = lb = None
    err = 0.0
    for k in range(j, 0, -1):
        W, b = net.weights[k], net.biases[k]
        if U is None:
            K = relax[k - 1][0].shape[0]
            U = np.broadcast_to(W, (K,) + W.shape).copy()
            L = U.copy()
            ub = np.broadcast_to(b, (K, m)).copy()
            lb = ub.copy()
        else:
            absU = np.abs(U) + np.abs(L)
            d = W.shape[0]
            err = err + _pad(np.abs(ub) + np.abs(lb) + absU @ np.abs(b), d + 1) \
                + _pad(_mv(absU @ np.abs(W), amag[k]), d)
            ub = ub + U @ b
            lb = lb + L @ b
            U = U @ W
            L = L @ W
        kl, bl, ku, bu = relax[k - 1]
        Up, Un = np.maximum(U, 0.0), np.minimum(U, 0.0)
        Lp, Ln = np.maximum(L, 0.0), np.minimum(L, 0.0)
        d = U.shape[-1]
        err = err + _pad(np.abs(ub) + np.abs(lb) + _mv(np.abs(U) + np.abs(L),
                                                         np.abs(bu) + np.abs(bl)), d + 1)
        ub = ub + _mv(Up, bu) + _mv(Un, bl)
        lb = lb + _mv(Lp, bl) + _mv(Ln, bu)
        U = Up * ku[:, None, :] + Un * kl[:, None, :]
        L = Lp * kl[:, None, :] + Ln * ku[:, None, :]
        err = err + _pad(_mv(np.abs(U) + np.abs(L), smag[k - 1]), 0)
    W, b = net.weights[0], net.biases[0]
    absU = np.abs(U) + np.abs(L)
    err = err + _pad(np.abs(ub) + np.abs(lb) + absU @ np.abs(b), W.shape[0] + 1) \
        + _pad(_mv(absU @ np.abs(W), xmag), W.shape[0])
    ub = ub + U @ b
    lb = lb + L @ b
    err = err + _pad(err + np.abs(ub) + np.abs(lb), 1)
    return L @ W, lb - err, U @ W, ub + err


@dataclass
class _Stack:
    """Layers of ``second(first(x))`` kept unmerged, with no activation at the junction."""

    weights: list
    biases: list
    layer_dims: list
    linear_at: int

    @classmethod
    def of(cls, first: Mlp, second: Mlp):
        return cls(first.weights + second.weights, first.biases + second.biases,
                   first.layer_dims + second.layer_dims[1:], first.n_layers - 1)

    @property
    def n_layers(self):
        return len(self.weights)



def _identity_relaxation(s: Interval):
    one = np.ones_like(s.lo)
    zero = np.zeros_like(s.lo)
    return one, zero, one, zero


def _crown(net, lo, hi):
    """Batched CROWN with IBP-intersected intermediate bounds.

    ``net`` is an ``Mlp`` or a ``_Stack``; the latter has one hidden layer
    without activation.
    """
    K, n = lo.shape
    last = net.n_layers - 1
    linear_at = getattr(net, "linear_at", None)
    x = Interval(lo, hi)
    xmag = x.mag()
    pre, relax, smag, amag = [], [], [], [xmag]
    a = x
    for j in range(net.n_layers):
        ibp = a.matvec(net.weights[j], net.biases[j])
        if j == 0:
            s = ibp
            LA = np.broadcast_to(net.weights[0], (K,) + net.weights[0].shape)
            lb = np.broadcast_to(net.biases[0], (K, net.layer_dims[1]))
            UA, ub = LA, lb
        else:
            LA, lb, UA, ub = _backward(net, j, relax, smag, amag, xmag)
            s = _concretize(LA, lb, UA, ub, lo, hi).intersect(ibp)
        s = Interval(np.minimum(s.lo, s.hi), np.maximum(s.lo, s.hi))
        pre.append(s)
        smag.append(s.mag())
        if j < last:
            if j == linear_at:
                relax.append(_identity_relaxation(s))
                a = s
            else:
                relax.append(tanh_relaxation(s.lo, s.hi))
                a = s.tanh()
            amag.append(a.mag())
    return LinearBounds(np.array(LA), np.array(lb), np.array(UA), np.array(ub), lo, hi, pre[-1], pre)


def crown_bounds(net: Mlp, box) -> LinearBounds:
    """CROWN linear bounds of ``net`` over a box or batch of boxes.

    The returned object always carries a leading batch axis.
    """
    lo, hi, _ = _as_batch(box)
    _check_dim(net, lo)
    return _crown(net, lo, hi)


def output_enclosure(net: Mlp, box):
    """Concrete output bounds: CROWN intersected with IBP."""
    lo, hi, single = _as_batch(box)
    _check_dim(net, lo)
    return _squeeze(_crown(net, lo, hi).bounds, single)


def _tanh_derivative_interval(s: Interval):
    """Exact range of ``1 - tanh^2`` over each interval (even, peaked at 0)."""
    dl, du = sech2(s.lo), sech2(s.hi)
    straddle = (s.lo <= 0) & (s.hi >= 0)
    lo = np.minimum(dl, du)
    hi = np.where(straddle, 1.0, np.maximum(dl, du))
    # 1 - t^2 with t carrying the tanh error: absolute, since t^2 <= 1
    pad = (2 * TANH_ULPS + 4) * EPS
    return Interval(np.maximum(lo - pad, 0.0), np.minimum(hi + pad, 1.0))


def _jacobian_from_pre(net, pre):
    K = pre[0].shape[0]
    W0 = net.weights[0]
    J = Interval(np.broadcast_to(W0, (K,) + W0.shape), np.broadcast_to(W0, (K,) + W0.shape))
    for k in range(1, net.n_layers):
        d = _tanh_derivative_interval(pre[k - 1])
        # the derivative factor is non-negative, so row scaling is a product of intervals
        J = J * Interval(d.lo[..., None], d.hi[..., None])
        W = net.weights[k]
        Wb = Interval(np.broadcast_to(W, (K,) + W.shape), np.broadcast_to(W, (K,) + W.shape))
        J = interval_matmul(Wb, J)
    return J


def bound_jacobian(net: Mlp, box):
    """Interval matrix enclosing the input Jacobian of ``net`` over the box."""
    lo, hi, single = _as_batch(box)
    _check_dim(net, lo)
    pre = _crown(net, lo, hi).preactivations
    return _squeeze(_jacobian_from_pre(net, pre), single)


# -- affine-arithmetic routes ------------------------------------------------------

def _affine_forward(net: Mlp, form: AffineForm, tangent: Optional[AffineForm] = None):
    last = net.n_layers - 1
    a, t = form, tangent
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = a.linear(W, b)
        if t is not None:
            t = t.linear(W)
        if k < last:
            a = s.tanh()
            if t is not None:
                t = (1.0 - a * a) * t
        else:
            a = s
    return a, t


def residual_enclosure(net: Mlp, design, system, lo, hi):
    """Interval enclosure of the PDE residual over a batch of boxes."""
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    A, B = design.A, design.B
    # affine route
    x = AffineForm.from_box(lo, hi)
    T, Jf = _affine_forward(net, x, system.drift_affine(x))
    R_aff = (Jf - T.linear(A) - system.output_affine(x).linear(B)).bounds()
    # interval route
    box = Interval(lo, hi)
    lin = _crown(net, lo, hi)
    J = _jacobian_from_pre(net, lin.preactivations)
    Jf_iv = interval_matvec(J, system.drift_interval(box))
    R_iv = Jf_iv - lin.bounds.matvec(A) - system.output_interval(box).matvec(B)
    return R_aff.intersect(R_iv)


def reconstruction_enclosure(forward_net: Mlp, inverse_net: Mlp, lo, hi, stacked=None):
    """Interval enclosure of ``T*(T(x)) - x`` over a batch of boxes."""
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    x = AffineForm.from_box(lo, hi)
    z, _ = _affine_forward(forward_net, x)
    xh, _ = _affine_forward(inverse_net, z)
    E_aff = (xh - x).bounds()
    # CROWN on the stacked layers, with the identity subtracted from its linear bounds
    net = _Stack.of(forward_net, inverse_net) if stacked is None else stacked
    lin = _crown(net, lo, hi)
    eye = np.eye(lo.shape[1])
    E_lin = _concretize(lin.lower_A - eye, lin.lower_b, lin.upper_A - eye, lin.upper_b, lo, hi)
    # rounding of the subtraction itself
    sub = _pad(np.einsum("kmn,kn->km", np.abs(lin.lower_A) + np.abs(lin.upper_A) + eye,
                         np.maximum(np.abs(lo), np.abs(hi))), 0)
    E_lin = Interval(E_lin.lo - sub, E_lin.hi + sub)
    E_ibp = lin.bounds - Interval(lo, hi)
    return E_aff.intersect(E_lin).intersect(E_ibp)


# -- regions ---------------------------------------------------------------------

@dataclass
class Region:
    """Finite union of boxes with a record of how it was built."""

    boxes: List[Box]
    provenance: str = ""
    meta: dict = field(default_factory=dict)
    shape: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("region must contain at least one box")
        dims = {b.dim for b in self.boxes}
        if len(dims) != 1:
            raise ValueError("boxes must share one dimension")

    @property
    def dim(self):
        return self.boxes[0].dim

    def __len__(self):
        return len(self.boxes)

    def bounds(self):
        lo, hi, _ = _as_batch(self.boxes)
        return lo, hi

    def hull(self) -> Box:
        lo, hi = self.bounds()
        return Box(lo.min(axis=0), hi.max(axis=0))

    def contains(self, x, tol=0.0):
        x = np.atleast_2d(x)
        lo, hi = self.bounds()
        inside = (x[:, None, :] >= lo - tol) & (x[:, None, :] <= hi + tol)
        return np.any(np.all(inside, axis=-1), axis=-1)

    def sample(self, count, seed=None, boundary_fraction=0.0, shell=None):
        """Points from the region.

        When a geometric shape is attached, points are drawn uniformly from it
        and ``boundary_fraction`` of them from the band of width ``shell``
        inside its boundary.
        """
        if self.shape is None:
            return sample_boxes(self.boxes, count, seed)
        from shapely import contains_xy
        rng = np.random.default_rng(seed)
        n_shell = int(round(boundary_fraction * count)) if shell else 0
        inner = self.shape.buffer(-shell) if n_shell else None
        lo, hi = self.hull().lower, self.hull().upper
        out, need = [], {"bulk": count - n_shell, "shell": n_shell}
        for kind in ("bulk", "shell"):
            got = 0
            while got < need[kind]:
                pts = lo + rng.random((4 * need[kind] + 64, self.dim)) * (hi - lo)
                ok = contains_xy(self.shape, pts[:, 0], pts[:, 1])
                if kind == "shell":
                    ok &= ~contains_xy(inner, pts[:, 0], pts[:, 1])
                pts = pts[ok][:need[kind] - got]
                out.append(pts)
                got += len(pts)
        return np.vstack(out)

    def to_dict(self):
        return {"provenance": self.provenance, "meta": self.meta,
                "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d):
        return cls([Box.from_dict(b) for b in d["boxes"]], d.get("provenance", ""),
                   d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RegionSpec:
    """How to build the certification region.

    ``mode`` is ``"energy"`` (bounding box of the energy sublevel set through
    the initial box), ``"limit_cycle"`` (grid cover of the dilated limit cycle)
    or ``"box"`` (the initial box itself).
    """

    mode: str = "energy"
    x0_lower: Optional[list] = None
    x0_upper: Optional[list] = None
    margin: float = 0.3
    cell: float = 0.2
    fill: bool = True
    grid_lower: Optional[list] = None
    grid_upper: Optional[list] = None
    boundary_shell: float = 0.1

    def to_dict(self):
        return asdict(self)


def build_region(system, spec: RegionSpec) -> Region:
    if spec.mode == "energy":
        if system.energy_box is None:
            raise ValueError(f"{system.name} has no energy sublevel box")
        x0 = Box(spec.x0_lower, spec.x0_upper)
        c = float(np.max(system.energy(x0.corners())))
        lo, hi = system.energy_box(c)
        return Region([Box(lo, hi)], f"energy sublevel box, c={c!r}", {"c": c})
    if spec.mode == "box":
        return Region([Box(spec.x0_lower, spec.x0_upper)], "initial box")
    if spec.mode == "limit_cycle":
        return _limit_cycle_cover(system, spec)
    raise ValueError(f"unknown region mode {spec.mode!r}")


def _limit_cycle_cover(system, spec):
    from shapely import box as sbox
    from shapely.geometry import LineString, Polygon

    if system.state_dim != 2:
        raise ValueError("limit-cycle cover is only available in the plane")
    if spec.cell <= 0 or spec.margin < 0:
        raise ValueError("cell must be positive and margin non-negative")
    cycle = limit_cycle(system)
    base = Polygon(cycle) if spec.fill else LineString(cycle)
    shape = base.buffer(spec.margin) if spec.margin > 0 else base
    if spec.grid_lower is not None:
        glo, ghi = np.asarray(spec.grid_lower, float), np.asarray(spec.grid_upper, float)
    else:
        minx, miny, maxx, maxy = shape.bounds
        glo, ghi = np.array([minx, miny]), np.array([maxx, maxy])
    n = np.maximum(np.ceil((ghi - glo) / spec.cell - 1e-9).astype(int), 1)
    step = (ghi - glo) / n
    edge = shape.boundary.buffer(spec.boundary_shell) if spec.boundary_shell > 0 else None
    boxes = []
    for i in range(n[0]):
        for j in range(n[1]):
            lo = glo + step * np.array([i, j])
            hi = lo + step
            cell = sbox(lo[0], lo[1], hi[0], hi[1])
            if not cell.intersects(shape):
                continue
            if edge is not None and cell.intersects(edge):
                half = 0.5 * step
                for di in (0, 1):
                    for dj in (0, 1):
                        sl = lo + half * np.array([di, dj])
                        sub = sbox(sl[0], sl[1], sl[0] + half[0], sl[1] + half[1])
                        if sub.intersects(shape):
                            boxes.append(Box(sl, sl + half))
            else:
                boxes.append(Box(lo, hi))
    if not boxes:
        raise ValueError("limit-cycle cover is empty; check the grid bounds")
    prov = (f"limit-cycle cover: margin={spec.margin}, cell={spec.cell}, fill={spec.fill}, "
            f"boundary_shell={spec.boundary_shell}")
    meta = {"n_cycle_points": len(cycle), "boundary_shell": spec.boundary_shell}
    return Region(boxes, prov, meta, shape=shape)


# -- branch and bound ---------------------------------------------------------------

@dataclass
class BabConfig:
    max_subboxes: int = 4096
    target_gap: float = 1e-7
    samples_per_box: int = 8
    batch: int = 64
    workers: int = 1
    seed: int = 0
    image_splits: int = 4
    image_margin: float = 0.0

    def __post_init__(self):
        if self.max_subboxes < 1:
            raise ValueError("max_subboxes must be >= 1")
        if self.target_gap < 0:
            raise ValueError("target_gap must be >= 0")
        if self.samples_per_box < 0 or self.batch < 1 or self.workers < 1:
            raise ValueError("samples_per_box >= 0, batch >= 1 and workers >= 1 required")
        if self.image_splits < 1 or self.image_margin < 0:
            raise ValueError("image_splits >= 1 and image_margin >= 0 required")

    def to_dict(self):
        return asdict(self)

    def digest(self):
        # results do not depend on the worker count, so it is left out
        d = {k: v for k, v in self.to_dict().items() if k != "workers"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CertResult:
    upper: float
    witness: float
    boxes_used: int
    gap_unmet: bool
    wall_time: float
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def gap(self):
        return self.upper - self.witness

    def __iter__(self):
        # allows ``upper, witness, boxes = certify_...(...)``
        return iter((self.upper, self.witness, self.boxes_used))

    def to_dict(self):
        d = {"upper": self.upper, "witness_lower": self.witness, "gap": self.gap,
             "boxes_used": self.boxes_used, "gap_unmet": self.gap_unmet,
             "wall_time": self.wall_time, "config_digest": self.config_digest}
        d.update(self.extra)
        return d


def _box_samples(lo, hi, seqs, count, seed):
    """Centre plus ``count`` uniform points per box, seeded by sequence number."""
    pts = [0.5 * (lo + hi)]
    if count:
        u = np.stack([np.random.default_rng([seed, int(s)]).random((count, lo.shape[1]))
                      for s in seqs], axis=1)
        pts.extend(lo + u * (hi - lo))
    return np.concatenate(pts, axis=0)


def _run_chunks(fn, lo, hi, workers):
    if workers <= 1 or len(lo) < 2 * workers:
        return fn(lo, hi)
    parts = np.array_split(np.arange(len(lo)), workers)
    with ThreadPoolExecutor(workers) as pool:
        out = list(pool.map(lambda idx: fn(lo[idx], hi[idx]), parts))
    return np.concatenate(out)


def branch_and_bound(lo, hi, bound_fn, witness_fn, cfg: BabConfig):
    """Refine ``sup`` of a scalar quantity over a union of boxes.

    ``bound_fn(lo, hi)`` returns certified per-box upper bounds; ``witness_fn(x)``
    evaluates the quantity at points.  The box with the largest bound is split
    first (widest dimension, ties broken by sequence number), and a child's
    bound never exceeds its parent's, so the result is monotone in the budget.
    """
    t0 = time.perf_counter()
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    K = len(lo)
    ub = _run_chunks(bound_fn, lo, hi, cfg.workers)
    seqs = np.arange(K)
    witness = float(np.max(witness_fn(_box_samples(lo, hi, seqs, cfg.samples_per_box, cfg.seed))))
    heap = [(-float(ub[i]), i, lo[i], hi[i]) for i in range(K)]
    heapq.heapify(heap)
    seq = K
    used = K
    unmet = False
    while True:
        top = -heap[0][0]
        if top - witness <= cfg.target_gap:
            break
        room = cfg.max_subboxes - used
        b = min(cfg.batch, room, len(heap))
        if b <= 0:
            unmet = True
            break
        popped = [heapq.heappop(heap) for _ in range(b)]
        plo = np.stack([p[2] for p in popped])
        phi = np.stack([p[3] for p in popped])
        pub = np.array([-p[0] for p in popped])
        dim = np.argmax(phi - plo, axis=1)
        rows = np.arange(b)
        mid = 0.5 * (plo[rows, dim] + phi[rows, dim])
        left_hi = phi.copy()
        left_hi[rows, dim] = mid
        right_lo = plo.copy()
        right_lo[rows, dim] = mid
        clo = np.concatenate([plo, right_lo])
        chi = np.concatenate([left_hi, phi])
        cub = np.minimum(_run_chunks(bound_fn, clo, chi, cfg.workers), np.concatenate([pub, pub]))
        cseq = np.arange(seq, seq + 2 * b)
        w = witness_fn(_box_samples(clo, chi, cseq, cfg.samples_per_box, cfg.seed))
        witness = max(witness, float(np.max(w)))
        for i in range(2 * b):
            heapq.heappush(heap, (-float(cub[i]), int(cseq[i]), clo[i], chi[i]))
        seq += 2 * b
        used += b
    upper = -heap[0][0]
    return CertResult(float(upper), witness, used, unmet, time.perf_counter() - t0, cfg.digest())


# -- certified quantities ----------------------------------------------------------

def certify_residual_sup(observer, system, region: Region, cfg: BabConfig = None):
    """Certified upper bound and sampled lower witness of ``sup ||R(x)||`` over the region."""
    cfg = cfg or BabConfig()
    net, design = observer.forward_net, observer.design
    lo, hi = region.bounds()
    _check_dim(net, lo)

    def bound(l, h):
        return _sqrt_sum_sq(residual_enclosure(net, design, system, l, h))

    def witness(x):
        return np.linalg.norm(residual(net, design, system, x), axis=1)

    return branch_and_bound(lo, hi, bound, witness, cfg)


def certify_reconstruction(observer, region: Region, cfg: BabConfig = None):
    """Certified sup of ``||T*(T(x)) - x||`` over the region."""
    cfg = cfg or BabConfig()
    fwd, inv = observer.forward_net, observer.inverse_net
    stacked = _Stack.of(fwd, inv)
    lo, hi = region.bounds()
    _check_dim(fwd, lo)

    def bound(l, h):
        return _sqrt_sum_sq(reconstruction_enclosure(fwd, inv, l, h, stacked))

    def witness(x):
        return np.linalg.norm(inv(fwd(x)) - x, axis=1)

    return branch_and_bound(lo, hi, bound, witness, cfg)


def _subdivide(lo, hi, splits):
    """Uniform ``splits^n`` grid inside each box."""
    if splits == 1:
        return lo, hi
    n = lo.shape[1]
    grid = np.stack(np.meshgrid(*[np.arange(splits)] * n, indexing="ij"), -1).reshape(-1, n)
    step = (hi - lo) / splits
    slo = lo[:, None, :] + grid[None] * step[:, None, :]
    shi = np.where(grid[None] == splits - 1, hi[:, None, :], slo + step[:, None, :])
    return slo.reshape(-1, n), shi.reshape(-1, n)


def enclose_image(forward_net: Mlp, region: Region, cfg: BabConfig = None, margin=None):
    """Box enclosure of the image of the region under ``forward_net``.

    Each region box is split into an ``image_splits^n`` grid before bounding;
    the result is optionally inflated by ``margin`` in every coordinate.
    """
    cfg = cfg or BabConfig()
    margin = cfg.image_margin if margin is None else margin
    lo, hi = region.bounds()
    _check_dim(forward_net, lo)
    slo, shi = _subdivide(lo, hi, cfg.image_splits)
    iv = output_enclosure(forward_net, (slo, shi))
    boxes = [Box(l - margin, h + margin) for l, h in zip(iv.lo, iv.hi)]
    return Region(boxes, f"image enclosure: splits={cfg.image_splits}, margin={margin}",
                  {"margin": margin, "source_boxes": len(region)})


def certify_lipschitz(inverse_net: Mlp, z_region: Region, cfg: BabConfig = None):
    """Certified Lipschitz constant of ``inverse_net`` on the z-region.

    The Jacobian norm is bounded over the bounding box of the region, a convex
    set, so the mean-value bound applies to every pair of points in it.
    """
    cfg = cfg or BabConfig()
    hull = z_region.hull()
    _check_dim(inverse_net, hull.lower[None])

    def bound(l, h):
        M = bound_jacobian(inverse_net, (l, h)).mag()
        up = norm_upper(M)
        return up + _pad(up, M.shape[-1] + M.shape[-2] + 2)

    def witness(z):
        return power_iteration_norm(inverse_net.input_jacobian(z), iters=30)

    res = branch_and_bound(hull.lower, hull.upper, bound, witness, cfg)
    res.extra["domain"] = "bounding box of the z-region"
    return res


def certify_all(observer, system, region: Region, cfg: BabConfig = None):
    """Run the three certifications and return ``(report dict, z_region)``."""
    cfg = cfg or BabConfig()
    t0 = time.perf_counter()
    r = certify_residual_sup(observer, system, region, cfg)
    z_region = enclose_image(observer.forward_net, region, cfg)
    lip = certify_lipschitz(observer.inverse_net, z_region, cfg)
    rec = certify_reconstruction(observer, region, cfg)
    report = {
        "residual_sup": r.to_dict(),
        "lipschitz": lip.to_dict(),
        "reconstruction": rec.to_dict(),
        "region": {"provenance": region.provenance, "n_boxes": len(region),
                   "hull": region.hull().to_dict()},
        "z_region": {"provenance": z_region.provenance, "n_boxes": len(z_region),
                     "hull": z_region.hull().to_dict(), "margin": cfg.image_margin},
        "bab": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "notes": ["Lipschitz bound holds on the image enclosure inflated by the stated "
                  "margin; estimates outside it during transients are not covered."],
        "wall_time": time.perf_counter() - t0,
    }
    return report, z_region
