"""Closed-form estimation-error bounds from certified quantities."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .linalg import ObserverDesign, design_constants, gamma_factor, sym_eigenvalues


@dataclass
class CertifiedQuantities:
    residual_sup: float
    lipschitz: float
    reconstruction: float
    noise_bound: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("residual_sup", "lipschitz", "reconstruction", "noise_bound"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
            setattr(self, name, value)

    @classmethod
    def from_report(cls, report, noise_bound=0.0):
        """Build from a certification report produced by ``certify_all``."""
        digest = hashlib.sha256(json.dumps(report, sort_keys=True, default=str).encode())
        return cls(report["residual_sup"]["upper"], report["lipschitz"]["upper"],
                   report["reconstruction"]["upper"], noise_bound,
                   {"report_digest": digest.hexdigest()[:16]})

    def to_dict(self):
        return asdict(self)


def _lyap_pair(design, optimized):
    if optimized:
        return np.eye(design.n_z), -2.0 * design.A
    return design.P, design.Q


def ez_ultimate(design: ObserverDesign, residual_sup, optimized=False):
    """Ultimate bound on the observer-coordinate error for a residual bound."""
    k, qp, _ = design_constants(design, optimized=optimized)
    return k * qp * float(residual_sup)


def ez_transient(design: ObserverDesign, residual_sup, V0, t, optimized=False):
    """Time-dependent bound on ``||e_z(t)||`` with the splitting weight fixed at 1/2."""
    if V0 < 0:
        raise ValueError("V0 must be non-negative")
    P, Q = _lyap_pair(design, optimized)
    eps = 0.5
    ep, eq = sym_eigenvalues(P), sym_eigenvalues(Q)
    c = (1.0 - eps) * eq[0] / ep[-1]
    _, qp, _ = design_constants(design, optimized=optimized)
    t = np.asarray(t, dtype=float)
    decay = np.sqrt(V0 / ep[0]) * np.exp(-0.5 * c * t)
    return decay + np.sqrt(1.0 / (eps * c * ep[0])) * qp * float(residual_sup)


def decay_rate(design: ObserverDesign, optimized=False):
    P, Q = _lyap_pair(design, optimized)
    return 0.5 * sym_eigenvalues(Q)[0] / sym_eigenvalues(P)[-1]


def _sqrt_gamma(design, optimized, gamma):
    if gamma is not None:
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        return np.sqrt(gamma)
    return np.sqrt(gamma_factor(design, optimized=optimized))


def x_ultimate(design: ObserverDesign, q: CertifiedQuantities, optimized=True, gamma=None):
    """``L * sqrt(Gamma) * Rbar + E`` for noiseless measurements."""
    return q.lipschitz * _sqrt_gamma(design, optimized, gamma) * q.residual_sup + q.reconstruction


def optimal_split(a, b):
    """Minimizing weights ``(eps_R, eps_v)`` for the residual and noise terms."""
    ra, rb = np.sqrt(a), np.sqrt(b)
    if ra + rb == 0:
        return 0.25, 0.25
    return 0.5 * ra / (ra + rb), 0.5 * rb / (ra + rb)


def x_ultimate_noisy(design: ObserverDesign, q: CertifiedQuantities, optimized=True, gamma=None):
    """Ultimate state-error bound under bounded measurement noise.

    Returns ``(bound, eps_R, eps_v)``.  The residual term uses ``sqrt(Gamma)``
    in place of ``k * ||Q^{-1/2} P||`` (equal unless ``gamma`` is overridden),
    so the bound reduces to :func:`x_ultimate` when the noise bound is zero.
    """
    k, qp, qpb = design_constants(design, optimized=optimized)
    a = (qp * q.residual_sup) ** 2
    b = (qpb * q.noise_bound) ** 2
    eps_r, eps_v = optimal_split(a, b)
    sg = _sqrt_gamma(design, optimized, gamma)
    bound = q.lipschitz * (sg * q.residual_sup + k * qpb * q.noise_bound) + q.reconstruction
    return float(bound), float(eps_r), float(eps_v)


def split_objective(eps_r, eps_v, a, b):
    """``(a / eps_R + b / eps_v) / (1 - eps_R - eps_v)``, infinite off the simplex."""
    if eps_r <= 0 or eps_v <= 0 or eps_r + eps_v >= 1:
        return np.inf
    return (a / eps_r + b / eps_v) / (1.0 - eps_r - eps_v)


def epsilon_grid_check(design: ObserverDesign, q: CertifiedQuantities, optimized=True,
                       return_argmin=False):
    """Noisy state-error bound by direct numerical minimization over the two weights.

    Nested bounded scalar searches over the total ``s = eps_R + eps_v`` and
    the fraction ``eps_R / s``.
    """
    P, Q = _lyap_pair(design, optimized)
    _, qp, qpb = design_constants(design, optimized=optimized)
    ep, eq = sym_eigenvalues(P), sym_eigenvalues(Q)
    a = (qp * q.residual_sup) ** 2
    b = (qpb * q.noise_bound) ** 2
    opts = {"xatol": 1e-12, "maxiter": 500}

    def inner(s):
        res = minimize_scalar(lambda f: split_objective(f * s, (1 - f) * s, a, b),
                              bounds=(1e-9, 1 - 1e-9), method="bounded", options=opts)
        return res.fun, res.x

    outer = minimize_scalar(lambda s: inner(s)[0], bounds=(1e-9, 1 - 1e-9), method="bounded",
                            options=opts)
    s = outer.x
    value, frac = inner(s)
    ez = np.sqrt(ep[-1] / (eq[0] * ep[0]) * value)
    bound = float(q.lipschitz * ez + q.reconstruction)
    if return_argmin:
        return bound, (frac * s, (1 - frac) * s)
    return bound


def v0_from_error(design: ObserverDesign, ez0, optimized=False):
    """``V(0) = e_z(0)^T P e_z(0)`` from a known initial observer-coordinate error."""
    P, _ = _lyap_pair(design, optimized)
    ez0 = np.asarray(ez0, dtype=float)
    return float(ez0 @ P @ ez0)


def v0_upper_bound(design: ObserverDesign, z0, image_sup, optimized=False):
    """``lmax(P) (||z0|| + sup ||T(x)||)^2`` when the initial state is unknown."""
    P, _ = _lyap_pair(design, optimized)
    return float(sym_eigenvalues(P)[-1] * (np.linalg.norm(z0) + image_sup) ** 2)


@dataclass
class Certificate:
    design: dict
    quantities: CertifiedQuantities
    gamma: float
    ez_ultimate: float
    x_ultimate: float
    x_ultimate_noisy: Optional[float] = None
    eps_residual: Optional[float] = None
    eps_noise: Optional[float] = None
    decay_rate: float = 0.0
    V0: Optional[float] = None
    V0_mode: str = "none"
    optimized: bool = True
    notes: list = field(default_factory=list)

    @property
    def bound(self):
        """The applicable state-error bound (noisy if a noise bound is set)."""
        return self.x_ultimate_noisy if self.x_ultimate_noisy is not None else self.x_ultimate

    def to_dict(self):
        d = asdict(self)
        d["bound"] = self.bound
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("bound", None)
        d["quantities"] = CertifiedQuantities(**d["quantities"])
        return cls(**d)

    def render_text(self):
        q = self.quantities
        lines = [
            "estimation-error certificate",
            f"  A diag           : {self.design['A_diag']}",
            f"  Gamma            : {self.gamma:.6g}" + ("  (P = cI optimum)" if self.optimized else ""),
            f"  residual sup     : {q.residual_sup:.6g}",
            f"  Lipschitz        : {q.lipschitz:.6g}",
            f"  reconstruction   : {q.reconstruction:.6g}",
            f"  noise bound      : {q.noise_bound:.6g}",
            f"  e_z ultimate     : {self.ez_ultimate:.6g}",
            f"  x ultimate       : {self.x_ultimate:.6g}",
        ]
        if self.x_ultimate_noisy is not None:
            lines.append(f"  x ultimate noisy : {self.x_ultimate_noisy:.6g}  "
                         f"(eps_R={self.eps_residual:.4g}, eps_v={self.eps_noise:.4g})")
        if self.V0 is not None:
            lines.append(f"  V(0)             : {self.V0:.6g} ({self.V0_mode}), decay rate {self.decay_rate:.4g}")
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)


def make_certificate(design: ObserverDesign, q: CertifiedQuantities, optimized=True,
                     gamma=None, V0=None, V0_mode="none", notes=()):
    """Evaluate every bound for the given design and certified quantities."""
    g = float(gamma) if gamma is not None else gamma_factor(design, optimized=optimized)
    cert = Certificate(
        design=design.to_dict(), quantities=q, gamma=g,
        ez_ultimate=float(np.sqrt(g) * q.residual_sup),
        x_ultimate=float(x_ultimate(design, q, optimized, g)),
        decay_rate=float(decay_rate(design, optimized)),
        V0=V0, V0_mode=V0_mode, optimized=optimized, notes=list(notes),
    )
    if q.noise_bound > 0:
        b, er, ev = x_ultimate_noisy(design, q, optimized, g)
        cert.x_ultimate_noisy, cert.eps_residual, cert.eps_noise = b, er, ev
    return cert
