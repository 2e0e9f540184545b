"""Small dense kernels: Lyapunov solve, symmetric spectra, norm bounds, Gamma(P)."""

from dataclasses import dataclass
from typing import Optional

import numpy as np


class NoSolutionError(np.linalg.LinAlgError):
    pass


def _check_square(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def solve_lyapunov(A, Q):
    """Solve ``P A + A^T P = -Q`` for symmetric ``P``.

    The equation is vectorized into an ``n^2`` linear system and solved by LU
    with partial pivoting.
    """
    A = _check_square(A, "A")
    Q = _check_square(Q, "Q")
    n = A.shape[0]
    if Q.shape != A.shape:
        raise ValueError("A and Q must have the same shape")
    if np.max(np.real(np.linalg.eigvals(A))) >= 0:
        raise NoSolutionError("A is not Hurwitz")
    eye = np.eye(n)
    # column-major vec: vec(P A) = (A^T kron I) vec(P), vec(A^T P) = (I kron A^T) vec(P)
    K = np.kron(A.T, eye) + np.kron(eye, A.T)
    if np.linalg.cond(K) > 1e14:
        raise NoSolutionError("Lyapunov operator is singular")
    p = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    P = p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def lyapunov_residual(A, P, Q):
    """Relative Frobenius residual of the Lyapunov equation."""
    R = P @ A + A.T @ P + Q
    return np.linalg.norm(R) / max(np.linalg.norm(Q), 1e-300)


def sym_eigenvalues(M):
    """Ascending eigenvalues of a symmetric matrix."""
    M = _check_square(M, "M")
    scale = max(np.abs(M).max(), 1.0)
    if np.abs(M - M.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    return np.linalg.eigvalsh(0.5 * (M + M.T))


def power_iteration_norm(M, iters=50, seed=0):
    """Power-iteration estimate of ``||M||_2`` (a lower witness).

    Accepts a batch of matrices with shape ``(..., m, n)``.
    """
    M = np.asarray(M, dtype=float)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(M.shape[:-2] + (M.shape[-1],))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    est = np.zeros(M.shape[:-2])
    for _ in range(iters):
        w = np.einsum("...ij,...j->...i", M, v)
        est = np.linalg.norm(w, axis=-1)
        u = np.einsum("...ij,...i->...j", M, w)
        nu = np.linalg.norm(u, axis=-1, keepdims=True)
        v = np.where(nu > 0, u / np.where(nu > 0, nu, 1.0), v)
    return est


def norm_bound_1inf(M):
    """``sqrt(||M||_1 ||M||_inf)``, an upper bound on ``||M||_2`` (batched)."""
    A = np.abs(np.asarray(M, dtype=float))
    return np.sqrt(A.sum(axis=-2).max(axis=-1) * A.sum(axis=-1).max(axis=-1))


def norm_upper(M):
    """Smaller of ``sqrt(||M||_1 ||M||_inf)`` and ``||M||_F`` (batched).

    Both bound ``||M||_2`` from above.  The Frobenius norm keeps the
    overestimate within ``sqrt(rank)``, which the 1/inf product alone does not
    for thin matrices.
    """
    M = np.asarray(M, dtype=float)
    fro = np.sqrt(np.sum(M * M, axis=(-2, -1)))
    return np.minimum(norm_bound_1inf(M), fro)


def spectral_norm_upper(M):
    """Return ``(upper, witness)`` bracketing the spectral norm of ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(norm_upper(M)), float(power_iteration_norm(M))


def inv_sqrt_spd(Q):
    w, V = np.linalg.eigh(Q)
    if w.min() <= 0:
        raise ValueError("matrix is not positive definite")
    return (V / np.sqrt(w)) @ V.T


@dataclass
class ObserverDesign:
    """Observer matrices ``(A, B)`` with a Lyapunov pair ``(P, Q)``."""

    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    gamma: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        self.B = B.reshape(-1, 1) if B.ndim == 1 else B
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if not np.allclose(self.A, np.diag(np.diag(self.A)), rtol=0, atol=0):
            raise ValueError("A must be diagonal")
        if np.any(np.diag(self.A) >= 0):
            raise ValueError("A must have strictly negative diagonal entries")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError("B must have n_z rows")
        if lyapunov_residual(self.A, self.P, self.Q) > 1e-10:
            raise ValueError("(P, Q) do not satisfy the Lyapunov equation")
        if sym_eigenvalues(self.P)[0] <= 0 or sym_eigenvalues(self.Q)[0] <= 0:
            raise ValueError("P and Q must be positive definite")
        if not self.gamma:
            self.gamma = gamma_factor(self, optimized=True)

    @classmethod
    def diagonal(cls, eigenvalues, B=None, Q=None, c=1.0):
        """Diagonal ``A = -diag(eigenvalues)``.

        Without ``Q`` the optimal ``P = cI`` (``Q = -2cA``) is used; with
        ``Q`` the Lyapunov equation is solved for ``P``.
        """
        lam = np.asarray(eigenvalues, dtype=float)
        A = -np.diag(lam)
        B = np.ones((lam.size, 1)) if B is None else B
        if Q is None:
            P = c * np.eye(lam.size)
            Q = -2.0 * c * A
        else:
            P = solve_lyapunov(A, Q)
        return cls(A, B, P, Q)

    @property
    def n_z(self):
        return self.A.shape[0]

    @property
    def lambda_min(self):
        """Smallest decay rate ``min_i |A_ii|``."""
        return float(np.min(-np.diag(self.A)))

    def to_dict(self):
        return {"A_diag": np.diag(self.A).tolist(), "B": self.B.tolist(),
                "P": self.P.tolist(), "Q": self.Q.tolist(), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d):
        return cls(np.diag(d["A_diag"]), d["B"], d["P"], d["Q"], d.get("gamma", 0.0))


def design_constants(design: ObserverDesign, optimized=False, P=None, Q=None):
    """Return ``(k, qp, qpb)``: the square-root prefactor and the two weighted norms.

    ``k = sqrt(4 lmax(P) / (lmin(Q) lmin(P)))``, ``qp = ||Q^{-1/2} P||``,
    ``qpb = ||Q^{-1/2} P B||``.  With ``optimized`` the pair ``P = I``,
    ``Q = -2A`` is used, for which ``k * qp = 1 / lambda_min(A)``.
    """
    if optimized:
        P = np.eye(design.n_z)
        Q = -2.0 * design.A
    else:
        P = design.P if P is None else P
        Q = design.Q if Q is None else Q
    ep, eq = sym_eigenvalues(P), sym_eigenvalues(Q)
    k = np.sqrt(4.0 * ep[-1] / (eq[0] * ep[0]))
    Qih = inv_sqrt_spd(Q)
    qp = np.linalg.norm(Qih @ P, 2)
    qpb = np.linalg.norm(Qih @ P @ design.B, 2)
    return float(k), float(qp), float(qpb)


def gamma_factor(design: ObserverDesign, optimized=True):
    """Residual amplification ``4 lmax(P) / (lmin(Q) lmin(P)) * ||Q^{-1/2} P||^2``.

    ``optimized`` returns the minimum over ``P = cI``, ``1 / lambda_min(A)^2``.
    """
    if optimized:
        return 1.0 / design.lambda_min ** 2
    k, qp, _ = design_constants(design)
    return (k * qp) ** 2
