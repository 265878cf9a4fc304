"""H2 norms and H2 errors of descriptor LTI systems.

The production path solves a generalized Lyapunov equation (one factorization
of E, then a Schur-based dense solve); an adaptive frequency-quadrature path
serves as an independent cross-check oracle. For second-order systems with
proportional (Rayleigh) damping an exact modal closed form avoids the dense
O(ns^3) solve entirely, which is what makes large finite-element models
tractable.
"""

import warnings

import numpy as np
import scipy.integrate
import scipy.linalg as sla
import scipy.sparse as sp

from . import _matrix as mx
from .core import SecondOrderSystem, StateSpaceSystem
from .exceptions import (
    IllConditionedWarning,
    InvalidModelError,
    OracleFailureError,
    UnstableSystemError,
)

LYAPUNOV_RESIDUAL_RTOL = 1e-8


def solve_generalized_lyapunov(A, E, B):
    """Controllability Gramian P of a stable descriptor pair: A P E^T + E P A^T + B B^T = 0.

    (A, E) must be a stable pencil with nonsingular E. The equation is reduced
    to a standard Lyapunov problem through one factorization of E and solved
    via the real Schur form. Returns a symmetric positive semidefinite P.

    Raises UnstableSystemError (with the offending eigenvalue) if any
    generalized eigenvalue has nonnegative real part; warns with the residual
    attached if the solve is ill conditioned.
    """
    Ad = mx.to_dense(A)
    Ed = mx.to_dense(E)
    Bd = mx.to_dense(B)
    lu, piv = sla.lu_factor(Ed)
    A_std = sla.lu_solve((lu, piv), Ad)
    B_std = sla.lu_solve((lu, piv), Bd)

    T, Z = sla.schur(A_std, output="real")
    eigs = sla.eigvals(T)
    worst = eigs[np.argmax(eigs.real)]
    if worst.real >= 0.0:
        raise UnstableSystemError(
            f"pencil has an eigenvalue with nonnegative real part: {worst:.6g}; "
            "the Gramian equation has no solution", eigenvalue=worst)

    Q = Z.T @ (B_std @ B_std.T) @ Z
    trsyl = sla.get_lapack_funcs("trsyl", (T, Q))
    Y, scale, info = trsyl(T, T, -Q, tranb="T")
    if info < 0:
        raise ValueError(f"internal Sylvester solve failed (info={info})")
    P = Z @ (Y / scale) @ Z.T
    P = 0.5 * (P + P.T)

    residual = np.linalg.norm(Ad @ P @ Ed.T + Ed @ P @ Ad.T + Bd @ Bd.T, "fro")
    scale_ref = max(np.linalg.norm(Ad, "fro") * np.linalg.norm(P, "fro")
                    * np.linalg.norm(Ed, "fro"), np.linalg.norm(Bd, "fro") ** 2, 1e-300)
    if residual > LYAPUNOV_RESIDUAL_RTOL * scale_ref:
        warnings.warn(
            f"Lyapunov solve is ill conditioned: relative residual "
            f"{residual / scale_ref:.3e}", IllConditionedWarning, stacklevel=2)
    return P


def h2_norm(sys: StateSpaceSystem) -> float:
    """H2 norm sqrt(trace(C P C^T)) with P the controllability Gramian.

    Defined for stable systems without feedthrough; the state-space type has
    no feedthrough term by construction. Equals the frequency-domain integral
    (1/2pi) int ||G(jw)||_F^2 dw, square-rooted.
    """
    P = solve_generalized_lyapunov(sys.A, sys.E, sys.B)
    C = mx.to_dense(sys.C)
    val = float(np.trace(C @ P @ C.T))
    return float(np.sqrt(max(val, 0.0)))


def h2_error(sys1: StateSpaceSystem, sys2: StateSpaceSystem) -> float:
    """Exact H2 norm of the difference of two transfer functions.

    Builds the augmented system (blockdiag E, blockdiag A, stacked B,
    [C1, -C2]) whose transfer function is G1 - G2 and returns its h2_norm.
    Input/output dimensions must agree; both systems must be stable.
    """
    if sys1.n_inputs != sys2.n_inputs or sys1.n_outputs != sys2.n_outputs:
        raise InvalidModelError(
            f"cannot compare systems with port shapes "
            f"({sys1.n_outputs}x{sys1.n_inputs}) vs ({sys2.n_outputs}x{sys2.n_inputs})")
    E = sla.block_diag(mx.to_dense(sys1.E), mx.to_dense(sys2.E))
    A = sla.block_diag(mx.to_dense(sys1.A), mx.to_dense(sys2.A))
    B = np.vstack([mx.to_dense(sys1.B), mx.to_dense(sys2.B)])
    C = np.hstack([mx.to_dense(sys1.C), -mx.to_dense(sys2.C)])
    diff = StateSpaceSystem(E=E, A=A, B=B, C=C)
    return h2_norm(diff)


def h2_norm_quadrature(sys: StateSpaceSystem, tol=1e-8) -> float:
    """Frequency-domain H2 norm: (1/2pi * int ||G(jw)||_F^2 dw)^(1/2).

    Adaptive quadrature over [0, W] with breakpoints at the resonance
    frequencies plus a substitution-based tail integral over [W, inf).
    Cross-validation oracle only; the Gramian path is the production route.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    from .core import eval_transfer

    Ad, Ed = mx.to_dense(sys.A), mx.to_dense(sys.E)
    eigs = sla.eigvals(Ad, Ed)
    worst = eigs[np.argmax(eigs.real)]
    if worst.real >= 0.0:
        raise UnstableSystemError(
            f"quadrature oracle requires a stable system; eigenvalue {worst:.6g}",
            eigenvalue=worst)

    def integrand(w):
        G = eval_transfer(sys, 1j * w)
        return float(np.sum(np.abs(G) ** 2))

    scale = float(np.max(np.abs(eigs))) if eigs.size else 1.0
    scale = max(scale, 1e-12)
    cutoff = 1e3 * scale
    resonances = np.unique(np.abs(eigs.imag))
    points = [float(p) for p in resonances if 0.0 < p < cutoff]

    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.integrate.IntegrationWarning)
        try:
            body, body_err = scipy.integrate.quad(
                integrand, 0.0, cutoff, points=points or None,
                epsabs=0.0, epsrel=tol, limit=400)
            # Tail via u = 1/w: int_W^inf f(w) dw = int_0^{1/W} f(1/u)/u^2 du.
            tail, tail_err = scipy.integrate.quad(
                lambda u: integrand(1.0 / u) / u ** 2, 0.0, 1.0 / cutoff,
                epsabs=max(tol * body, 1e-300), epsrel=tol, limit=200)
        except (scipy.integrate.IntegrationWarning, Exception) as exc:
            if isinstance(exc, (UnstableSystemError, KeyboardInterrupt)):
                raise
            raise OracleFailureError(
                f"frequency quadrature did not converge within budget: {exc}") from exc

    total = (body + tail) / np.pi
    err = (body_err + tail_err) / np.pi
    if total > 0 and err > 50 * tol * total + 1e-290:
        raise OracleFailureError(
            f"quadrature error estimate {err:.3e} exceeds tolerance for value {total:.3e}")
    return float(np.sqrt(max(total, 0.0)))


def modal_h2_norm(sos: SecondOrderSystem) -> float:
    """Exact H2 norm of a proportionally damped second-order system.

    Requires R = alpha*M + beta*K (within 1e-10 relative), so the
    (M, K) eigenvectors decouple the dynamics into scalar oscillators
    1/(s^2 + r_i s + lam_i). The norm follows from the closed-form pairwise
    inner products

        <G_i, G_j> = (r_i + r_j) / ((lam_i - lam_j)^2
                      + (r_i + r_j)(lam_i r_j + lam_j r_i)),

    summed with the modal input/output weights. Cost is one symmetric
    eigendecomposition plus an O(n^2) sum; no Lyapunov solve of the full
    2n-dimensional realization is needed.
    """
    ab = sos.rayleigh_coefficients()
    if ab is None:
        raise InvalidModelError(
            "damping is not proportional to the mass/stiffness pencil; "
            "use the Gramian path instead")
    alpha, beta = ab
    lam, Phi = _pencil_eigh(sos.K, sos.M)
    r = alpha + beta * lam
    if np.any(lam <= 0.0) or np.any(r <= 0.0):
        raise UnstableSystemError(
            "modal closed form requires every mode to be strictly stable "
            f"(min stiffness eig {lam.min():.3e}, min damping {r.min():.3e})")

    U = mx.to_dense(sos.Cout) @ Phi            # p x n modal output weights
    Vm = Phi.T @ mx.to_dense(sos.F)            # n x m modal input weights
    W = (U.T @ U) * (Vm @ Vm.T)
    L1, L2 = lam[:, None], lam[None, :]
    R1, R2 = r[:, None], r[None, :]
    inner = (R1 + R2) / ((L1 - L2) ** 2 + (R1 + R2) * (L1 * R2 + L2 * R1))
    val = float(np.sum(W * inner))
    return float(np.sqrt(max(val, 0.0)))


def _pencil_eigh(K, M):
    """All eigenpairs of K phi = lam M phi with M-orthonormal eigenvectors."""
    n = mx.shape2(K)[0]
    if _is_diagonal(M):
        d = np.asarray(M.diagonal() if sp.issparse(M) else np.diag(mx.to_dense(M)), dtype=float)
        s = 1.0 / np.sqrt(d)
        Ks = mx.to_csr(K).multiply(s[:, None]).multiply(s[None, :]).tocsr() if sp.issparse(K) \
            else s[:, None] * mx.to_dense(K) * s[None, :]
        bands = _tridiagonal_bands(Ks)
        if bands is not None and n > 64:
            lam, V = sla.eigh_tridiagonal(*bands)
            return lam, s[:, None] * V
        lam, V = sla.eigh(mx.to_dense(Ks))
        return lam, s[:, None] * V
    lam, Phi = sla.eigh(mx.to_dense(K), mx.to_dense(M))
    return lam, Phi


def _is_diagonal(X):
    if sp.issparse(X):
        Xc = X.tocoo()
        return np.all(Xc.row == Xc.col)
    Xd = mx.to_dense(X)
    return np.count_nonzero(Xd - np.diag(np.diag(Xd))) == 0


def _tridiagonal_bands(X):
    """(diagonal, superdiagonal) if X is symmetric tridiagonal, else None."""
    if sp.issparse(X):
        Xc = X.tocoo()
        if np.any(np.abs(Xc.row - Xc.col) > 1):
            return None
        Xd = X.toarray()
    else:
        Xd = np.asarray(X)
        if np.count_nonzero(np.triu(Xd, 2)) or np.count_nonzero(np.tril(Xd, -2)):
            return None
    return np.diag(Xd).copy(), np.diag(Xd, 1).copy()
