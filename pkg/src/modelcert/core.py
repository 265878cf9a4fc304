"""Shared numerical types: second-order mechanical systems, descriptor state-space
systems, and finite-energy input signals.

A second-order system  M u'' + R u' + K u = F h(t),  y = Cout u  is the native
form of both assembled mass-spring-damper networks and semi-discretized continuum
models. Analysis happens on the first-order descriptor form

    E x' = A x + B h,    y = C x,

with E = blockdiag(I, M), A = [[0, I], [-K, -R]], B = [0; F], C = [Cout, 0],
so that outputs select displacements only.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _matrix as mx
from .exceptions import InvalidModelError, SingularSolveError

SYMMETRY_RTOL = 1e-12

# Relative reciprocal-condition threshold below which a resolvent solve is
# treated as "at a pole".
_RCOND_FLOOR = 1e3 * np.finfo(float).eps


@dataclass(frozen=True)
class SecondOrderSystem:
    """Mechanical system M u'' + R u' + K u = F h(t), y = Cout u.

    M, K, R are square symmetric of identical dimension n (kg, N/m, N s/m);
    M must be positive definite, K and R positive semidefinite. F (n x m)
    maps m force channels onto nodes; Cout (p x n) selects displacement
    outputs. Matrices may be dense ndarrays or scipy sparse matrices; they
    are symmetrized on ingestion after the symmetry check passes.
    """

    M: object
    K: object
    R: object
    F: object
    Cout: object

    def __post_init__(self):
        for name in ("M", "K", "R"):
            object.__setattr__(self, name, mx.as_matrix(getattr(self, name)))
        # A bare vector F is one input column; a bare vector Cout one output row.
        if not mx.is_sparse(self.F) and np.ndim(self.F) == 1:
            object.__setattr__(self, "F", np.asarray(self.F, dtype=float).reshape(-1, 1))
        else:
            object.__setattr__(self, "F", mx.as_matrix(self.F))
        if not mx.is_sparse(self.Cout) and np.ndim(self.Cout) == 1:
            object.__setattr__(self, "Cout", np.asarray(self.Cout, dtype=float).reshape(1, -1))
        else:
            object.__setattr__(self, "Cout", mx.as_matrix(self.Cout))
        M, K, R = self.M, self.K, self.R
        n = mx.shape2(M)[0]
        for name, X in (("M", M), ("K", K), ("R", R)):
            rows, cols = mx.shape2(X)
            if rows != cols or rows != n:
                raise InvalidModelError(
                    f"{name} must be square of dimension {n}, got {rows}x{cols}")
            defect = mx.symmetry_defect(X)
            if defect > SYMMETRY_RTOL:
                raise InvalidModelError(
                    f"{name} is not symmetric: relative asymmetry {defect:.3e} "
                    f"exceeds {SYMMETRY_RTOL:.0e}")
        object.__setattr__(self, "M", mx.symmetrize(M))
        object.__setattr__(self, "K", mx.symmetrize(K))
        object.__setattr__(self, "R", mx.symmetrize(R))

        is_pd, _ = mx.definiteness(self.M)
        if not is_pd:
            raise InvalidModelError("M must be positive definite (all eigenvalues > 0)")
        for name, X in (("K", self.K), ("R", self.R)):
            _, is_psd = mx.definiteness(X)
            if not is_psd:
                raise InvalidModelError(f"{name} must be positive semidefinite")

        if mx.shape2(self.F)[0] != n:
            raise InvalidModelError(
                f"F must have n={n} rows, got {mx.shape2(self.F)[0]}")
        if mx.shape2(self.Cout)[1] != n:
            raise InvalidModelError(
                f"Cout must have n={n} columns, got {mx.shape2(self.Cout)[1]}")

    @property
    def n(self):
        """Node (degree-of-freedom) count."""
        return mx.shape2(self.M)[0]

    @property
    def n_inputs(self):
        return mx.shape2(self.F)[1]

    @property
    def n_outputs(self):
        return mx.shape2(self.Cout)[0]

    def rayleigh_coefficients(self, rtol=1e-10):
        """Least-squares fit R ~ alpha*M + beta*K; returns (alpha, beta) or None.

        None means the damping is not proportional within ``rtol`` relative
        Frobenius residual, so it does not share eigenvectors with the (M, K)
        pencil and the modal decoupling shortcut does not apply.
        """
        def ip(X, Y):
            if sp.issparse(X) or sp.issparse(Y):
                return float((mx.to_csr(X).multiply(mx.to_csr(Y))).sum())
            return float(np.sum(np.asarray(X) * np.asarray(Y)))

        g = np.array([[ip(self.M, self.M), ip(self.M, self.K)],
                      [ip(self.M, self.K), ip(self.K, self.K)]])
        rhs = np.array([ip(self.M, self.R), ip(self.K, self.R)])
        ab = np.linalg.lstsq(g, rhs, rcond=None)[0]
        alpha, beta = float(ab[0]), float(ab[1])
        resid = self.R - alpha * self.M - beta * self.K
        r_norm = mx.fro_norm(self.R)
        if mx.fro_norm(resid) <= rtol * max(r_norm, 1.0):
            return alpha, beta
        return None


@dataclass(frozen=True)
class StateSpaceSystem:
    """Descriptor LTI system E x' = A x + B h, y = C x with invertible E.

    The pencil (A, E) must be regular; this package only constructs systems
    with nonsingular E (second-order conversions with positive definite M).
    ``second_order`` optionally records the mechanical system this state
    space was derived from, which enables structure-exploiting solvers.
    """

    E: object
    A: object
    B: object
    C: object
    second_order: SecondOrderSystem = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("E", "A"):
            object.__setattr__(self, name, mx.as_matrix(getattr(self, name)))
        ns = mx.shape2(self.E)[0]
        if mx.shape2(self.E) != (ns, ns) or mx.shape2(self.A) != (ns, ns):
            raise InvalidModelError("E and A must be square and equally sized")
        if not mx.is_sparse(self.B) and np.ndim(self.B) == 1:
            object.__setattr__(self, "B", np.asarray(self.B, dtype=float).reshape(-1, 1))
        else:
            object.__setattr__(self, "B", mx.as_matrix(self.B))
        if not mx.is_sparse(self.C) and np.ndim(self.C) == 1:
            object.__setattr__(self, "C", np.asarray(self.C, dtype=float).reshape(1, -1))
        else:
            object.__setattr__(self, "C", mx.as_matrix(self.C))
        if mx.shape2(self.B)[0] != ns:
            raise InvalidModelError(f"B must have {ns} rows")
        if mx.shape2(self.C)[1] != ns:
            raise InvalidModelError(f"C must have {ns} columns")
        _assert_invertible(self.E)

    @property
    def order(self):
        """State dimension ns."""
        return mx.shape2(self.E)[0]

    @property
    def n_inputs(self):
        return mx.shape2(self.B)[1]

    @property
    def n_outputs(self):
        return mx.shape2(self.C)[0]

    def fingerprint(self):
        """Content hash identifying this system's matrices."""
        return mx.fingerprint(self.E, self.A, self.B, self.C)


def _assert_invertible(E):
    """Check E is invertible via a successful factorization."""
    try:
        if sp.issparse(E):
            spla.splu(E.tocsc())
        else:
            lu, piv = sla.lu_factor(mx.to_dense(E))
            if np.any(np.diag(lu) == 0.0):
                raise RuntimeError("zero pivot")
    except (RuntimeError, ValueError, sla.LinAlgError) as exc:
        raise InvalidModelError(f"descriptor matrix E is singular: {exc}") from exc


def second_order_to_state_space(sys: SecondOrderSystem) -> StateSpaceSystem:
    """First-order descriptor realization of a second-order mechanical system.

    Returns (E, A, B, C) with E = blockdiag(I, M), A = [[0, I], [-K, -R]],
    B = [0; F], C = [Cout, 0]; its transfer function equals
    Cout (M s^2 + R s + K)^{-1} F away from poles. Sparse inputs yield sparse
    blocks, dense inputs dense blocks.
    """
    n = sys.n
    if mx.is_sparse(sys.M) or mx.is_sparse(sys.K) or mx.is_sparse(sys.R):
        I = sp.identity(n, format="csr")
        E = sp.block_diag((I, mx.to_csr(sys.M)), format="csr")
        A = sp.bmat([[None, I], [-mx.to_csr(sys.K), -mx.to_csr(sys.R)]], format="csr")
        B = sp.bmat([[sp.csr_matrix((n, sys.n_inputs))], [mx.to_csr(sys.F)]], format="csr")
    else:
        I = np.eye(n)
        Z = np.zeros((n, n))
        E = np.block([[I, Z], [Z, mx.to_dense(sys.M)]])
        A = np.block([[Z, I], [-mx.to_dense(sys.K), -mx.to_dense(sys.R)]])
        B = np.vstack([np.zeros((n, sys.n_inputs)), mx.to_dense(sys.F)])
    C = np.hstack([mx.to_dense(sys.Cout), np.zeros((sys.n_outputs, n))])
    return StateSpaceSystem(E=E, A=A, B=B, C=C, second_order=sys)


def eval_transfer(sys: StateSpaceSystem, s) -> np.ndarray:
    """Evaluate the transfer function C (sE - A)^{-1} B at complex frequency s.

    One linear solve per input column; no inverse is materialized. Raises
    SingularSolveError when s coincides (within solver tolerance) with a
    generalized eigenvalue of (A, E).
    """
    s = complex(s)
    B = mx.to_dense(sys.B).astype(complex)
    if mx.is_sparse(sys.E) or mx.is_sparse(sys.A):
        pencil = (s * mx.to_csc(sys.E) - mx.to_csc(sys.A)).astype(complex)
        try:
            lu = spla.splu(pencil)
            X = lu.solve(B)
        except (RuntimeError, ValueError) as exc:
            raise SingularSolveError(f"resolvent is singular at s={s}: {exc}", s=s) from exc
        if not np.all(np.isfinite(X)):
            raise SingularSolveError(f"resolvent solve overflowed at s={s}", s=s)
    else:
        pencil = s * mx.to_dense(sys.E) - mx.to_dense(sys.A)
        try:
            lu, piv = sla.lu_factor(pencil)
        except sla.LinAlgError as exc:
            raise SingularSolveError(f"resolvent is singular at s={s}", s=s) from exc
        anorm = np.linalg.norm(pencil, 1)
        rcond = _rcond_from_lu(lu, anorm)
        if not np.isfinite(rcond) or rcond < _RCOND_FLOOR:
            raise SingularSolveError(
                f"s={s} is a pole within solver tolerance (rcond={rcond:.2e})", s=s)
        X = sla.lu_solve((lu, piv), B)
    return mx.to_dense(sys.C).astype(complex) @ X


def _rcond_from_lu(lu, anorm):
    gecon = sla.get_lapack_funcs("gecon", (lu,))
    rcond, info = gecon(lu, anorm)
    if info != 0:
        raise SingularSolveError("condition estimate failed")
    return rcond


_SIGNAL_KINDS = ("step", "ramp-up-hold", "sine-burst", "sampled")


@dataclass(frozen=True)
class InputSignal:
    """A forcing signal h(t), scalar shape times a per-channel amplitude.

    kind is one of 'step', 'ramp-up-hold', 'sine-burst', 'sampled'. All kinds
    are zero outside their active window, so every signal with a declared
    duration has finite L2 energy; a step with duration=None is usable for
    simulation but rejected wherever finite energy is required.

    Parameters are in SI units: amplitude in N (or Pa scaled through the
    input map), times in seconds, frequency in rad/s.
    """

    kind: str
    amplitude: object = 1.0
    duration: float = None     # end of the active window [0, duration)
    ramp: float = None         # ramp-up-hold: rise time
    frequency: float = None    # sine-burst: angular frequency, rad/s
    times: object = None       # sampled: sample instants
    values: object = None      # sampled: sample values

    def __post_init__(self):
        if self.kind not in _SIGNAL_KINDS:
            raise InvalidModelError(
                f"unknown signal kind {self.kind!r}; expected one of {_SIGNAL_KINDS}")
        if self.kind == "ramp-up-hold":
            if self.ramp is None or self.ramp <= 0:
                raise InvalidModelError("ramp-up-hold requires ramp > 0")
            if self.duration is None or self.duration < self.ramp:
                raise InvalidModelError("ramp-up-hold requires duration >= ramp")
        if self.kind == "sine-burst":
            if self.frequency is None or self.frequency <= 0:
                raise InvalidModelError("sine-burst requires frequency > 0 (rad/s)")
            if self.duration is None or self.duration <= 0:
                raise InvalidModelError("sine-burst requires a finite duration > 0")
        if self.kind == "sampled":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or v.shape != t.shape or t.size < 2:
                raise InvalidModelError("sampled signal needs equally long 1-D times/values")
            if np.any(np.diff(t) <= 0):
                raise InvalidModelError("sampled signal times must be strictly increasing")
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "values", v)
        if self.duration is not None and self.duration <= 0:
            raise InvalidModelError("duration must be positive when given")

    @property
    def amplitude_vector(self):
        return np.atleast_1d(np.asarray(self.amplitude, dtype=float))

    @property
    def end_time(self):
        """End of the active window, or None for an unending step."""
        if self.kind == "sampled":
            return float(self.times[-1])
        return self.duration

    def shape_at(self, t):
        """Unit-amplitude shape value(s) at time(s) t."""
        t = np.asarray(t, dtype=float)
        if self.kind == "step":
            out = np.ones_like(t)
            if self.duration is not None:
                out = np.where(t < self.duration, out, 0.0)
            return np.where(t >= 0.0, out, 0.0)
        if self.kind == "ramp-up-hold":
            out = np.clip(t / self.ramp, 0.0, 1.0)
            out = np.where((t >= 0.0) & (t < self.duration), out, 0.0)
            return out
        if self.kind == "sine-burst":
            out = np.sin(self.frequency * t)
            return np.where((t >= 0.0) & (t < self.duration), out, 0.0)
        inside = (t >= self.times[0]) & (t <= self.times[-1])
        return np.where(inside, np.interp(t, self.times, self.values), 0.0)

    def sample(self, t):
        """Signal value(s) at time(s) t, shaped (..., n_channels)."""
        base = self.shape_at(t)
        return np.multiply.outer(base, self.amplitude_vector)

    def shape_energy(self):
        """Integral of the squared unit-amplitude shape over its window."""
        if self.kind == "step":
            if self.duration is None:
                from .exceptions import InfiniteEnergyError
                raise InfiniteEnergyError(
                    "an unending step has unbounded L2 energy; the time-domain "
                    "bound requires a finite-energy input (declare a duration)")
            return float(self.duration)
        if self.kind == "ramp-up-hold":
            return float(self.ramp / 3.0 + (self.duration - self.ramp))
        if self.kind == "sine-burst":
            w, T = self.frequency, self.duration
            return float(T / 2.0 - np.sin(2.0 * w * T) / (4.0 * w))
        return float(np.trapezoid(self.values ** 2, self.times))

    def energy(self):
        """L2 energy of the vector signal: integral of ||h(t)||_2^2 dt."""
        a = self.amplitude_vector
        return float(np.sum(a ** 2)) * self.shape_energy()
