"""Small helpers for code that accepts both dense arrays and scipy sparse matrices."""

import hashlib

import numpy as np
import scipy.sparse as sp


def is_sparse(x):
    return sp.issparse(x)


def as_matrix(x):
    """Coerce to a 2-D float ndarray unless already a scipy sparse matrix."""
    if sp.issparse(x):
        return x
    return np.atleast_2d(np.asarray(x, dtype=float))


def to_dense(x):
    """Return ``x`` as a 2-D ndarray of float (or complex), densifying if sparse."""
    if sp.issparse(x):
        return np.asarray(x.todense())
    return np.atleast_2d(np.asarray(x))


def to_csr(x):
    return x.tocsr() if sp.issparse(x) else sp.csr_matrix(np.atleast_2d(np.asarray(x, dtype=float)))


def to_csc(x):
    return x.tocsc() if sp.issparse(x) else sp.csc_matrix(np.atleast_2d(np.asarray(x, dtype=float)))


def shape2(x):
    s = x.shape
    if len(s) != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {s}")
    return s


def fro_norm(x):
    if sp.issparse(x):
        return float(np.sqrt((x.multiply(x)).sum()))
    return float(np.linalg.norm(x, "fro"))


def symmetry_defect(x):
    """Relative Frobenius distance of ``x`` from its own transpose."""
    denom = fro_norm(x)
    if denom == 0.0:
        return 0.0
    return fro_norm(x - x.T) / denom


def symmetrize(x):
    """(x + x.T)/2, preserving sparsity."""
    if sp.issparse(x):
        return ((x + x.T) * 0.5).tocsr()
    return 0.5 * (x + x.T)


def gershgorin_lower_bound(x):
    """Lower bound on the spectrum of a symmetric matrix: min_i (x_ii - sum_j!=i |x_ij|)."""
    if sp.issparse(x):
        xc = x.tocsr()
        diag = xc.diagonal()
        absrow = np.abs(xc).sum(axis=1).A1 if hasattr(np.abs(xc).sum(axis=1), "A1") else np.asarray(np.abs(xc).sum(axis=1)).ravel()
        return float(np.min(diag - (absrow - np.abs(diag))))
    xd = np.asarray(x)
    diag = np.diag(xd)
    offsum = np.abs(xd).sum(axis=1) - np.abs(diag)
    return float(np.min(diag - offsum))


def min_eig_symmetric(x, dense_limit=3000):
    """Smallest eigenvalue of a symmetric matrix, choosing a path by size."""
    n = x.shape[0]
    if n <= dense_limit:
        return float(np.linalg.eigvalsh(to_dense(x))[0])
    import scipy.sparse.linalg as spla

    w = spla.eigsh(to_csr(x), k=1, which="SA", maxiter=20000, tol=1e-9,
                   return_eigenvectors=False)
    return float(w[0])


def definiteness(x, semidefinite_floor=1e-10):
    """Classify a symmetric matrix: returns (is_pd, is_psd).

    The Gershgorin bound settles the common diagonally dominant cases without
    an eigenvalue solve; otherwise the smallest eigenvalue is computed.
    Semidefiniteness allows eigenvalues down to -semidefinite_floor * scale.
    """
    scale = max(float(np.max(np.abs(x.diagonal() if sp.issparse(x) else np.diag(to_dense(x))))), 1.0)
    lb = gershgorin_lower_bound(x)
    if lb > 0.0:
        return True, True
    if lb >= -semidefinite_floor * scale:
        # Gershgorin certifies near-PSD, but cannot certify strict PD.
        return False, True
    lam = min_eig_symmetric(x)
    tol = semidefinite_floor * scale
    return lam > tol, lam >= -tol


def fingerprint(*matrices):
    """Stable content hash of a sequence of matrices (dense or sparse)."""
    h = hashlib.sha256()
    for x in matrices:
        if sp.issparse(x):
            xc = x.tocsr()
            xc.sum_duplicates()
            h.update(b"sparse")
            h.update(np.asarray(xc.shape, dtype=np.int64).tobytes())
            h.update(xc.indptr.astype(np.int64).tobytes())
            h.update(xc.indices.astype(np.int64).tobytes())
            h.update(np.ascontiguousarray(xc.data, dtype=np.float64).tobytes())
        else:
            xd = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
            h.update(b"dense")
            h.update(np.asarray(xd.shape, dtype=np.int64).tobytes())
            h.update(xd.tobytes())
    return h.hexdigest()
