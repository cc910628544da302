"""Shared dense/sparse linear-algebra helpers.

Matrix exponentials are applied by scaling-and-squaring (dense, dim <= 1024)
or by Krylov-style evaluation (sparse, above); inverses use direct
factorization with one step of iterative refinement to a 1e-10 residual.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_EXPM_DIM = 1024
REFINE_TOL = 1e-10


def apply_semigroup(A, V, t=1.0):
    """exp(-t*A) @ V for a dense or sparse square operator A.

    Dense operators up to DENSE_EXPM_DIM use scaling-and-squaring; larger
    (sparse) ones use Krylov-type expm_multiply on the columns of V.
    """
    V = np.asarray(V, dtype=complex)
    if sp.issparse(A):
        if A.shape[0] <= DENSE_EXPM_DIM:
            return sla.expm(-t * A.toarray()) @ V
        return spla.expm_multiply((-t) * A.tocsc(), V)
    if A.shape[0] <= DENSE_EXPM_DIM:
        return sla.expm(-t * A) @ V
    return spla.expm_multiply((-t) * sp.csc_matrix(A), V)


def solve_refined(A, B):
    """Solve A X = B by LU with iterative refinement.

    Raises if the refined residual exceeds REFINE_TOL relative to |B|.
    Accepts dense or sparse A; B may be a vector or a block of columns.
    """
    B = np.asarray(B, dtype=complex)
    b2 = B.reshape(B.shape[0], -1)
    if sp.issparse(A):
        lu = spla.splu(A.tocsc())
        X = lu.solve(b2)
        R = b2 - A @ X
        X = X + lu.solve(R)
        R = b2 - A @ X
    else:
        lu, piv = sla.lu_factor(A)
        X = sla.lu_solve((lu, piv), b2)
        R = b2 - A @ X
        X = X + sla.lu_solve((lu, piv), R)
        R = b2 - A @ X
    scale = max(1.0, float(np.abs(b2).max()))
    resid = float(np.abs(R).max()) / scale
    if resid > REFINE_TOL:
        raise np.linalg.LinAlgError(f"refined solve residual {resid:.2e} exceeds {REFINE_TOL:.0e}")
    return X.reshape(B.shape)


def sector_fit(quad_samples, grid_size=64):
    """Fit sector constants (b, q) covering probe values of <f, A f>.

    quad_samples is a sequence of (re, im, norm2) triples.  Returns the pair
    minimizing b + q * mean(re) subject to |im| <= q*re + b*norm2 on every
    probe, scanned over a nonnegative q grid.
    """
    re = np.array([s[0] for s in quad_samples])
    im = np.abs([s[1] for s in quad_samples])
    n2 = np.array([s[2] for s in quad_samples])
    re_pos = np.maximum(re, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_hi = np.nanmax(np.where(re_pos > 0, im / np.maximum(re_pos, 1e-300), 0.0))
    if not np.isfinite(q_hi):
        q_hi = 0.0
    best = None
    for q in np.linspace(0.0, max(q_hi, 0.0), grid_size):
        b = float(np.max((im - q * re_pos) / n2, initial=0.0))
        cost = b + q * float(np.mean(re_pos))
        if best is None or cost < best[0]:
            best = (cost, b, q)
    return best[1], best[2]


def random_probes(dim, n_probes, gen):
    """Unit-norm complex Gaussian probe vectors, one per row."""
    z = gen.standard_normal((n_probes, dim)) + 1j * gen.standard_normal((n_probes, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)
