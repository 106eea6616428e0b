"""Dense and sparse linear-algebra primitives shared by every other module.

The Gram matrices of the trial and test inner products are wrapped in
:class:`SpdGram`, which factorizes once at construction.  A Gram matrix is the
discrete Riesz map, so solving with it lifts a functional into the space.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "FactorizationError",
    "SpdGram",
    "spd_solve",
    "dual_norm",
    "min_generalized_singular",
    "gram_orthonormalize",
    "orthonormalize_against",
]

DEFAULT_DROP_TOL = 1e-10


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix that should be SPD fails to factorize."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SpdGram:
    """Symmetric positive-definite Gram matrix with a cached factorization.

    Dense input is Cholesky-factorized.  Sparse input is LU-factorized with a
    symmetric fill-reducing ordering and no row pivoting, so the diagonal of
    ``U`` holds the pivots of an LDL^T factorization and positivity can be
    checked pivot by pivot.

    Parameters
    ----------
    matrix : ndarray or sparse matrix, shape (N, N)
    check_symmetry : bool
        Verify ``max|G - G^T| <= 1e-12 max|G|`` before factorizing.
    """

    def __init__(self, matrix, check_symmetry=True):
        if sp.issparse(matrix):
            self.matrix = sp.csc_matrix(matrix, dtype=float)
            self.sparse = True
        else:
            self.matrix = np.array(matrix, dtype=float, copy=True)
            if self.matrix.ndim != 2:
                raise ValueError("Gram matrix must be two-dimensional")
            self.sparse = False
        n, m = self.matrix.shape
        if n != m:
            raise ValueError(f"Gram matrix must be square, got {self.matrix.shape}")
        self.dim = n
        if check_symmetry:
            self._check_symmetry()
        self._dense_chol = None
        if self.sparse:
            self._factor = self._factor_sparse()
        else:
            self._factor = self._factor_dense()

    def _check_symmetry(self):
        G = self.matrix
        if self.sparse:
            asym = abs(G - G.T).max() if G.nnz else 0.0
            scale = abs(G).max() if G.nnz else 0.0
        else:
            asym = np.max(np.abs(G - G.T)) if G.size else 0.0
            scale = np.max(np.abs(G)) if G.size else 0.0
        if asym > 1e-12 * scale:
            raise ValueError(f"Gram matrix is not symmetric (max asymmetry {asym:.3e})")

    def _factor_dense(self):
        if self.dim == 0:
            return None
        try:
            c, lower = la.cho_factor(self.matrix, lower=True, check_finite=True)
        except la.LinAlgError as exc:
            # LAPACK reports the order of the failing leading minor (1-based)
            msg = str(exc)
            pivot = None
            for tok in msg.replace("-", " ").split():
                if tok.isdigit():
                    pivot = int(tok) - 1
                    break
            raise FactorizationError(
                f"Gram matrix is not positive definite: pivot {pivot} failed", pivot
            ) from exc
        return (c, lower)

    def _factor_sparse(self):
        try:
            lu = spla.splu(
                self.matrix,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise FactorizationError(f"Gram matrix is singular: {exc}") from exc
        piv = lu.U.diagonal()
        bad = np.flatnonzero(~(piv > 0))
        if bad.size:
            # map the position in the permuted ordering back to a row index
            pivot = int(lu.perm_c[bad[0]]) if lu.perm_c is not None else int(bad[0])
            raise FactorizationError(
                f"Gram matrix is not positive definite: pivot {pivot} "
                f"(value {piv[bad[0]]:.3e}) failed",
                pivot,
            )
        return lu

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.dim:
            raise ValueError(
                f"dimension mismatch: Gram has size {self.dim}, rhs has {rhs.shape[0]}"
            )
        if self.dim == 0:
            return rhs.copy()
        if self.sparse:
            return self._factor.solve(rhs)
        return la.cho_solve(self._factor, rhs, check_finite=False)

    def matvec(self, x):
        return self.matrix @ x

    def inner(self, x, y):
        return x.T @ (self.matrix @ y)

    def cholesky_lower(self):
        """Dense lower Cholesky factor ``L`` with ``G = L L^T`` (cached)."""
        if self._dense_chol is None:
            if self.sparse:
                dense = self.matrix.toarray()
            else:
                dense = self.matrix
            if self.dim == 0:
                self._dense_chol = np.zeros((0, 0))
            else:
                try:
                    self._dense_chol = np.linalg.cholesky(dense)
                except np.linalg.LinAlgError as exc:
                    raise FactorizationError(str(exc)) from exc
        return self._dense_chol

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), check_symmetry=False)

    def __repr__(self):
        kind = "sparse" if self.sparse else "dense"
        return f"SpdGram({kind}, dim={self.dim})"


def _as_gram(gram):
    return gram if isinstance(gram, SpdGram) else SpdGram(gram)


def spd_solve(gram, rhs):
    """Solve ``G x = rhs`` with the cached factorization of ``gram``."""
    return _as_gram(gram).solve(rhs)


def dual_norm(gram, functional):
    """Dual norm ``sqrt(r^T G^{-1} r)`` of a functional given by its coefficients."""
    gram = _as_gram(gram)
    r = np.asarray(functional, dtype=float)
    if not np.any(r):
        if r.shape[0] != gram.dim:
            raise ValueError("dimension mismatch")
        return 0.0
    val = float(r @ gram.solve(r))
    return float(np.sqrt(max(val, 0.0)))


def min_generalized_singular(cross, gram_test, gram_trial, return_vector=False):
    """Discrete inf-sup constant of a bilinear form between two bases.

    Computes ``min_w max_v v^T C w / (|v|_test |w|_trial)`` as the smallest
    singular value of ``L_test^{-1} C L_trial^{-T}``.

    Parameters
    ----------
    cross : ndarray, shape (n_test, n_trial)
    gram_test, gram_trial : SpdGram or ndarray
    return_vector : bool
        Also return the minimizing trial coefficient vector (unit norm in the
        trial metric).

    Returns
    -------
    beta : float
    w : ndarray, only if ``return_vector``
    """
    C = cross.toarray() if sp.issparse(cross) else np.asarray(cross, dtype=float)
    n_test, n_trial = C.shape
    if n_test < n_trial:
        raise ValueError(
            f"inf-sup needs n_test >= n_trial, got {n_test} < {n_trial}"
        )
    gram_test = _as_gram(gram_test)
    gram_trial = _as_gram(gram_trial)
    if gram_test.dim != n_test or gram_trial.dim != n_trial:
        raise ValueError("Gram dimensions do not match the cross matrix")
    if n_trial == 0:
        return (1.0, np.zeros(0)) if return_vector else 1.0
    Lt = gram_test.cholesky_lower()
    Lw = gram_trial.cholesky_lower()
    X = la.solve_triangular(Lt, C, lower=True)
    X = la.solve_triangular(Lw, X.T, lower=True).T
    if not return_vector:
        return float(la.svdvals(X, check_finite=False)[-1])
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    beta = float(s[-1])
    # right singular vector lives in the Cholesky-transformed coordinates
    w = la.solve_triangular(Lw.T, vt[-1], lower=False)
    return beta, w


def orthonormalize_against(basis, gram_basis, vector, gram, tol=DEFAULT_DROP_TOL):
    """G-orthonormalize ``vector`` against the G-orthonormal columns of ``basis``.

    Two full passes of modified Gram-Schmidt.  Returns ``(q, Gq)`` or ``None``
    if the component orthogonal to ``basis`` has G-norm below ``tol`` times the
    original G-norm.

    ``gram_basis`` is ``G @ basis`` (cached by the caller), or ``None``.
    """
    G = gram.matrix if isinstance(gram, SpdGram) else gram
    v = np.array(vector, dtype=float, copy=True)
    norm0 = np.sqrt(max(float(v @ (G @ v)), 0.0))
    if norm0 == 0.0 or not np.isfinite(norm0):
        return None
    k = 0 if basis is None else basis.shape[1]
    if k:
        if gram_basis is None:
            gram_basis = G @ basis
        for _ in range(2):
            for j in range(k):
                v -= basis[:, j] * (gram_basis[:, j] @ v)
    Gv = G @ v
    norm = np.sqrt(max(float(v @ Gv), 0.0))
    if norm < tol * norm0:
        return None
    return v / norm, Gv / norm


def gram_orthonormalize(basis, gram, tol=DEFAULT_DROP_TOL):
    """Return a G-orthonormal basis for the span of the columns of ``basis``.

    Column order is preserved; columns that are numerically dependent on
    earlier ones (relative G-norm after projection below ``tol``) are dropped.
    """
    B = np.asarray(basis, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    G = gram.matrix if isinstance(gram, SpdGram) else gram
    cols, gcols = [], []
    for j in range(B.shape[1]):
        Q = np.column_stack(cols) if cols else None
        GQ = np.column_stack(gcols) if gcols else None
        out = orthonormalize_against(Q, GQ, B[:, j], G, tol)
        if out is not None:
            cols.append(out[0])
            gcols.append(out[1])
    if not cols:
        return np.zeros((B.shape[0], 0))
    return np.column_stack(cols)
