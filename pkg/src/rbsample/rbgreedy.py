"""Surrogate-based greedy sampling with Galerkin reduced solves.

The surrogate is the dual norm of the residual ``|f - B_y u_n(y)|_{V'}``,
evaluated online from an affine expansion of Riesz representers computed
offline.  By the error-residual isometry this is exactly the error in the
renormed trial norm ``|B_y w|_{V'}``.
"""

from __future__ import annotations

import math

import numpy as np

from .kernel import DEFAULT_DROP_TOL, SpdGram, dual_norm, orthonormalize_against
from .trace import GreedyTrace
from .truth import apply_operator, truth_solve

__all__ = [
    "ReducedSpace",
    "ResidualOfflineData",
    "GalerkinReducedModel",
    "ReducedStabilityError",
    "surrogate_eval",
    "galerkin_reduced_solve",
    "sga_run",
    "SGA_COLUMNS",
    "CANCELLATION_FLOOR",
]

SGA_COLUMNS = ["n", "y_selected", "surrogate_max", "true_error_max", "gamma_hat"]
CANCELLATION_FLOOR = math.sqrt(np.finfo(float).eps)


class ReducedStabilityError(np.linalg.LinAlgError):
    """The reduced system is singular at some parameter."""


class ReducedSpace:
    """Gram-orthonormal reduced basis over a truth space.

    Parameters
    ----------
    gram : SpdGram
        Inner product of the truth space the columns live in.
    tol : float
        Relative drop tolerance for new columns.
    """

    def __init__(self, gram, tol=DEFAULT_DROP_TOL):
        self.gram = gram
        self.tol = tol
        self.basis = np.zeros((gram.dim, 0))
        self.gram_basis = np.zeros((gram.dim, 0))
        self.snapshots_meta = []

    @property
    def n(self):
        return self.basis.shape[1]

    def add(self, vector, meta=None):
        """Orthonormalize ``vector`` into the space; returns False if dropped."""
        out = orthonormalize_against(self.basis if self.n else None,
                                     self.gram_basis if self.n else None,
                                     vector, self.gram, self.tol)
        if out is None:
            return False
        q, Gq = out
        self.basis = np.column_stack([self.basis, q])
        self.gram_basis = np.column_stack([self.gram_basis, Gq])
        self.snapshots_meta.append(meta)
        return True

    def truncated(self, n):
        sub = ReducedSpace(self.gram, self.tol)
        sub.basis = self.basis[:, :n].copy()
        sub.gram_basis = self.gram_basis[:, :n].copy()
        sub.snapshots_meta = list(self.snapshots_meta[:n])
        return sub

    def expand(self, c):
        return self.basis @ np.asarray(c, dtype=float)

    def orthonormality_defect(self):
        if not self.n:
            return 0.0
        return float(np.max(np.abs(self.basis.T @ self.gram_basis - np.eye(self.n))))


class ResidualOfflineData:
    """Affine expansion of ``|f - sum_k theta_k A_k Phi c|^2_{V'}``.

    Stores the truth Riesz lifts ``R_V f`` and ``R_V A_k phi_j`` of the load
    and of every operator image of every basis function, and the scalar
    products between them:

    * ``ff = |f|^2_{V'}``
    * ``fA[k, j] = (f, A_k phi_j)_{V'}``
    * ``AA[k, i, l, j] = (A_k phi_i, A_l phi_j)_{V'}``

    Extension appends; existing entries are never recomputed.

    For online evaluation the lifts are additionally kept as a V-orthonormal
    factorization ``[R_V f, R_V A_k phi_j] = Q R``, so that the residual norm
    is ``|R x|_2`` and no digits are lost by squaring; see :meth:`surrogate`.
    """

    def __init__(self, model):
        self.model = model
        self.M = model.n_affine
        G = model.gram_V
        self.lift_f = G.solve(model.rhs)
        self.ff = float(model.rhs @ self.lift_f)
        self.norm_f = math.sqrt(max(self.ff, 0.0))
        self.images = [np.zeros((model.n_test, 0)) for _ in range(self.M)]  # A_k Phi
        self.lifts = [np.zeros((model.n_test, 0)) for _ in range(self.M)]   # R_V A_k Phi
        self.fA = np.zeros((self.M, 0))
        self.AA = np.zeros((self.M, 0, self.M, 0))
        # V-orthonormal factorization of [R_V f, R_V A_k phi_j] (ordered j, then k)
        self._Q = np.zeros((model.n_test, 0))
        self._GQ = np.zeros((model.n_test, 0))
        self._R = np.zeros((0, 0))
        self._append_lift(self.lift_f, model.rhs)

    def _append_lift(self, lift, image):
        """Add one column ``lift`` (with ``G_V lift = image``) to the factorization."""
        r = self._Q.shape[1]
        coef = np.zeros(r)
        v = lift.copy()
        Gv = image.copy()
        norm0 = math.sqrt(max(float(v @ Gv), 0.0))
        if r:
            for _ in range(2):
                a = self._Q.T @ Gv
                coef += a
                v -= self._Q @ a
                # recomputed rather than updated: a nearly dependent column
                # would otherwise carry the cancellation error of Gv into GQ
                Gv = self.model.gram_V.matvec(v)
        nv = math.sqrt(max(float(v @ Gv), 0.0))
        R = self._R
        m = R.shape[1]
        if norm0 > 0 and nv > 1e-14 * norm0:
            Rn = np.zeros((r + 1, m + 1))
            Rn[:r, :m] = R
            Rn[:r, m] = coef
            Rn[r, m] = nv
            self._Q = np.column_stack([self._Q, v / nv])
            self._GQ = np.column_stack([self._GQ, Gv / nv])
        else:
            Rn = np.zeros((r, m + 1))
            Rn[:, :m] = R
            Rn[:, m] = coef
        self._R = Rn

    @property
    def n(self):
        return self.fA.shape[1]

    @property
    def AA_matrix(self):
        """``AA`` as an ``(M n) x (M n)`` matrix indexed like ``kron(theta, c)``."""
        Mn = self.M * self.n
        return self.AA.reshape(Mn, Mn)

    def extend(self, phi):
        phi = np.asarray(phi, dtype=float)
        img = [A @ phi for A in self.model.affine_ops]
        lft = [self.model.gram_V.solve(a) for a in img]
        n, M = self.n, self.M
        fA_new = np.array([self.model.rhs @ l for l in lft])
        AA = np.zeros((M, n + 1, M, n + 1))
        AA[:, :n, :, :n] = self.AA
        for k in range(M):
            for l in range(M):
                # old-new cross terms, then the new diagonal entry
                AA[k, :n, l, n] = self.images[k].T @ lft[l] if n else np.zeros(0)
                AA[l, n, k, :n] = AA[k, :n, l, n]
                AA[k, n, l, n] = img[k] @ lft[l]
        # symmetrize the new diagonal block against solver round-off
        blk = AA[:, n, :, n]
        AA[:, n, :, n] = 0.5 * (blk + blk.T)
        self.AA = AA
        self.fA = np.column_stack([self.fA, fA_new])
        self.images = [np.column_stack([I, a]) for I, a in zip(self.images, img)]
        self.lifts = [np.column_stack([L, l]) for L, l in zip(self.lifts, lft)]
        for a, l in zip(img, lft):
            self._append_lift(l, a)

    def uhat_gram(self, theta):
        """Renormed trial Gram ``(B_y phi_i, B_y phi_j)_{V'}`` of the basis."""
        th = np.asarray(theta, dtype=float)
        G = np.einsum("k,kilj,l->ij", th, self.AA, th)
        return 0.5 * (G + G.T)

    def stable_norm(self, theta, c):
        """Online residual dual norm through the orthonormal factorization."""
        th = np.asarray(theta, dtype=float)
        c = np.asarray(c, dtype=float)
        if c.shape != (self.n,):
            raise ValueError(f"reduced coefficients must have length {self.n}, got {c.shape}")
        x = np.concatenate([[1.0], -np.kron(c, th)])
        return float(np.linalg.norm(self._R @ x))

    def surrogate(self, theta, c):
        """Online residual dual norm with the truth fallback below the floor.

        Returns ``(value, used_fallback)``.
        """
        val = self.stable_norm(theta, c)
        if val < CANCELLATION_FLOOR * self.norm_f:
            return self.truth_residual_norm(theta, c), True
        return val, False

    def truth_residual_norm(self, theta, c):
        """``|f - sum theta_k A_k Phi c|_{V'}`` assembled in the truth space."""
        th = np.asarray(theta, dtype=float)
        c = np.asarray(c, dtype=float)
        r = self.model.rhs.copy()
        lr = self.lift_f.copy()
        if c.size:
            for t, I, L in zip(th, self.images, self.lifts):
                r -= t * (I @ c)
                lr -= t * (L @ c)
        return math.sqrt(max(float(r @ lr), 0.0))


def surrogate_eval(data, theta, c):
    """``sqrt(max(0, ff - 2 theta^T fA c + (theta (x) c)^T AA (theta (x) c)))``."""
    th = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    if th.shape != (data.M,):
        raise ValueError(f"theta must have length {data.M}, got {th.shape}")
    if c.shape != (data.n,):
        raise ValueError(f"reduced coefficients must have length {data.n}, got {c.shape}")
    if data.n == 0:
        return data.norm_f
    v = th @ data.fA @ c
    tc = np.kron(th, c)
    q = tc @ data.AA_matrix @ tc
    return math.sqrt(max(data.ff - 2.0 * v + q, 0.0))


class GalerkinReducedModel:
    """Reduced blocks ``Phi^T (P^T A_k) Phi`` and load ``Phi^T P^T f``.

    ``P`` is the trial-to-test embedding; on a matched pair it is the
    identity and the blocks are plain Galerkin projections.
    """

    def __init__(self, model, space):
        self.model = model
        self.space = space
        self.ops, self.load = model.galerkin_ops()
        self.blocks = [np.zeros((0, 0)) for _ in self.ops]
        self.rhs = np.zeros(0)
        self.refresh()

    def refresh(self):
        """Append rows/columns for basis vectors added since the last call."""
        B = self.space.basis
        n_old, n = self.blocks[0].shape[0], B.shape[1]
        if n == n_old:
            return
        new = B[:, n_old:]
        blocks = []
        for blk, A in zip(self.blocks, self.ops):
            out = np.zeros((n, n))
            out[:n_old, :n_old] = blk
            AB = A @ B
            out[:, n_old:] = B.T @ AB[:, n_old:]
            out[n_old:, :n_old] = new.T @ AB[:, :n_old]
            blocks.append(out)
        self.blocks = blocks
        self.rhs = B.T @ self.load

    def matrix(self, theta):
        th = np.asarray(theta, dtype=float)
        S = th[0] * self.blocks[0]
        for t, blk in zip(th[1:], self.blocks[1:]):
            S = S + t * blk
        return S

    def solve(self, p):
        self.refresh()
        n = self.space.n
        if n == 0:
            return np.zeros(0)
        S = self.matrix(self.model.theta(p))
        try:
            c = np.linalg.solve(S, self.rhs)
        except np.linalg.LinAlgError as exc:
            raise ReducedStabilityError(
                f"singular Galerkin reduced matrix at y = {p.y:.6g}; use the "
                "saddle-point scheme"
            ) from exc
        sv = np.linalg.svd(S, compute_uv=False)
        if not np.all(np.isfinite(c)) or sv[-1] <= 1e-13 * sv[0]:
            raise ReducedStabilityError(
                f"numerically singular Galerkin reduced matrix at y = {p.y:.6g} "
                f"(cond {sv[0] / max(sv[-1], 1e-300):.2e}); use the saddle-point scheme"
            )
        return c


def galerkin_reduced_solve(model, space, p, reduced=None):
    """Galerkin reduced coefficients at ``p``; builds the reduced blocks if needed."""
    if space.n == 0:
        raise ValueError("reduced space is empty")
    if reduced is None:
        reduced = GalerkinReducedModel(model, space)
    return reduced.solve(p)


def _rms_tail(sq_singular, n, K):
    return math.sqrt(max(float(np.sum(sq_singular[n:])), 0.0) / K)


def sga_run(model, grid, tol, n_max, validate=False):
    """Surrogate-based greedy algorithm with Galerkin reduced solves.

    Parameters
    ----------
    model : TruthModel
    grid : list of ParameterPoint
        Training set; ties in the surrogate maximum go to the lowest index.
    tol : float
        Stop once the maximal surrogate is at most ``tol``.
    n_max : int
        Largest reduced dimension.
    validate : bool
        Truth-solve the whole grid and record true errors.

    Returns
    -------
    space : ReducedSpace
    trace : GreedyTrace
        Row ``n`` describes ``U_n``.  ``metadata["stop"]`` is one of
        ``"tol"``, ``"budget"``, ``"exhausted"``.
    """
    if not grid:
        raise ValueError("training grid is empty")
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    space = ReducedSpace(model.gram_U)
    data = ResidualOfflineData(model)
    gal = GalerkinReducedModel(model, space)
    thetas = [model.theta(p) for p in grid]
    trace = GreedyTrace(columns=list(SGA_COLUMNS), metadata={
        "tol": tol, "n_max": n_max, "grid_size": len(grid), "epsilon": model.epsilon,
        "h": model.h, "validate": bool(validate),
    })
    truth = None
    if validate:
        truth = np.column_stack([truth_solve(model, p)[0] for p in grid])
        # snapshot correlation in the trial norm for the width lower bound
        corr = truth.T @ (model.gram_U.matrix @ truth)
        lam = np.clip(np.linalg.eigvalsh(0.5 * (corr + corr.T))[::-1], 0.0, None)

    while True:
        n = space.n
        gal.refresh()
        surr = np.empty(len(grid))
        coeffs = []
        for i, (p, th) in enumerate(zip(grid, thetas)):
            c = gal.solve(p) if n else np.zeros(0)
            coeffs.append(c)
            surr[i] = data.surrogate(th, c)[0]
        i_sel = int(np.argmax(surr))
        row = {"n": n, "surrogate_max": float(surr[i_sel]), "y_selected": None}
        if validate:
            U = space.basis
            err_hat = np.empty(len(grid))
            proj = np.empty(len(grid))
            for i, p in enumerate(grid):
                e = truth[:, i] - U @ coeffs[i]
                err_hat[i] = dual_norm(model.gram_V, apply_operator(model, p, e))
                d = truth[:, i] - U @ (space.gram_basis.T @ truth[:, i])
                proj[i] = math.sqrt(max(float(d @ (model.gram_U.matrix @ d)), 0.0))
            row["true_error_max"] = float(err_hat.max())
            row["sigma"] = float(proj.max())
            row["width_lower"] = _rms_tail(lam, n, len(grid))
            row["surrogate_ratio"] = surr / np.where(err_hat > 0, err_hat, np.inf)
        trace.rows.append(row)
        if row["surrogate_max"] <= tol:
            trace.metadata["stop"] = "tol"
            break
        if n >= n_max:
            trace.metadata["stop"] = "budget"
            break
        p_sel = grid[i_sel]
        row["y_selected"] = p_sel.y
        if validate:
            pmax = proj.max()
            row["gamma_hat"] = float(proj[i_sel] / pmax) if pmax > 0 else 1.0
            u = truth[:, i_sel]
        else:
            u = truth_solve(model, p_sel)[0]
        if not space.add(u, p_sel):
            trace.metadata["stop"] = "exhausted"
            break
        data.extend(space.basis[:, -1])
    trace.metadata["data"] = data
    return space, trace
