"""Double greedy sampling with saddle-point reduced models.

The reduced solution at ``y`` is the minimum-residual approximation from the
trial space ``U_n`` with the residual measured in the test space ``V_n``:

    (r, v)_V + b_y(u_n, v) = f(v),   v in V_n
    b_y(w, r)              = 0,      w in U_n

If the pair is delta-proximal, i.e. its worst-case inf-sup constant in the
renormed trial metric is at least ``sqrt(1 - delta^2)``, then ``u_n`` is a
``(1 - delta)^-1`` quasi-best approximation and the residual dual norm is an
exact error measure.  The inner greedy enriches ``V_n`` with supremizers
until the pair is certified; the outer greedy grows ``U_n`` at the maximizer
of the residual surrogate.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg as la

from .kernel import FactorizationError, SpdGram, dual_norm, min_generalized_singular
from .rbgreedy import ReducedSpace, ResidualOfflineData, ReducedStabilityError
from .trace import GreedyTrace
from .truth import apply_operator, truth_solve

__all__ = [
    "SaddleReducedModel",
    "StabilizationError",
    "saddle_reduced_solve",
    "worst_case_infsup",
    "supremizer",
    "stabilize",
    "delta_from_infsup",
    "projection_deficiency",
    "sga_dou_run",
    "SGA_DOU_COLUMNS",
]

SGA_DOU_COLUMNS = ["n", "n_V", "delta_certified", "surrogate_max", "true_error_max", "ratio"]
CAP_SLACK = 8


class StabilizationError(RuntimeError):
    """Inner stabilization could not certify the pair."""


class SaddleReducedModel:
    """Paired trial and test reduced spaces with affine reduced data.

    ``blocks[k]`` is ``Psi^T A_k Phi`` (``n_V x n``), ``rhs`` is ``Psi^T f``.
    Both bases are orthonormal in their own truth norms, so the reduced test
    Gram is the identity.  ``data`` holds the residual expansion of the trial
    basis, which also yields the renormed trial Gram at any parameter.
    """

    def __init__(self, model):
        self.model = model
        self.trial = ReducedSpace(model.gram_U)
        self.test = ReducedSpace(model.gram_V)
        self.data = ResidualOfflineData(model)
        self.blocks = [np.zeros((0, 0)) for _ in range(model.n_affine)]
        self.rhs = np.zeros(0)

    @property
    def n(self):
        return self.trial.n

    @property
    def n_V(self):
        return self.test.n

    def add_trial(self, u, meta=None):
        if not self.trial.add(u, meta):
            return False
        phi = self.trial.basis[:, -1]
        self.data.extend(phi)
        Psi = self.test.basis
        self.blocks = [np.column_stack([B, Psi.T @ img[:, -1]])
                       for B, img in zip(self.blocks, self.data.images)]
        return True

    def add_test(self, v, meta=None):
        if not self.test.add(v, meta):
            return False
        psi = self.test.basis[:, -1]
        self.blocks = [np.vstack([B, psi @ img]) for B, img in zip(self.blocks, self.data.images)]
        self.rhs = np.append(self.rhs, psi @ self.model.rhs)
        return True

    def cross(self, theta):
        th = np.asarray(theta, dtype=float)
        C = th[0] * self.blocks[0]
        for t, B in zip(th[1:], self.blocks[1:]):
            C = C + t * B
        return C

    def truncated(self, n, n_V):
        """Sub-model on the first ``n`` trial and ``n_V`` test vectors."""
        sub = SaddleReducedModel(self.model)
        for j in range(n):
            sub.add_trial(self.trial.basis[:, j], self.trial.snapshots_meta[j])
        for j in range(n_V):
            sub.add_test(self.test.basis[:, j], self.test.snapshots_meta[j])
        if sub.n != n or sub.n_V != n_V:
            raise RuntimeError("truncation changed the basis dimensions")
        return sub

    def oracle_blocks(self):
        """Reduced blocks recomputed from scratch (consistency check)."""
        Phi, Psi = self.trial.basis, self.test.basis
        return [Psi.T @ (A @ Phi) for A in self.model.affine_ops], Psi.T @ self.model.rhs


def saddle_reduced_solve(srm, p):
    """Reduced saddle-point solve at ``p``.

    Returns
    -------
    c : ndarray, trial-reduced coefficients of ``u_n(y)``
    r : ndarray, test-reduced coefficients of the lifted residual ``r_n(y)``
    """
    n, nv = srm.n, srm.n_V
    if n == 0:
        return np.zeros(0), srm.rhs.copy()
    if nv < n:
        raise ReducedStabilityError(
            f"test space ({nv}) smaller than trial space ({n}) at y = {p.y:.6g}"
        )
    C = srm.cross(srm.model.theta(p))
    K = np.zeros((nv + n, nv + n))
    K[:nv, :nv] = np.eye(nv)
    K[:nv, nv:] = C
    K[nv:, :nv] = C.T
    b = np.concatenate([srm.rhs, np.zeros(n)])
    sv = np.linalg.svd(C, compute_uv=False)
    if sv[-1] <= 1e-13 * max(sv[0], 1e-300):
        raise ReducedStabilityError(
            f"singular reduced saddle system at y = {p.y:.6g} (stability breach)"
        )
    try:
        x = np.linalg.solve(K, b)
    except np.linalg.LinAlgError as exc:
        raise ReducedStabilityError(
            f"singular reduced saddle system at y = {p.y:.6g} (stability breach)"
        ) from exc
    return x[nv:], x[:nv]


def worst_case_infsup(srm, grid):
    """Smallest inf-sup constant of the pair over ``grid`` in the renormed trial metric.

    Returns
    -------
    beta_min : float
    argmin_y : ParameterPoint or None
    argmin_w : ndarray or None
        Trial-reduced coefficients of the least stable direction.
    """
    n = srm.n
    if n == 0:
        return 1.0, None, None
    if srm.n_V < n:
        p = grid[0]
        G = srm.data.uhat_gram(srm.model.theta(p))
        # any direction in the kernel of the short cross matrix is unstable
        C = srm.cross(srm.model.theta(p))
        _, _, vt = np.linalg.svd(np.vstack([C, np.zeros((n - srm.n_V, n))]))
        w = vt[-1] / math.sqrt(max(float(vt[-1] @ G @ vt[-1]), 1e-300))
        return 0.0, p, w
    I = SpdGram.identity(srm.n_V)
    best = (np.inf, None, None)
    for p in grid:
        th = srm.model.theta(p)
        G = srm.data.uhat_gram(th)
        try:
            Gg = SpdGram(G, check_symmetry=False)
        except FactorizationError as exc:
            raise FactorizationError(
                f"renormed trial Gram singular at y = {p.y:.6g}: trial basis is "
                "numerically dependent in that metric", exc.pivot
            ) from exc
        beta, w = min_generalized_singular(srm.cross(th), I, Gg, return_vector=True)
        if beta < best[0]:
            best = (beta, p, w)
    return best


def supremizer(model, p, w):
    """Truth Riesz lift ``R_V B_p w`` of the operator image of ``w``."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        raise ValueError("supremizer of the zero function is undefined")
    return model.gram_V.solve(apply_operator(model, p, w))


def delta_from_infsup(beta):
    """Tight proximality ``sqrt(1 - beta^2)`` certified by an inf-sup constant."""
    b = min(max(float(beta), 0.0), 1.0)
    return math.sqrt(max(1.0 - b * b, 0.0))


def projection_deficiency(srm, p, W=None):
    """Worst relative deficiency ``|(I - P_Z) R_V B w|_V / |R_V B w|_V``.

    Evaluated in the truth space.  With ``W`` (trial-reduced coefficient
    vectors, one per column) the maximum over those directions is returned;
    otherwise the exact maximum over the whole trial space, as the square
    root of the largest eigenvalue of a symmetric-definite pencil.
    """
    model = srm.model
    G = model.gram_V.matrix
    Psi, GPsi = srm.test.basis, srm.test.gram_basis
    if W is None:
        W = np.eye(srm.n)
        exact = True
    else:
        W = np.asarray(W, dtype=float).reshape(srm.n, -1)
        exact = False
    S = np.column_stack([supremizer(model, p, srm.trial.basis @ W[:, j])
                         for j in range(W.shape[1])])
    D = S - Psi @ (GPsi.T @ S) if srm.n_V else S
    GS, GD = G @ S, G @ D
    if exact:
        num = D.T @ GD
        den = S.T @ GS
        lam = la.eigh(0.5 * (num + num.T), 0.5 * (den + den.T), eigvals_only=True)
        return math.sqrt(min(max(float(lam[-1]), 0.0), 1.0))
    ratios = np.einsum("ij,ij->j", D, GD) / np.einsum("ij,ij->j", S, GS)
    return math.sqrt(min(max(float(ratios.max()), 0.0), 1.0))


def stabilize(srm, grid, delta, mode="greedy", cap_slack=CAP_SLACK):
    """Enrich the test space until the pair is delta-proximal over ``grid``.

    ``greedy`` adds, one at a time, the supremizer of the least stable
    direction at the least stable parameter.  ``full`` first adds the ``M``
    supremizers ``R_V A_k phi`` of the newest trial function and then
    continues greedily if that is not yet enough.

    Returns
    -------
    k_star : int
        Number of test functions added.
    beta : float
        Certified worst-case inf-sup constant.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    model = srm.model
    target = math.sqrt(1.0 - delta * delta)
    if srm.n == 0:
        return 0, 1.0
    cap = model.n_affine * srm.n + cap_slack
    added = 0
    if mode == "full":
        for L in srm.data.lifts:
            if srm.add_test(L[:, -1], ("full", srm.n)):
                added += 1
    elif mode != "greedy":
        raise ValueError(f"unknown stabilization mode {mode!r}")
    while True:
        beta, p, w = worst_case_infsup(srm, grid)
        if beta >= target:
            return added, beta
        if srm.n_V >= cap:
            raise StabilizationError(
                f"enrichment cap {cap} reached with inf-sup {beta:.6f} < {target:.6f}; "
                "inconsistent Grams or truth instability"
            )
        v = supremizer(model, p, srm.trial.basis @ w)
        if not srm.add_test(v, ("sup", p.y)):
            raise StabilizationError(
                f"supremizer at y = {p.y:.6g} already in the test space but inf-sup "
                f"{beta:.6f} < {target:.6f}"
            )
        added += 1


def sga_dou_run(model, grid, delta=0.1, tol=1e-4, n_max=20, validate=False, mode="greedy",
                seed_residual=True):
    """Double greedy: outer surrogate greedy over ``grid`` with inner stabilization.

    Initialization: ``U_1`` is the snapshot at ``grid[0]``; ``V_1`` starts
    from the ``M`` supremizers of that snapshot and the lift of the load and
    is then certified.  After each outer step the lifted truth residual of
    the previous reduced solution at the new parameter seeds the test space.

    Returns
    -------
    srm : SaddleReducedModel
    trace : GreedyTrace
        Row ``n`` describes the certified pair ``(U_n, V_n)``.
    """
    if not grid:
        raise ValueError("training grid is empty")
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    srm = SaddleReducedModel(model)
    thetas = [model.theta(p) for p in grid]
    trace = GreedyTrace(columns=list(SGA_DOU_COLUMNS), metadata={
        "delta": delta, "tol": tol, "n_max": n_max, "grid_size": len(grid),
        "epsilon": model.epsilon, "h": model.h, "mode": mode, "validate": bool(validate),
    })
    truth = None
    if validate:
        truth = np.column_stack([truth_solve(model, p)[0] for p in grid])

    u0 = truth[:, 0] if validate else truth_solve(model, grid[0])[0]
    srm.add_trial(u0, grid[0])
    for L in srm.data.lifts:
        srm.add_test(L[:, -1], ("init", 0))
    srm.add_test(srm.data.lift_f, ("init", "f"))
    k_star, beta = stabilize(srm, grid, delta, mode="greedy")
    k_list = [k_star]
    floor = math.sqrt(np.finfo(float).eps) * srm.data.norm_f

    while True:
        n = srm.n
        surr = np.empty(len(grid))
        coeffs = []
        fell_back = 0
        for i, (p, th) in enumerate(zip(grid, thetas)):
            c, _ = saddle_reduced_solve(srm, p)
            coeffs.append(c)
            surr[i], fb = srm.data.surrogate(th, c)
            fell_back += fb
        i_sel = int(np.argmax(surr))
        row = {"n": n, "n_V": srm.n_V, "delta_certified": delta_from_infsup(beta),
               "beta": beta, "surrogate_max": float(surr[i_sel]), "k_star": k_list[-1],
               "fallbacks": fell_back, "y_selected": None}
        if validate:
            err = np.empty(len(grid))
            best = np.empty(len(grid))
            for i, p in enumerate(grid):
                e = truth[:, i] - srm.trial.basis @ coeffs[i]
                err[i] = dual_norm(model.gram_V, apply_operator(model, p, e))
                best[i] = _best_uhat_error(srm, model, p, truth[:, i])
            row["true_error_max"] = float(err.max())
            row["ratio"] = float(surr[i_sel] / err.max()) if err.max() > 0 else float("nan")
            above = err > floor
            rr = surr[above] / err[above]
            row["ratio_min"] = float(rr.min()) if rr.size else float("nan")
            row["ratio_max"] = float(rr.max()) if rr.size else float("nan")
            row["best_error_max"] = float(best.max())
            row["quasi_opt_max"] = float(np.max(err[best > floor] / best[best > floor])) \
                if np.any(best > floor) else float("nan")
            row["errors"] = err
            row["best_errors"] = best
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
            bmax = best.max()
            row["gamma_hat"] = float(best[i_sel] / bmax) if bmax > 0 else 1.0
            u = truth[:, i_sel]
        else:
            u = truth_solve(model, p_sel)[0]
        # lifted truth residual of the current reduced solution at the new parameter
        res_lift = _residual_lift(srm, thetas[i_sel], coeffs[i_sel])
        if not srm.add_trial(u, p_sel):
            trace.metadata["stop"] = "exhausted"
            break
        if seed_residual:
            srm.add_test(res_lift, ("residual", p_sel.y))
        k_star, beta = stabilize(srm, grid, delta, mode=mode)
        k_list.append(k_star)
    trace.metadata["k_star"] = k_list
    return srm, trace


def _residual_lift(srm, theta, c):
    d = srm.data
    r = d.lift_f.copy()
    for t, L in zip(theta, d.lifts):
        if c.size:
            r -= t * (L @ c)
    return r


def _best_uhat_error(srm, model, p, u):
    """``min_w |u - Phi w|_{U_y}`` in the renormed metric, evaluated in the truth space."""
    th = model.theta(p)
    d = srm.data
    Bu = apply_operator(model, p, u)
    if srm.n == 0:
        return dual_norm(model.gram_V, Bu)
    lifts = sum(t * L for t, L in zip(th, d.lifts))      # R_V B Phi
    images = sum(t * I for t, I in zip(th, d.images))    # B Phi
    G = d.uhat_gram(th)
    w = np.linalg.solve(G, lifts.T @ Bu)
    return dual_norm(model.gram_V, Bu - images @ w)
