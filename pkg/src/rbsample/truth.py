"""Parametric convection-diffusion truth model on the unit square.

The model problem is

    eps (grad u, grad v) + (b(y) . grad u, v) + (u, v) = (f, v),   b(y) = (cos y, sin y),

with homogeneous Dirichlet conditions and load f = 1.  The operator is affine
in the parameter with four terms (stiffness, x-convection, y-convection,
mass).  Trial space: P1 on a uniform triangulation of mesh size h.  Test
space: P1 on the same mesh (``test_refine=0``, the default) or on ``k``
uniform refinements of it (``test_refine=k``).

Trial norm is the H1 seminorm.  Test norm is ``eps |v|_1^2 + |v|_0^2``, the
symmetric part of the operator (c = 1 and div b = 0), which does not depend
on the convection angle.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kernel import SpdGram, dual_norm, min_generalized_singular

__all__ = [
    "ParameterPoint",
    "UniformMesh",
    "TruthModel",
    "TruthStabilityError",
    "theta_eval",
    "angle_grid",
    "assemble_p1",
    "prolongation",
    "assemble_truth",
    "apply_operator",
    "u_hat_norm",
    "truth_solve",
    "dual_truth_solve",
    "subdomain_mean_functional",
    "export_matrices",
    "N_AFFINE",
]

TWO_PI = 2.0 * math.pi
N_AFFINE = 4
INFSUP_FLOOR = 1e-3


class TruthStabilityError(RuntimeError):
    """The discrete truth pair is not inf-sup stable; refine the mesh."""


@dataclass(frozen=True)
class ParameterPoint:
    """Convection angle ``y`` (radians, normalized into [0, 2pi)) and diffusion."""

    y: float
    epsilon: float

    def __post_init__(self):
        if not (self.epsilon > 0.0) or self.epsilon > 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        y = math.fmod(float(self.y), TWO_PI)
        if y < 0.0:
            y += TWO_PI
        if y >= TWO_PI:
            y = 0.0
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "epsilon", float(self.epsilon))


def theta_eval(p: ParameterPoint) -> np.ndarray:
    """Affine coefficients ``(eps, cos y, sin y, 1)``."""
    return np.array([p.epsilon, math.cos(p.y), math.sin(p.y), 1.0])


def angle_grid(n, epsilon, offset=0.0):
    """Uniform grid of ``n`` convection angles, optionally shifted by a fraction of a cell."""
    return [ParameterPoint(TWO_PI * (i + offset) / n, epsilon) for i in range(n)]


@dataclass(frozen=True)
class UniformMesh:
    """Uniform right-triangle mesh of (0,1)^2 with ``n`` cells per side.

    Each square cell is split along its (0,0)-(1,1) diagonal, so that a
    uniform refinement of the mesh is nested in it.
    """

    n: int

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def n_nodes(self):
        return (self.n + 1) ** 2

    def node_index(self, i, j):
        return j * (self.n + 1) + i

    @property
    def points(self):
        t = np.linspace(0.0, 1.0, self.n + 1)
        X, Y = np.meshgrid(t, t)  # row j, column i
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def triangles(self):
        n = self.n
        i, j = np.meshgrid(np.arange(n), np.arange(n))
        i = i.ravel()
        j = j.ravel()
        a = self.node_index(i, j)
        b = self.node_index(i + 1, j)
        c = self.node_index(i + 1, j + 1)
        d = self.node_index(i, j + 1)
        lower = np.column_stack([a, b, c])
        upper = np.column_stack([a, c, d])
        return np.vstack([lower, upper])

    @property
    def interior(self):
        n = self.n
        i, j = np.meshgrid(np.arange(1, n), np.arange(1, n))
        return np.sort(self.node_index(i.ravel(), j.ravel()))

    def refine(self, times=1):
        return UniformMesh(self.n * 2 ** times)


def assemble_p1(mesh: UniformMesh):
    """Exact P1 element matrices on the full (unrestricted) node set.

    Returns ``(K, Cx, Cy, M)`` with ``K[i,j] = (grad phi_j, grad phi_i)``,
    ``Cx[i,j] = (d_x phi_j, phi_i)``, ``Cy[i,j] = (d_y phi_j, phi_i)`` and
    ``M[i,j] = (phi_j, phi_i)``.  All integrands are polynomial of degree at
    most two on each triangle and are integrated in closed form.
    """
    pts = mesh.points
    tri = mesh.triangles
    P = pts[tri]  # (T, 3, 2)
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of barycentric coordinates
    grads = np.empty((tri.shape[0], 3, 2))
    grads[:, 1, 0] = e2[:, 1] / det
    grads[:, 1, 1] = -e2[:, 0] / det
    grads[:, 2, 0] = -e1[:, 1] / det
    grads[:, 2, 1] = e1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]

    K_loc = area[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    M_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    M_loc = area[:, None, None] * M_ref[None]
    # (d_x phi_j, phi_i) = d_x lambda_j * area / 3
    Cx_loc = np.broadcast_to((area / 3.0)[:, None, None] * grads[:, None, :, 0], K_loc.shape)
    Cy_loc = np.broadcast_to((area / 3.0)[:, None, None] * grads[:, None, :, 1], K_loc.shape)

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    N = mesh.n_nodes

    def build(loc):
        return sp.csr_matrix((np.ascontiguousarray(loc).ravel(), (rows, cols)), shape=(N, N))

    return build(K_loc), build(Cx_loc), build(Cy_loc), build(M_loc)


def prolongation(coarse: UniformMesh, fine: UniformMesh):
    """Nodal interpolation of coarse P1 functions onto the nested fine mesh.

    Exact: every fine triangle lies inside one coarse triangle.
    """
    if fine.n % coarse.n:
        raise ValueError("meshes are not nested")
    r = fine.n // coarse.n
    fp = fine.points
    X = fp[:, 0] * coarse.n
    Y = fp[:, 1] * coarse.n
    ci = np.minimum(np.floor(X + 1e-12).astype(int), coarse.n - 1)
    cj = np.minimum(np.floor(Y + 1e-12).astype(int), coarse.n - 1)
    s = X - ci
    t = Y - cj
    a = coarse.node_index(ci, cj)
    b = coarse.node_index(ci + 1, cj)
    c = coarse.node_index(ci + 1, cj + 1)
    d = coarse.node_index(ci, cj + 1)
    lower = s >= t
    # barycentric weights on the two halves of the cell
    w = np.empty((fp.shape[0], 3))
    idx = np.empty((fp.shape[0], 3), dtype=int)
    w[lower] = np.column_stack([1 - s[lower], s[lower] - t[lower], t[lower]])
    idx[lower] = np.column_stack([a[lower], b[lower], c[lower]])
    up = ~lower
    w[up] = np.column_stack([1 - t[up], s[up], t[up] - s[up]])
    idx[up] = np.column_stack([a[up], c[up], d[up]])
    rows = np.repeat(np.arange(fp.shape[0]), 3)
    P = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(fine.n_nodes, coarse.n_nodes))
    P.eliminate_zeros()
    del r
    return P


@dataclass
class TruthModel:
    """Affine parametric operator family with trial/test Gram matrices.

    ``affine_ops[k]`` has shape ``(N_V, N_U)``; entry ``(i, j)`` is
    ``b_k(trial_j, test_i)``.  ``gram_U`` is the trial norm and ``gram_V`` the
    test norm.  ``prolong`` maps trial coefficients to test coefficients of
    the same function (identity for matched meshes).

    The same container also describes the dual (adjoint) problem, see
    :meth:`dual`; mesh fields are then informational only.
    """

    h: float
    epsilon: float
    affine_ops: list
    gram_U: SpdGram
    gram_V: SpdGram
    rhs: np.ndarray
    prolong: Optional[sp.spmatrix] = None
    mesh_trial: Optional[UniformMesh] = None
    mesh_test: Optional[UniformMesh] = None
    test_refine: int = 0
    theta_fn: Callable = theta_eval
    truth_infsup: float = float("nan")
    role: str = "primal"
    extra: dict = field(default_factory=dict)

    @property
    def n_trial(self):
        return self.affine_ops[0].shape[1]

    @property
    def n_test(self):
        return self.affine_ops[0].shape[0]

    @property
    def n_affine(self):
        return len(self.affine_ops)

    def theta(self, p):
        return np.asarray(self.theta_fn(p), dtype=float)

    def operator(self, p):
        """Sparse ``sum_k theta_k(p) A_k``."""
        th = self.theta(p)
        A = th[0] * self.affine_ops[0]
        for t, Ak in zip(th[1:], self.affine_ops[1:]):
            A = A + t * Ak
        return A.tocsr()

    def point(self, y):
        return ParameterPoint(y, self.epsilon)

    def frozen(self, theta):
        """Copy whose affine coefficients do not depend on the parameter."""
        th = np.array(theta, dtype=float)
        return dataclasses.replace(self, theta_fn=lambda p, _t=th: _t.copy())

    def with_theta(self, fn):
        return dataclasses.replace(self, theta_fn=fn)

    def dual(self, ell):
        """Adjoint problem ``b(w, z) = -ell(w)``: trial and test roles swapped.

        The dual trial space is the primal test space with the test norm, the
        dual test space is the primal trial space with the trial norm, and the
        load is ``-ell``.
        """
        ell = np.asarray(ell, dtype=float)
        if ell.shape != (self.n_trial,):
            raise ValueError("goal functional must live on the trial space")
        return TruthModel(
            h=self.h,
            epsilon=self.epsilon,
            affine_ops=[A.T.tocsr() for A in self.affine_ops],
            gram_U=self.gram_V,
            gram_V=self.gram_U,
            rhs=-ell,
            prolong=None if self.prolong is None else self.prolong.T.tocsr(),
            mesh_trial=self.mesh_test,
            mesh_test=self.mesh_trial,
            test_refine=self.test_refine,
            theta_fn=self.theta_fn,
            truth_infsup=self.truth_infsup,
            role="dual",
        )

    def galerkin_ops(self):
        """Square trial-space forms ``P^T A_k`` (Galerkin restriction)."""
        if self.prolong is None:
            raise ValueError("no trial-to-test embedding for a Galerkin restriction")
        Pt = self.prolong.T.tocsr()
        return [(Pt @ A).tocsr() for A in self.affine_ops], Pt @ self.rhs


def assemble_truth(h, epsilon, test_refine=0, check_infsup=True, infsup_samples=8):
    """Assemble the truth model at mesh size ``h`` and diffusion ``epsilon``.

    Parameters
    ----------
    h : float
        Trial mesh size; ``1/h`` must be an integer >= 4 (at least 3x3
        interior vertices).
    epsilon : float
        Diffusion, in (0, 1].
    test_refine : int
        Number of uniform refinements of the trial mesh used for the test
        space (0 = same mesh).
    check_infsup : bool
        Compute the truth inf-sup constant at ``infsup_samples`` angles and
        refuse to build if it falls below 1e-3.
    """
    if not (epsilon > 0.0) or epsilon > 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    if not h > 0:
        raise ValueError("mesh size must be positive")
    n = int(round(1.0 / h))
    if n < 4:
        raise ValueError(f"mesh 1/h = {n} too coarse (need >= 4 cells per side)")
    if abs(n * h - 1.0) > 1e-9:
        raise ValueError(f"1/h must be an integer, got h = {h}")
    if test_refine < 0:
        raise ValueError("test_refine must be nonnegative")
    coarse = UniformMesh(n)
    fine = coarse.refine(test_refine) if test_refine else coarse

    Kc, _, _, _ = assemble_p1(coarse)
    Kf, Cxf, Cyf, Mf = assemble_p1(fine)
    ic = coarse.interior
    jf = fine.interior
    if test_refine:
        P = prolongation(coarse, fine)
    else:
        P = sp.identity(coarse.n_nodes, format="csr")
    Pint = P[jf][:, ic].tocsr()

    def couple(B):
        return (B[jf] @ P[:, ic]).tocsr()

    ops = [couple(Kf), couple(Cxf), couple(Cyf), couple(Mf)]
    for A in ops:
        A.eliminate_zeros()
    gram_U = SpdGram(Kc[ic][:, ic])
    gram_V = SpdGram((epsilon * Kf + Mf)[jf][:, jf])
    rhs = np.asarray(Mf[jf] @ np.ones(fine.n_nodes)).ravel()

    model = TruthModel(
        h=1.0 / n,
        epsilon=float(epsilon),
        affine_ops=ops,
        gram_U=gram_U,
        gram_V=gram_V,
        rhs=rhs,
        prolong=Pint,
        mesh_trial=coarse,
        mesh_test=fine,
        test_refine=int(test_refine),
    )
    if check_infsup:
        beta = truth_infsup(model, infsup_samples)
        model.truth_infsup = beta
        if beta < INFSUP_FLOOR:
            raise TruthStabilityError(
                f"truth inf-sup {beta:.3e} below {INFSUP_FLOOR:g}; refine the mesh "
                f"(h = {model.h:g}, eps = {epsilon:g})"
            )
    return model


def truth_infsup(model, samples=8):
    """Smallest inf-sup constant of the full truth pair over ``samples`` angles."""
    beta = np.inf
    for p in angle_grid(samples, model.epsilon):
        A = model.operator(p).toarray()
        beta = min(beta, min_generalized_singular(A, model.gram_V, model.gram_U))
    return float(beta)


def _check_trial(model, u):
    u = np.asarray(u, dtype=float)
    if u.shape[0] != model.n_trial:
        raise ValueError(f"expected {model.n_trial} trial coefficients, got {u.shape[0]}")
    return u


def apply_operator(model, p, u):
    """Test-space functional ``sum_k theta_k(p) A_k u``."""
    u = _check_trial(model, u)
    th = model.theta(p)
    out = th[0] * (model.affine_ops[0] @ u)
    for t, A in zip(th[1:], model.affine_ops[1:]):
        out = out + t * (A @ u)
    return out


def u_hat_norm(model, p, u):
    """Renormed trial norm ``|B_p u|_{V'}``."""
    return dual_norm(model.gram_V, apply_operator(model, p, u))


def _saddle_solve(G, A, top, bottom, what):
    n_top = G.shape[0]
    K = sp.bmat([[G, A], [A.T, None]], format="csc")
    b = np.concatenate([top, bottom])
    try:
        with np.errstate(all="raise"):
            lu = spla.splu(K)
    except (RuntimeError, FloatingPointError) as exc:
        raise TruthStabilityError(
            f"{what}: singular saddle matrix; the truth pair is not inf-sup "
            "stable at this parameter, refine the mesh"
        ) from exc
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise TruthStabilityError(f"{what}: non-finite saddle solution; refine the mesh")
    res = np.linalg.norm(K @ x - b)
    if res > 1e-9 * max(np.linalg.norm(b), 1e-300):
        # one step of iterative refinement before giving up
        x = x + lu.solve(b - K @ x)
        res = np.linalg.norm(K @ x - b)
        if res > 1e-9 * max(np.linalg.norm(b), 1e-300):
            raise TruthStabilityError(f"{what}: saddle residual {res:.2e} too large")
    return x[:n_top], x[n_top:]


def truth_solve(model, p):
    """Minimum-residual truth solution and its Riesz-lifted residual.

    Solves ``[G_V, A_p; A_p^T, 0] (r; u) = (f; 0)``.

    Returns
    -------
    u : ndarray, trial coefficients
    r : ndarray, test coefficients of ``R_V (f - B_p u)``
    """
    A = model.operator(p)
    r, u = _saddle_solve(
        model.gram_V.matrix, A, model.rhs, np.zeros(model.n_trial), "truth_solve"
    )
    return u, r


def dual_truth_solve(model, p, ell):
    """Dual truth solution ``z`` with ``b_p(w, z) = -ell(w)`` for all trial ``w``.

    For matched trial and test dimensions this solves
    ``[G_U, A_p^T; A_p, 0] (s; z) = (-ell; 0)``, whose solution has ``s = 0``
    and ``A_p^T z = -ell``.  When the test space is larger that system is
    singular, and ``z`` is taken as the minimum-V-norm solution of
    ``A_p^T z = -ell`` instead: ``[G_V, A_p; A_p^T, 0] (z; s) = (0; -ell)``.

    Returns
    -------
    z : ndarray, test coefficients
    s : ndarray, trial coefficients
    """
    ell = _check_trial(model, ell)
    A = model.operator(p)
    if model.n_test == model.n_trial:
        s, z = _saddle_solve(
            model.gram_U.matrix, A.T.tocsr(), -ell, np.zeros(model.n_test), "dual_truth_solve"
        )
    else:
        z, s = _saddle_solve(
            model.gram_V.matrix, A, np.zeros(model.n_test), -ell, "dual_truth_solve"
        )
    return z, s


def _clip_polygon(poly, lo, hi):
    """Clip a convex polygon (k, 2) to the box [lo, hi]^2 (Sutherland-Hodgman)."""
    def clip(pts, axis, bound, keep_greater):
        out = []
        m = len(pts)
        for i in range(m):
            P, Q = pts[i], pts[(i + 1) % m]
            inP = (P[axis] >= bound) if keep_greater else (P[axis] <= bound)
            inQ = (Q[axis] >= bound) if keep_greater else (Q[axis] <= bound)
            if inP:
                out.append(P)
            if inP != inQ:
                t = (bound - P[axis]) / (Q[axis] - P[axis])
                out.append(P + t * (Q - P))
        return out

    pts = [np.asarray(q, dtype=float) for q in poly]
    for axis in (0, 1):
        pts = clip(pts, axis, lo[axis], True)
        if not pts:
            return []
        pts = clip(pts, axis, hi[axis], False)
        if not pts:
            return []
    return pts


def subdomain_mean_functional(model, lo=(0.7, 0.7), hi=(0.9, 0.9)):
    """Trial-space functional ``w -> mean of w over the box [lo, hi]``.

    Exact: each triangle is clipped to the box and the linear basis functions
    are integrated over the clipped polygon by the centroid rule.
    """
    mesh = model.mesh_trial
    pts = mesh.points
    tri = mesh.triangles
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    full = np.zeros(mesh.n_nodes)
    for t in tri:
        V = pts[t]
        if (V[:, 0].max() <= lo[0] or V[:, 0].min() >= hi[0]
                or V[:, 1].max() <= lo[1] or V[:, 1].min() >= hi[1]):
            continue
        poly = _clip_polygon(V, lo, hi)
        if len(poly) < 3:
            continue
        poly = np.array(poly)
        # fan triangulation of the convex clipped polygon
        T = np.linalg.inv(np.column_stack([V[1] - V[0], V[2] - V[0]]))
        for k in range(1, len(poly) - 1):
            a, b, c = poly[0], poly[k], poly[k + 1]
            area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
            if area == 0.0:
                continue
            g = (a + b + c) / 3.0
            st = T @ (g - V[0])
            lam = np.array([1.0 - st[0] - st[1], st[0], st[1]])
            full[t] += area * lam
    full /= np.prod(hi - lo)
    return full[mesh.interior]


def export_matrices(model, directory):
    """Write each affine block, both Grams and the load to ``directory``.

    One coordinate-format text file per object, first line
    ``%%role name rows cols nnz`` followed by 1-based ``row col value`` lines
    (``row value`` for vectors).
    """
    os.makedirs(directory, exist_ok=True)
    written = []

    def dump(name, role, M):
        path = os.path.join(directory, f"{name}.mtx")
        if sp.issparse(M):
            C = sp.coo_matrix(M)
            lines = [f"%%{role} {name} {C.shape[0]} {C.shape[1]} {C.nnz}"]
            order = np.lexsort((C.col, C.row))
            lines += [f"{C.row[i] + 1} {C.col[i] + 1} {C.data[i]!r}" for i in order]
        else:
            v = np.asarray(M, dtype=float).ravel()
            nz = np.flatnonzero(v)
            lines = [f"%%{role} {name} {v.size} 1 {nz.size}"]
            lines += [f"{i + 1} {v[i]!r}" for i in nz]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(path)

    for k, A in enumerate(model.affine_ops, start=1):
        dump(f"A{k}", "operator", A)
    dump("gram_U", "gram", model.gram_U.matrix)
    dump("gram_V", "gram", model.gram_V.matrix)
    dump("rhs", "load", model.rhs)
    return written
