"""Weak greedy algorithm on compact sets of a finite-dimensional Hilbert space.

Provides the abstract greedy (exact and adversarial selection), Kolmogorov
width oracles, and a verification harness that checks the greedy-versus-width
comparison inequalities on a completed trace.

Two kinds of compact set are supported.  A *point cloud* is a finite set of
vectors with a Gram inner product.  An *ellipsoid* ``{x : sum (x_j/c_j)^2 <= 1}``
in the Euclidean metric has exact widths ``d_n = c_{n+1}``; its greedy error
over the continuum is ``|(I - P_n) diag(c)|_2`` and is evaluated exactly, while
selections are drawn from a fixed candidate pool (the ``2D`` axis extreme
points followed by a low-discrepancy sample of the boundary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy import optimize
from scipy.special import logsumexp, ndtri
from scipy.stats import qmc

from .kernel import SpdGram
from .trace import GreedyTrace

__all__ = [
    "CompactSet",
    "CheckResult",
    "VerificationReport",
    "weak_greedy_run",
    "width_oracle",
    "thm_constant",
    "delayed_q",
    "verify_rate_theorems",
    "verify_delayed_comparison",
    "WGREEDY_COLUMNS",
]

WGREEDY_COLUMNS = ["n", "selected", "sigma", "width_lower", "width_upper", "width_exact"]
DEFAULT_SAMPLE = 100_000


@dataclass
class CompactSet:
    """Point cloud or axis-aligned ellipsoid.

    Use :meth:`point_cloud` or :meth:`ellipsoid` to construct.
    """

    kind: str
    points: np.ndarray = None  # (K, D), one point per row
    gram: np.ndarray = None
    semiaxes: np.ndarray = None
    description: str = ""
    _coords: np.ndarray = field(default=None, repr=False)
    _pool_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def point_cloud(cls, points, gram=None, description=""):
        X = np.atleast_2d(np.asarray(points, dtype=float))
        if X.size == 0 or X.shape[0] == 0:
            raise ValueError("point cloud must be nonempty")
        if not np.all(np.isfinite(X)):
            raise ValueError("point cloud has non-finite entries")
        D = X.shape[1]
        if gram is None:
            G = np.eye(D)
        else:
            G = gram.matrix if isinstance(gram, SpdGram) else np.asarray(gram, dtype=float)
            if sp.issparse(G):
                G = G.toarray()
            if G.shape != (D, D):
                raise ValueError(f"Gram shape {G.shape} does not match dimension {D}")
        L = SpdGram(G).cholesky_lower()
        desc = description or f"point_cloud(K={X.shape[0]}, D={D})"
        return cls(kind="point_cloud", points=X, gram=G, description=desc, _coords=X @ L)

    @classmethod
    def ellipsoid(cls, semiaxes, description=""):
        c = np.asarray(semiaxes, dtype=float).ravel()
        if c.size == 0:
            raise ValueError("ellipsoid needs at least one semiaxis")
        if not np.all(c > 0) or not np.all(np.isfinite(c)):
            raise ValueError("ellipsoid semiaxes must be finite and strictly positive")
        if np.any(np.diff(c) > 0):
            raise ValueError("ellipsoid semiaxes must be sorted nonincreasing")
        desc = description or f"ellipsoid(D={c.size})"
        return cls(kind="ellipsoid", semiaxes=c, description=desc)

    @property
    def dim(self):
        return self.semiaxes.size if self.kind == "ellipsoid" else self.points.shape[1]

    @property
    def coords(self):
        """Point-cloud coordinates in which the Gram metric is Euclidean."""
        if self.kind != "point_cloud":
            raise ValueError("only point clouds have explicit coordinates")
        return self._coords

    def pool(self, sample=DEFAULT_SAMPLE, seed=0):
        """Candidate set for selection, rows in the Euclidean metric.

        Point cloud: its own points.  Ellipsoid: ``+c_j e_j, -c_j e_j`` for
        each axis, then ``sample`` scrambled-Sobol boundary points.
        """
        if self.kind == "point_cloud":
            return self._coords
        key = (int(sample), int(seed))
        if key not in self._pool_cache:
            c = self.semiaxes
            D = c.size
            axes = np.zeros((2 * D, D))
            idx = np.arange(D)
            axes[2 * idx, idx] = c
            axes[2 * idx + 1, idx] = -c
            if sample > 0:
                m = max(1, math.ceil(math.log2(sample)))
                u = qmc.Sobol(d=D, scramble=True, seed=seed).random_base2(m)[:sample]
                g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
                g /= np.linalg.norm(g, axis=1, keepdims=True)
                pool = np.vstack([axes, g * c])
            else:
                pool = axes
            self._pool_cache[key] = pool
        return self._pool_cache[key]


def _orthonormal_extend(Q, x):
    """Append the normalized component of ``x`` orthogonal to columns of ``Q``."""
    v = np.array(x, dtype=float)
    n0 = np.linalg.norm(v)
    if n0 == 0.0:
        return Q, False
    if Q.shape[1]:
        for _ in range(2):
            v -= Q @ (Q.T @ v)
    nv = np.linalg.norm(v)
    if nv <= 1e-13 * n0:
        return Q, False
    return np.column_stack([Q, v / nv]), True


def _continuum_sigma(c, Q):
    """Exact ``max_{x in E} dist(x, span Q)`` for the ellipsoid and its maximizer."""
    R = np.diag(c)
    if Q.shape[1]:
        R = R - Q @ (Q.T @ R)
    _, s, vt = np.linalg.svd(R)
    x = c * vt[0]
    nz = np.flatnonzero(np.abs(x) > 1e-14 * np.abs(x).max()) if np.any(x) else []
    if len(nz) and x[nz[0]] < 0:
        x = -x
    return float(s[0]), x


def weak_greedy_run(cset, gamma, n_max, mode="exact", widths=True, sample=DEFAULT_SAMPLE,
                    seed=0, width_starts=50):
    """Run the weak greedy algorithm and record one trace row per ``n``.

    Parameters
    ----------
    cset : CompactSet
    gamma : float in (0, 1]
        Weakness parameter.  Only used by ``mode="adversarial"``.
    n_max : int
        Largest space dimension; rows ``n = 0..n_max`` are produced unless
        the set is exhausted first (``sigma_n = 0``).
    mode : {"exact", "adversarial"}
        ``exact`` picks the farthest element.  ``adversarial`` picks the
        closest element among those at distance ``>= gamma * sigma_n``.
    widths : bool
        Fill the width columns through :func:`width_oracle`.
    sample, seed : int
        Ellipsoid candidate pool size and Sobol seed.

    Returns
    -------
    GreedyTrace
        Row ``n`` holds ``sigma_n`` and the element selected to build
        ``H_{n+1}`` (``selected = -1`` for the continuum maximizer of an
        ellipsoid, empty on the last row).
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if mode not in ("exact", "adversarial"):
        raise ValueError(f"unknown mode {mode!r}")
    D = cset.dim
    if n_max < 0 or n_max > D:
        raise ValueError(f"n_max must lie in [0, {D}], got {n_max}")

    pool = cset.pool(sample, seed)
    # residuals are kept explicitly: subtracting squared projections from
    # squared norms would lose half the digits of small distances
    res = np.array(pool, dtype=float, copy=True)
    d2 = np.einsum("ij,ij->i", res, res)
    Q = np.zeros((D, 0))
    trace = GreedyTrace(columns=list(WGREEDY_COLUMNS), metadata={
        "gamma": float(gamma), "mode": mode, "set": cset.description,
        "n_max": int(n_max), "sample": int(sample) if cset.kind == "ellipsoid" else None,
        "seed": int(seed),
    })
    sigma_prev = np.inf
    for n in range(n_max + 1):
        pool_max = float(np.sqrt(d2.max()))
        if cset.kind == "ellipsoid":
            cont, x_cont = _continuum_sigma(cset.semiaxes, Q)
            sigma = max(cont, pool_max)
        else:
            x_cont = None
            sigma = pool_max
        sigma = min(sigma, sigma_prev)
        sigma_prev = sigma
        row = {"n": n, "sigma": sigma, "selected": None}
        if widths:
            if n < D:
                lo, up, ex = width_oracle(cset, n, seed=seed, starts=width_starts)
            else:
                lo, up, ex = 0.0, 0.0, 0.0
            row.update(width_lower=lo, width_upper=up, width_exact=ex)
        trace.rows.append(row)
        if n == n_max or sigma == 0.0:
            break

        if mode == "exact":
            j = int(np.argmax(d2))
            if pool_max >= sigma * (1.0 - 1e-12) or x_cont is None:
                sel, x = j, pool[j]
            else:
                sel, x = -1, x_cont
        else:
            ok = np.flatnonzero(d2 >= (gamma * sigma) ** 2)
            if ok.size:
                j = int(ok[np.argmin(d2[ok])])
                sel, x = j, pool[j]
            elif x_cont is not None:
                sel, x = -1, x_cont
            else:  # pragma: no cover - the pool maximizer is always legal
                j = int(np.argmax(d2))
                sel, x = j, pool[j]
        row["selected"] = sel
        row["element"] = np.array(x)
        Q, grew = _orthonormal_extend(Q, x)
        if not grew:
            break
        q = Q[:, -1]
        res -= np.outer(res @ q, q)
        d2 = np.minimum(d2, np.einsum("ij,ij->i", res, res))
    trace.metadata["basis"] = Q
    return trace


# ---------------------------------------------------------------------------
# widths


def _max_dist2(Z, Q):
    """Squared distances of the columns of ``Z`` from ``span Q`` (orthonormal)."""
    d2 = np.einsum("ij,ij->j", Z, Z)
    if Q.shape[1]:
        P = Q.T @ Z
        d2 = d2 - np.einsum("ij,ij->j", P, P)
    return np.maximum(d2, 0.0)


def _smoothed_refine(Z, W0, taus):
    """Minimize a log-sum-exp smoothing of the max squared distance over span W."""
    r, n = W0.shape
    scale = float(np.max(np.einsum("ij,ij->j", Z, Z)))
    if scale == 0.0:
        return W0
    Zs = Z / math.sqrt(scale)
    zz = np.einsum("ij,ij->j", Zs, Zs)

    def make(tau):
        def fun(wflat):
            W = wflat.reshape(r, n)
            S = W.T @ W
            A = W.T @ Zs  # (n, K)
            try:
                B = la.solve(S, A, assume_a="pos")
            except (la.LinAlgError, ValueError):
                return np.inf, np.zeros_like(wflat)
            d = zz - np.einsum("ij,ij->j", A, B)
            F = logsumexp(tau * d) / tau
            p = np.exp(tau * d - logsumexp(tau * d))
            # gradient of z^T W S^{-1} W^T z is 2 z b^T - 2 W b b^T
            Bp = B * p
            grad = -(2.0 * Zs @ Bp.T - 2.0 * W @ (B @ Bp.T))
            return F, grad.ravel()

        return fun

    w = W0.ravel().copy()
    for tau in taus:
        res = optimize.minimize(make(tau), w, jac=True, method="L-BFGS-B",
                                options={"maxiter": 500, "gtol": 1e-12, "ftol": 1e-15})
        if np.all(np.isfinite(res.x)):
            w = res.x
    return w.reshape(r, n)


def width_oracle(cset, n, seed=0, starts=50):
    """Bracket (or exact value) of the Kolmogorov ``n``-width.

    Returns
    -------
    lower, upper : float
    exact : float or None
        For an ellipsoid, ``exact = lower = upper = c_{n+1}``.  For a point
        cloud, ``lower`` is the RMS tail of the singular values (the optimal
        mean-square error, which cannot exceed the optimal max error) and
        ``upper`` is the max distance to the best subspace found among the
        POD space, the greedy space and ``starts`` random subspaces, each
        refined by quasi-Newton descent on a smoothed max-distance.
    """
    D = cset.dim
    if n < 0 or n >= D:
        raise ValueError(f"width index must satisfy 0 <= n < {D}, got {n}")
    if cset.kind == "ellipsoid":
        v = float(cset.semiaxes[n])
        return v, v, v

    Y = cset.coords  # (K, D)
    K = Y.shape[0]
    U, s, _ = np.linalg.svd(Y.T, full_matrices=False)
    rank = int(np.sum(s > 1e-13 * (s[0] if s.size else 0.0)))
    lower = float(np.sqrt(np.sum(s[n:] ** 2) / K))
    if n == 0:
        v = float(np.sqrt(np.max(np.einsum("ij,ij->i", Y, Y))))
        return lower, v, None
    if n >= rank:
        return lower, 0.0, None
    # work inside the span of the cloud, where an optimal subspace lives
    Z = (U[:, :rank].T @ Y.T)  # (rank, K)

    def upper_of(W):
        Q, _ = np.linalg.qr(W)
        return float(np.sqrt(_max_dist2(Z, Q).max()))

    candidates = [np.eye(rank)[:, :n]]  # POD: leading singular directions
    gtrace = weak_greedy_run(CompactSet.point_cloud(Z.T), 1.0, n, widths=False)
    Qg = gtrace.metadata["basis"]
    if Qg.shape[1] == n:
        candidates.append(Qg)
    rng = np.random.default_rng(seed)
    for _ in range(starts):
        candidates.append(rng.standard_normal((rank, n)))
    best = min(upper_of(W) for W in candidates[:2])
    taus = (30.0, 300.0, 3000.0)
    for W in candidates:
        Wr = _smoothed_refine(Z, W, taus)
        best = min(best, upper_of(W), upper_of(Wr))
    return lower, best, None


# ---------------------------------------------------------------------------
# verification


@dataclass
class CheckResult:
    name: str
    n: int
    lhs: float
    rhs: float
    passed: bool
    exact: bool
    detail: str = ""

    @property
    def hard_failure(self):
        return self.exact and not self.passed

    @property
    def inconclusive(self):
        return (not self.exact) and not self.passed


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, *args, **kw):
        self.checks.append(CheckResult(*args, **kw))

    @property
    def hard_failures(self):
        return [c for c in self.checks if c.hard_failure]

    @property
    def inconclusive(self):
        return [c for c in self.checks if c.inconclusive]

    @property
    def ok(self):
        return not self.hard_failures

    def by_name(self, name):
        return [c for c in self.checks if c.name == name]

    def summary(self):
        names = sorted({c.name for c in self.checks})
        lines = []
        for nm in names:
            cs = self.by_name(nm)
            bad = [c for c in cs if not c.passed]
            status = "pass" if not bad else ("FAIL" if any(c.exact for c in bad) else "inconclusive")
            lines.append(f"{nm}: {len(cs) - len(bad)}/{len(cs)} {status}")
        return "\n".join(lines + self.notes)


def thm_constant(alpha, gamma):
    """``(q, C)`` with ``q = ceil(2^(alpha+1)/gamma)^2`` and ``C = q^(1/2) (4q)^alpha``."""
    q = math.ceil(2.0 ** (alpha + 1) / gamma) ** 2
    return q, math.sqrt(q) * (4.0 * q) ** alpha


def delayed_q(gamma, theta):
    """Delay factor ``q = ceil(2/(gamma*theta))^2`` of the conditional comparison."""
    return math.ceil(2.0 / (gamma * theta)) ** 2


def _width_arrays(trace, cset):
    """Per-row (upper-or-exact, lower, is_exact) width arrays."""
    up, lo, ex = [], [], []
    for row in trace.rows:
        n = row["n"]
        if "width_upper" in row and row.get("width_upper") is not None:
            l, u, e = row["width_lower"], row["width_upper"], row.get("width_exact")
        elif n < cset.dim:
            l, u, e = width_oracle(cset, n)
        else:
            l, u, e = 0.0, 0.0, 0.0
        if e is not None and not (isinstance(e, float) and math.isnan(e)):
            up.append(float(e)), lo.append(float(e)), ex.append(True)
        else:
            up.append(float(u)), lo.append(float(l)), ex.append(False)
    return np.array(up), np.array(lo), np.array(ex)


def verify_rate_theorems(trace, cset, alpha, M, gamma=None):
    """Check the greedy-versus-width inequalities on a completed trace.

    Checks, for every admissible ``n``:

    * ``thm``    -- ``sigma_n <= q^(1/2) (4q)^alpha M n^-alpha`` (if the width
      hypothesis ``d_0 <= M``, ``d_n <= M n^-alpha`` holds)
    * ``double`` -- ``sigma_2n <= gamma^-1 sqrt(2 d_n)``
    * ``direct`` -- ``sigma_n <= sqrt(2) gamma^-1 min_{1<=m<n} d_m^((n-m)/n)``
    * ``lower``  -- ``d_n <= sigma_n``
    * ``sharp``  -- ``sigma_n <= 2^(n+1)/sqrt(3) d_n`` (exact widths only)

    ``double`` and ``direct`` are stated for sets in the unit ball; they are
    applied to the set rescaled by ``sigma_0`` (its largest norm), which leaves
    the others unchanged.  A failure against an exact width is a hard failure;
    against a bracket it is inconclusive.
    """
    gamma = trace.metadata.get("gamma", 1.0) if gamma is None else gamma
    sig = np.array(trace.column("sigma"), dtype=float)
    ns = np.array(trace.column("n"), dtype=int)
    up, lo, exact = _width_arrays(trace, cset)
    rep = VerificationReport()
    s0 = sig[0] if sig.size and sig[0] > 0 else 1.0

    q, C = thm_constant(alpha, gamma)
    hyp = bool(up[0] <= M) and all(up[i] <= M * float(ns[i]) ** (-alpha) for i in range(1, len(ns)))
    hyp_exact = bool(np.all(exact))
    rep.notes.append(f"thm: q = {q}, C = {C:.6g}, M = {M:.6g}, hypothesis "
                     f"{'holds' if hyp else 'not verified'}")
    for i in range(1, len(ns)):
        n = int(ns[i])
        rhs = C * M * n ** (-alpha)
        rep.add("thm", n, sig[i], rhs, bool(hyp and sig[i] <= rhs), hyp and hyp_exact,
                "" if hyp else "width hypothesis not verified")

    index = {int(n): i for i, n in enumerate(ns)}
    for i, n in enumerate(ns):
        n = int(n)
        if n >= 1 and 2 * n in index:
            j = index[2 * n]
            rhs = math.sqrt(2.0 * up[i] / s0) / gamma
            rep.add("double", n, sig[j] / s0, rhs, bool(sig[j] / s0 <= rhs), bool(exact[i]))
        if n >= 2:
            vals = [(up[index[m]] / s0) ** ((n - m) / n) for m in range(1, n)]
            k = int(np.argmin(vals))
            rhs = math.sqrt(2.0) / gamma * vals[k]
            rep.add("direct", n, sig[i] / s0, rhs, bool(sig[i] / s0 <= rhs),
                    bool(exact[index[k + 1]]))
        rep.add("lower", n, lo[i], sig[i], bool(lo[i] <= sig[i]), bool(exact[i]))
        if exact[i] and n >= 1:
            rhs = 2.0 ** (n + 1) / math.sqrt(3.0) * up[i]
            rep.add("sharp", n, sig[i], rhs, bool(sig[i] <= rhs), True)
    return rep


def verify_delayed_comparison(trace, cset, theta, gamma=None):
    """Check ``sigma_{n+qm} >= theta sigma_n  =>  sigma_n <= q^(1/2) d_m``.

    ``q`` is taken as ``ceil(2/(gamma theta))^2``.  Every triggered ``(n, m)``
    with ``n + q m`` inside the trace is reported.
    """
    if not (0.0 < theta < 1.0):
        raise ValueError("theta must lie in (0, 1)")
    gamma = trace.metadata.get("gamma", 1.0) if gamma is None else gamma
    q = delayed_q(gamma, theta)
    sig = np.array(trace.column("sigma"), dtype=float)
    ns = [int(n) for n in trace.column("n")]
    up, _, exact = _width_arrays(trace, cset)
    index = {n: i for i, n in enumerate(ns)}
    rep = VerificationReport()
    rep.notes.append(f"delayed: q = ceil(2/(gamma*theta))^2 = {q} (gamma = {gamma:g}, theta = {theta:g})")
    for n in ns:
        m = 0
        while n + q * m in index:
            i, j = index[n], index[n + q * m]
            if m in index and sig[j] >= theta * sig[i]:
                k = index[m]
                rhs = math.sqrt(q) * up[k]
                rep.add("delayed", n, sig[i], rhs, bool(sig[i] <= rhs), bool(exact[k]),
                        f"m={m}")
            m += 1
    return rep
