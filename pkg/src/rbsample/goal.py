"""Goal-oriented evaluation with primal and dual reduced models.

For a linear quantity of interest ``I(y) = ell(u(y))`` the dual solution
``z(y)`` solves ``b_y(w, z) = -ell(w)`` for all trial ``w``.  Given primal and
dual approximations ``u_bar`` and ``z_bar`` the corrected functional

    ell_hat(u_bar) = ell(u_bar) - r(u_bar, z_bar),   r(u_bar, v) = f(v) - b_y(u_bar, v)

has error ``|b_y(u - u_bar, z - z_bar)|``, the product of the two errors in
the renormed trial norm and the test norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import dual_norm
from .stab import saddle_reduced_solve, sga_dou_run
from .trace import GreedyTrace
from .truth import angle_grid, apply_operator, dual_truth_solve, subdomain_mean_functional, truth_solve

__all__ = [
    "GoalFunctional",
    "corrected_functional",
    "goal_error_bound_check",
    "bilinear_form",
    "budget_split",
    "estimate_rate",
    "primal_dual_pipeline",
    "GoalReport",
    "GOAL_COLUMNS",
]

GOAL_COLUMNS = ["y", "I_truth", "I_uncorrected", "I_corrected", "err_uncorrected",
                "err_corrected", "bound_product"]


@dataclass(frozen=True)
class GoalFunctional:
    """Trial-space functional ``ell`` with a human-readable description."""

    ell: np.ndarray
    descriptor: str = ""

    def __post_init__(self):
        ell = np.asarray(self.ell, dtype=float)
        if ell.ndim != 1:
            raise ValueError("goal functional must be a vector")
        if not np.all(np.isfinite(ell)):
            raise ValueError("goal functional has non-finite entries")
        if not np.any(ell):
            raise ValueError("goal functional must be nonzero")
        object.__setattr__(self, "ell", ell)

    @classmethod
    def subdomain_mean(cls, model, lo=(0.7, 0.7), hi=(0.9, 0.9)):
        ell = subdomain_mean_functional(model, lo, hi)
        return cls(ell, f"mean over [{lo[0]:g}, {hi[0]:g}] x [{lo[1]:g}, {hi[1]:g}]")

    def __call__(self, u):
        return float(self.ell @ u)


def _ell(ell):
    return ell.ell if isinstance(ell, GoalFunctional) else np.asarray(ell, dtype=float)


def corrected_functional(model, p, u_bar, z_bar, ell):
    """``ell(u_bar) - (f - B_p u_bar)(z_bar)``."""
    e = _ell(ell)
    u_bar = np.asarray(u_bar, dtype=float)
    z_bar = np.asarray(z_bar, dtype=float)
    if e.shape != (model.n_trial,) or u_bar.shape != (model.n_trial,):
        raise ValueError("u_bar and ell must live on the trial space")
    if z_bar.shape != (model.n_test,):
        raise ValueError("z_bar must live on the test space")
    res = model.rhs - apply_operator(model, p, u_bar)
    return float(e @ u_bar - res @ z_bar)


def bilinear_form(model, p, w, v):
    """``b_p(w, v)`` for trial ``w`` and test ``v``."""
    return float(np.asarray(v, dtype=float) @ apply_operator(model, p, w))


def goal_error_bound_check(model, p, u_bar, z_bar, ell, u=None, z=None):
    """``(|ell_hat(u_bar) - ell(u)|, |u - u_bar|_Uhat |z - z_bar|_V)``.

    The continuity constant of ``b_p`` between the renormed trial norm and
    the test norm is one, so the second value bounds the first.  Truth
    solutions are computed unless supplied.
    """
    e = _ell(ell)
    if u is None:
        u = truth_solve(model, p)[0]
    if z is None:
        z = dual_truth_solve(model, p, e)[0]
    lhs = abs(corrected_functional(model, p, u_bar, z_bar, e) - float(e @ u))
    du = np.asarray(u) - np.asarray(u_bar)
    dz = np.asarray(z) - np.asarray(z_bar)
    nu = dual_norm(model.gram_V, apply_operator(model, p, du))
    nz = math.sqrt(max(float(dz @ model.gram_V.matvec(dz)), 0.0))
    return lhs, nu * nz


def budget_split(alpha, beta, n):
    """Primal share ``clamp(floor(alpha n / (alpha + beta)), 1, n - 1)`` of ``n``."""
    if n < 2:
        raise ValueError("total budget must be at least 2")
    if not (alpha > 0 and beta > 0):
        raise ValueError("rates must be positive")
    m = math.floor(alpha * n / (alpha + beta))
    return int(min(max(m, 1), n - 1))


def estimate_rate(values, floor=1e-3):
    """Algebraic rate ``a`` of ``values[n-1] ~ C n^-a`` from the last half of the sequence.

    Least-squares fit of ``log value`` against ``log n`` over the last
    ``ceil(len/2)`` entries (``values[0]`` belongs to ``n = 1``).  Rates
    below ``floor`` are clamped up to it.
    """
    v = np.asarray(values, dtype=float)
    n = np.arange(1, v.size + 1)
    k = math.ceil(v.size / 2)
    sel = slice(v.size - k, v.size)
    x, y = np.log(n[sel]), v[sel]
    ok = y > 0
    if ok.sum() < 2:
        return floor
    slope = np.polyfit(x[ok], np.log(y[ok]), 1)[0]
    return float(max(-slope, floor))


@dataclass
class GoalReport:
    trace: GreedyTrace
    m: int
    n_total: int
    sigma_primal: float
    sigma_dual: float
    max_err_corrected: float
    max_err_uncorrected: float
    fraction_improved: float
    primal_trace: GreedyTrace = None
    dual_trace: GreedyTrace = None
    extra: dict = field(default_factory=dict)

    @property
    def bound(self):
        return self.sigma_primal * self.sigma_dual


def _nv_at(trace, n):
    for row in trace.rows:
        if row["n"] == n:
            return int(row["n_V"])
    raise ValueError(f"trace has no row for n = {n}")


def primal_dual_pipeline(model, grid, delta, n_total, alpha_est=None, beta_est=None, ell=None,
                         m=None, validation=None, mode="greedy"):
    """Primal and dual double greedy with a split budget, then goal evaluation.

    Parameters
    ----------
    model : TruthModel
    grid : list of ParameterPoint
        Training set for both greedy runs.
    delta : float
        Proximality target of the inner stabilization.
    n_total : int
        Combined trial dimension ``m + (n_total - m)``.
    alpha_est, beta_est : float, optional
        Primal and dual algebraic rates for :func:`budget_split`.  Missing
        rates are estimated from surrogate traces run to ``n_total - 1``.
    ell : GoalFunctional or ndarray, optional
        Defaults to the mean over ``(0.7, 0.9)^2``.
    m : int, optional
        Primal budget; overrides the split.
    validation : list of ParameterPoint, optional
        Evaluation set; defaults to the training grid shifted by half a cell.

    Returns
    -------
    GoalReport
    """
    if n_total < 2:
        raise ValueError("n_total must be at least 2")
    if ell is None:
        ell = GoalFunctional.subdomain_mean(model)
    e = _ell(ell)
    dual_model = model.dual(e)
    if validation is None:
        validation = angle_grid(len(grid), model.epsilon, offset=0.5)

    need_rates = m is None and (alpha_est is None or beta_est is None)
    n_run = n_total - 1
    srm_p, tr_p = sga_dou_run(model, grid, delta, tol=0.0, n_max=n_run, mode=mode)
    srm_d, tr_d = sga_dou_run(dual_model, grid, delta, tol=0.0, n_max=n_run, mode=mode)
    if need_rates:
        alpha_est = estimate_rate(tr_p.column("surrogate_max")) if alpha_est is None else alpha_est
        beta_est = estimate_rate(tr_d.column("surrogate_max")) if beta_est is None else beta_est
    if m is None:
        m = budget_split(alpha_est, beta_est, n_total)
    m_dual = n_total - m
    if not (1 <= m <= n_run and 1 <= m_dual <= n_run):
        raise ValueError(f"invalid split m = {m} of n_total = {n_total}")
    # a run that exhausted its manifold early already spans it
    m_eff, d_eff = min(m, srm_p.n), min(m_dual, srm_d.n)
    prim = srm_p.truncated(m_eff, _nv_at(tr_p, m_eff))
    dual = srm_d.truncated(d_eff, _nv_at(tr_d, d_eff))

    trace = GreedyTrace(columns=list(GOAL_COLUMNS), metadata={
        "n_total": n_total, "m": m, "m_used": m_eff, "dual_used": d_eff, "alpha": alpha_est, "beta": beta_est, "delta": delta,
        "epsilon": model.epsilon, "h": model.h, "goal": getattr(ell, "descriptor", ""),
    })
    err_p, err_d = [], []
    improved = 0
    for p in validation:
        u = truth_solve(model, p)[0]
        z = dual_truth_solve(model, p, e)[0]
        c, _ = saddle_reduced_solve(prim, p)
        d, _ = saddle_reduced_solve(dual, p)
        ub = prim.trial.basis @ c
        zb = dual.trial.basis @ d
        I_true = float(e @ u)
        I_unc = float(e @ ub)
        I_cor = corrected_functional(model, p, ub, zb, e)
        ep = dual_norm(model.gram_V, apply_operator(model, p, u - ub))
        dz = z - zb
        ed = math.sqrt(max(float(dz @ model.gram_V.matvec(dz)), 0.0))
        err_p.append(ep)
        err_d.append(ed)
        eu, ec = abs(I_unc - I_true), abs(I_cor - I_true)
        improved += ec <= eu
        trace.append(y=p.y, I_truth=I_true, I_uncorrected=I_unc, I_corrected=I_cor,
                     err_uncorrected=eu, err_corrected=ec, bound_product=ep * ed)
    return GoalReport(
        trace=trace, m=m, n_total=n_total,
        sigma_primal=float(max(err_p)), sigma_dual=float(max(err_d)),
        max_err_corrected=float(max(trace.column("err_corrected"))),
        max_err_uncorrected=float(max(trace.column("err_uncorrected"))),
        fraction_improved=improved / len(validation),
        primal_trace=tr_p, dual_trace=tr_d,
    )
