"""Acceptance suite: one test per criterion, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in
the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from rbsample.goal import (
    GoalFunctional,
    bilinear_form,
    corrected_functional,
    goal_error_bound_check,
    primal_dual_pipeline,
)
from rbsample.kernel import SpdGram, dual_norm, min_generalized_singular
from rbsample.stab import (
    delta_from_infsup,
    projection_deficiency,
    saddle_reduced_solve,
    sga_dou_run,
    worst_case_infsup,
)
from rbsample.truth import (
    angle_grid,
    apply_operator,
    assemble_truth,
    dual_truth_solve,
    truth_solve,
    u_hat_norm,
)
from rbsample.wgreedy import CompactSet, verify_rate_theorems, weak_greedy_run

pytestmark = pytest.mark.acceptance

RESULTS = []

D = 32
FAMILIES = {
    "j^-1/2": (np.arange(1, D + 1) ** -0.5, 0.5),
    "j^-1": (np.arange(1, D + 1) ** -1.0, 1.0),
    "j^-2": (np.arange(1, D + 1) ** -2.0, 2.0),
    "exp(-j^1/2)": (np.exp(-np.sqrt(np.arange(1, D + 1))), 1.0),
    "2^-j": (2.0 ** -np.arange(1, D + 1), 1.0),
}
EPSILONS = (2.0 ** -5, 2.0 ** -10, 2.0 ** -20)
H = 1 / 32
GRID = 64
DELTA = 0.1
SEED = 0


def record(number, title, checks):
    """Print and store the criterion line; ``checks`` is a list of (name, ok, detail)."""
    ok = all(c[1] for c in checks)
    parts = "; ".join(f"{name} {'ok' if good else 'FAILED'} ({detail})"
                      for name, good, detail in checks)
    line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} -- {parts}"
    RESULTS.append(line)
    print(line)
    return ok, line


def width_constant(c, alpha):
    n = np.arange(1, c.size)
    return float(max(c[0], np.max(c[1:] * n ** alpha)))


# ---------------------------------------------------------------------------
# shared runs


def run_weak_greedy_suite():
    traces, reports = {}, {}
    for name, (c, alpha) in FAMILIES.items():
        E = CompactSet.ellipsoid(c, description=name)
        M = width_constant(c, alpha)
        for gamma in (1.0, 0.5):
            for mode in ("exact", "adversarial"):
                tr = weak_greedy_run(E, gamma, D - 1, mode=mode, seed=SEED)
                traces[name, gamma, mode] = tr
                reports[name, gamma, mode] = verify_rate_theorems(tr, E, alpha, M, gamma=gamma)
    return traces, reports


def run_double_greedy_sweep(validate=False):
    runs = {}
    for eps in EPSILONS:
        model = assemble_truth(H, eps)
        grid = angle_grid(GRID, eps)
        runs[eps] = sga_dou_run(model, grid, DELTA, tol=1e-4, n_max=20, validate=validate)
    return runs


def run_goal_pipeline():
    model = assemble_truth(H, 2.0 ** -5)
    grid = angle_grid(GRID, model.epsilon)
    return model, primal_dual_pipeline(model, grid, DELTA, 12, m=6)


@pytest.fixture(scope="module")
def wg_suite():
    t0 = time.perf_counter()
    out = run_weak_greedy_suite()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def dou_sweep():
    t0 = time.perf_counter()
    out = run_double_greedy_sweep()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def goal_run():
    return run_goal_pipeline()


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_weak_greedy_theorems(wg_suite):
    (traces, reports), elapsed = wg_suite
    checks = []
    for name in ("lower", "thm", "double", "direct", "sharp"):
        total = sum(len(r.by_name(name)) for r in reports.values())
        bad = [(key, c) for key, r in reports.items() for c in r.by_name(name) if not c.passed]
        inexact = sum(not c.exact for r in reports.values() for c in r.by_name(name))
        detail = f"{total - len(bad)}/{total} hold"
        if bad:
            (fam, g, mode), c = bad[0]
            detail += f", first breach {fam} gamma={g} {mode} n={c.n}: {c.lhs:.3e} > {c.rhs:.3e}"
        checks.append((name, not bad and inexact == 0 and total > 0, detail))
    checks.append(("runs", len(traces) == 20, f"{len(traces)} runs, 5 sets x 2 gammas x 2 modes"))
    checks.append(("runtime", elapsed <= 60.0, f"{elapsed:.1f} s <= 60 s"))
    ok, line = record(1, "weak-greedy theorem suite", checks)
    assert ok, line


def test_criterion_2_isometry_and_renorming():
    t0 = time.perf_counter()
    model = assemble_truth(H, 2.0 ** -5)
    rng = np.random.default_rng(SEED)
    worst = 0.0
    cache = {}
    for _ in range(100):
        p = model.point(rng.uniform(0, 2 * np.pi))
        u = truth_solve(model, p)[0]
        w = u + rng.standard_normal(model.n_trial) * rng.choice([1e-3, 1e-1, 1.0]) * np.abs(u).max()
        rhs = dual_norm(model.gram_V, model.rhs - apply_operator(model, p, w))
        worst = max(worst, abs(u_hat_norm(model, p, u - w) - rhs) / rhs)
    checks = [("isometry", worst <= 1e-10, f"max relative gap {worst:.2e} over 100 (p, w)")]

    kappa, beta_hat = {}, {}
    for eps in (2.0 ** -2, 2.0 ** -6):
        m = model if eps == model.epsilon else assemble_truth(H, eps)
        LU = np.linalg.cholesky(m.gram_U.matrix.toarray())
        kap, bh = 0.0, np.inf
        for y in (0.0, np.pi / 4):
            p = m.point(y)
            A = m.operator(p).toarray()
            # U -> U' condition proxy: singular values of L_U^-1 A L_U^-T
            X = np.linalg.solve(LU, np.linalg.solve(LU, A.T).T)
            s = np.linalg.svd(X, compute_uv=False)
            kap = max(kap, s[0] / s[-1])
            Gh = A.T @ m.gram_V.solve(A)
            bh = min(bh, min_generalized_singular(A, m.gram_V, SpdGram(0.5 * (Gh + Gh.T))))
        kappa[eps], beta_hat[eps] = kap, bh
        cache[eps] = m
    growth = kappa[2.0 ** -6] / kappa[2.0 ** -2]
    in_range = all(0.9 <= b <= 1.0 + 1e-12 for b in beta_hat.values())
    elapsed = time.perf_counter() - t0
    checks += [
        ("renormed inf-sup", in_range,
         ", ".join(f"eps=2^{round(math.log2(e))}: {b:.12f}" for e, b in beta_hat.items())),
        ("condition growth", growth >= 4.0,
         f"kappa {kappa[2.0 ** -2]:.2f} -> {kappa[2.0 ** -6]:.2f}, {growth:.2f}x >= 4x"),
        ("runtime", elapsed <= 30.0, f"{elapsed:.1f} s <= 30 s"),
    ]
    ok, line = record(2, "isometry and renorming", checks)
    assert ok, line


def pg_oracle(model, srm, p):
    """Petrov-Galerkin solve with the explicitly projected ideal test space."""
    Phi, Psi = srm.trial.basis, srm.test.basis
    A = model.operator(p)
    S = np.column_stack([model.gram_V.solve(A @ Phi[:, j]) for j in range(srm.n)])
    T = Psi @ (Psi.T @ (model.gram_V.matrix @ S))
    return np.linalg.solve(T.T @ (A @ Phi), T.T @ model.rhs)


def test_criterion_3_saddle_petrov_galerkin():
    model = assemble_truth(1 / 4, 2.0 ** -2, test_refine=1)
    grid = angle_grid(16, model.epsilon)
    srm, _ = sga_dou_run(model, grid, 0.5, tol=0.0, n_max=4, seed_residual=False)
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for y in rng.uniform(0, 2 * np.pi, 5):
        p = model.point(y)
        c, _ = saddle_reduced_solve(srm, p)
        ref = pg_oracle(model, srm, p)
        worst = max(worst, np.abs(c - ref).max() / max(np.abs(ref).max(), 1.0))
    checks = [
        ("pair", (model.n_trial, model.n_test) == (9, 49),
         f"N_U={model.n_trial}, N_V={model.n_test}, n={srm.n}, n_V={srm.n_V}"),
        ("equivalence", worst <= 1e-9, f"max deviation {worst:.2e} over 5 parameters"),
    ]
    ok, line = record(3, "saddle / Petrov-Galerkin equivalence", checks)
    assert ok, line


def test_criterion_4_delta_proximality():
    model = assemble_truth(H, 2.0 ** -5)
    grid = angle_grid(GRID, model.epsilon)
    pairs = []
    for delta in (0.3, 0.6, 0.9):
        srm, tr = sga_dou_run(model, grid, delta, tol=0.0, n_max=6, seed_residual=False)
        for row in tr.rows:
            if row["delta_certified"] > 1e-6:  # skip pairs that are exactly ideal
                pairs.append((delta, srm.truncated(row["n"], row["n_V"])))
    pairs = pairs[:10]
    worst, certified = 0.0, True
    for delta, sub in pairs:
        beta, p, _ = worst_case_infsup(sub, grid)
        certified &= beta >= math.sqrt(1 - delta ** 2)
        worst = max(worst, abs(delta_from_infsup(beta) - projection_deficiency(sub, p)))
    checks = [
        ("pairs", len(pairs) == 10 and certified, f"{len(pairs)} certified pairs with beta < 1"),
        ("delta = deficiency", worst <= 1e-6, f"max gap {worst:.2e}"),
    ]
    ok, line = record(4, "delta-proximality and inf-sup", checks)
    assert ok, line


def test_criterion_5_double_greedy_stability(dou_sweep):
    runs, elapsed = dou_sweep
    target = math.sqrt(0.99)
    checks = []
    for eps, (srm, tr) in runs.items():
        tag = f"eps=2^{round(math.log2(eps))}"
        betas = tr.column("beta")
        ratio = max(r["n_V"] / r["n"] for r in tr.rows)
        s = np.array(tr.column("surrogate_max"))
        checks.append((f"{tag} certified", min(betas) >= target,
                       f"min beta {min(betas):.10f} over {len(betas)} steps"))
        checks.append((f"{tag} n_V/n", ratio <= 4.0,
                       f"max {ratio:.2f}, final n={srm.n}, n_V={srm.n_V}"))
        checks.append((f"{tag} monotone", bool(np.all(np.diff(s) <= 0)),
                       f"surrogate {s[0]:.3e} -> {s[-1]:.3e}"))
    s5 = np.array(runs[EPSILONS[0]][1].column("surrogate_max"))
    drop = s5[0] / s5[min(10, s5.size - 1)]
    checks.append(("100x drop at eps=2^-5", drop >= 100.0,
                   f"surrogate(n=1)/surrogate(n=11) = {drop:.1f}"))
    deltas = {eps: max(tr.column("delta_certified")) for eps, (_, tr) in runs.items()}
    checks.append(("delta independent of eps", all(d <= DELTA for d in deltas.values()),
                   "max certified delta " + ", ".join(f"{d:.1e}" for d in deltas.values())
                   + f", all <= {DELTA}"))
    checks.append(("runtime", elapsed <= 600.0, f"{elapsed:.1f} s <= 600 s"))
    ok, line = record(5, "double-greedy stability", checks)
    assert ok, line


def test_criterion_6_tight_surrogate():
    runs = run_double_greedy_sweep(validate=True)
    checks = []
    for eps, (_, tr) in runs.items():
        tag = f"eps=2^{round(math.log2(eps))}"
        lo = np.nanmin(tr.column("ratio_min"))
        hi = np.nanmax(tr.column("ratio_max"))
        g = [r["gamma_hat"] for r in tr.rows if "gamma_hat" in r]
        checks.append((f"{tag} ratio", 1 - 1e-6 <= lo and hi <= 1 + 1e-6,
                       f"[{lo:.12f}, {hi:.12f}]"))
        checks.append((f"{tag} gamma_hat", min(g) >= 1 - DELTA - 1e-3,
                       f"min {min(g):.6f} over {len(g)} selections"))
    ok, line = record(6, "tight surrogate validation", checks)
    assert ok, line


def test_criterion_7_inner_loop_bound(dou_sweep):
    runs, _ = dou_sweep
    model = assemble_truth(H, 2.0 ** -5)
    grid = angle_grid(GRID, model.epsilon)
    _, tr = sga_dou_run(model, grid, DELTA, tol=1e-4, n_max=20, mode="full")
    k_full = tr.metadata["k_star"][1:]
    certified = min(tr.column("beta")) >= math.sqrt(1 - DELTA ** 2)
    cap_ok, worst = True, -np.inf
    for _, (_, t) in runs.items():
        for r in t.rows:
            worst = max(worst, r["n_V"] - (4 * r["n"] + 8))
            cap_ok &= r["n_V"] <= 4 * r["n"] + 8
    checks = [
        ("full mode", max(k_full) <= 4 and certified,
         f"max added per trial function {max(k_full)} <= 4 over {len(k_full)} steps, certified"),
        ("greedy cap", cap_ok, f"max n_V - (4n + 8) = {worst} <= 0 across the sweep"),
    ]
    ok, line = record(7, "inner-loop termination bound", checks)
    assert ok, line


def test_criterion_8_goal_oriented(goal_run):
    model, rep = goal_run
    ell = GoalFunctional.subdomain_mean(model)
    rng = np.random.default_rng(SEED)
    worst_id, worst_q = 0.0, 0.0
    for _ in range(10):
        p = model.point(rng.uniform(0, 2 * np.pi))
        u = truth_solve(model, p)[0]
        z = dual_truth_solve(model, p, ell.ell)[0]
        ub = u + rng.standard_normal(model.n_trial) * 0.1 * np.abs(u).max()
        worst_id = max(worst_id, abs(corrected_functional(model, p, ub, z, ell) - ell(u)) / abs(ell(u)))
        zb = z + rng.standard_normal(model.n_test) * 0.1 * np.abs(z).max()
        lhs, _ = goal_error_bound_check(model, p, ub, zb, ell, u=u, z=z)
        direct = abs(bilinear_form(model, p, u - ub, z - zb))
        worst_q = max(worst_q, abs(lhs - direct) / direct)
    bound = 10 * rep.sigma_primal * rep.sigma_dual
    checks = [
        ("exact-dual identity", worst_id <= 1e-8, f"max relative gap {worst_id:.2e}"),
        ("quadratic factorization", worst_q <= 1e-10, f"max relative gap {worst_q:.2e}"),
        ("goal error bound", rep.max_err_corrected <= bound,
         f"max error {rep.max_err_corrected:.3e} <= 10 x {rep.sigma_primal:.3e} x "
         f"{rep.sigma_dual:.3e} = {bound:.3e}"),
        ("corrected beats uncorrected", rep.fraction_improved >= 0.9,
         f"{rep.fraction_improved:.1%} of {len(rep.trace)} validation angles, need 90%; "
         f"dual error {rep.sigma_dual:.3f} vs primal {rep.sigma_primal:.3f}"),
    ]
    ok, line = record(8, "goal-oriented suite", checks)
    assert ok, line


def test_criterion_9_determinism(wg_suite, dou_sweep, goal_run):
    (traces, _), _ = wg_suite
    runs, _ = dou_sweep
    _, rep = goal_run
    traces2, _ = run_weak_greedy_suite()
    runs2 = run_double_greedy_sweep()
    _, rep2 = run_goal_pipeline()
    same_wg = all(traces[k].to_csv_text() == traces2[k].to_csv_text() for k in traces)
    same_dou = all(runs[e][1].to_csv_text() == runs2[e][1].to_csv_text() for e in runs)
    same_goal = rep.trace.to_csv_text() == rep2.trace.to_csv_text()
    checks = [
        ("criterion 1 traces", same_wg, f"{len(traces)} CSVs byte-identical"),
        ("criterion 5 traces", same_dou, f"{len(runs)} CSVs byte-identical"),
        ("criterion 8 trace", same_goal, "goal CSV byte-identical"),
    ]
    ok, line = record(9, "determinism", checks)
    assert ok, line


if __name__ == "__main__":  # pragma: no cover
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
