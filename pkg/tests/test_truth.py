import dataclasses
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbsample.kernel import SpdGram, dual_norm, min_generalized_singular
from rbsample.truth import (
    ParameterPoint,
    UniformMesh,
    angle_grid,
    apply_operator,
    assemble_p1,
    assemble_truth,
    dual_truth_solve,
    export_matrices,
    prolongation,
    subdomain_mean_functional,
    theta_eval,
    truth_solve,
    u_hat_norm,
)


def test_theta_examples():
    np.testing.assert_allclose(theta_eval(ParameterPoint(0.0, 1.0)), [1, 1, 0, 1])
    np.testing.assert_allclose(theta_eval(ParameterPoint(math.pi / 2, 2.0 ** -5)),
                               [2.0 ** -5, 0, 1, 1], atol=1e-15)
    np.testing.assert_allclose(theta_eval(ParameterPoint(math.pi, 1.0)), [1, -1, 0, 1], atol=1e-15)


def test_parameter_point_normalization():
    assert ParameterPoint(2 * math.pi + 0.5, 1.0).y == pytest.approx(0.5)
    assert 0 <= ParameterPoint(-0.25, 1.0).y < 2 * math.pi
    with pytest.raises(ValueError):
        ParameterPoint(0.0, 0.0)
    with pytest.raises(ValueError):
        ParameterPoint(0.0, 1.5)


def test_angle_grid():
    g = angle_grid(4, 0.5, offset=0.5)
    np.testing.assert_allclose([p.y for p in g], np.pi / 4 + np.arange(4) * np.pi / 2)


def test_dimensions(rect_model):
    assert (rect_model.n_trial, rect_model.n_test) == (9, 49)
    assert rect_model.n_affine == 4
    m = assemble_truth(1 / 4, 1.0)
    assert (m.n_trial, m.n_test) == (9, 9)


@pytest.mark.parametrize("h", [1 / 3, 0.3, 0.0, -1.0])
def test_degenerate_mesh_rejected(h):
    with pytest.raises(ValueError):
        assemble_truth(h, 1.0)


def test_epsilon_range():
    with pytest.raises(ValueError):
        assemble_truth(1 / 4, 0.0)


def test_mass_partition_of_unity():
    for mesh in (UniformMesh(4), UniformMesh(7)):
        M = assemble_p1(mesh)[3]
        one = np.ones(mesh.n_nodes)
        assert one @ (M @ one) == pytest.approx(1.0, abs=1e-14)


def test_convection_block_against_quadrature():
    mesh = UniformMesh(6)
    K, Cx, Cy, M = assemble_p1(mesh)
    x, y = mesh.points.T
    # d/dx of the interpolant of x is exactly one, so (Cx x)_i = int phi_i
    np.testing.assert_allclose((Cx @ x)[mesh.interior], (M @ np.ones(mesh.n_nodes))[mesh.interior],
                               atol=1e-15)
    np.testing.assert_allclose((Cy @ y)[mesh.interior], (M @ np.ones(mesh.n_nodes))[mesh.interior],
                               atol=1e-15)
    # stiffness annihilates constants and (grad x, grad x) = 1
    assert np.abs(K @ np.ones(mesh.n_nodes)).max() < 1e-13
    assert x @ (K @ x) == pytest.approx(1.0)


def test_prolongation_reproduces_linears():
    c, f = UniformMesh(3), UniformMesh(6)
    P = prolongation(c, f)
    lin = lambda pts: 1.0 + 2.0 * pts[:, 0] - 3.0 * pts[:, 1]
    np.testing.assert_allclose(P @ lin(c.points), lin(f.points), atol=1e-14)


def test_gram_V_definition(small_model):
    m = small_model
    K, _, _, M = assemble_p1(m.mesh_test)
    jf = m.mesh_test.interior
    G = (m.epsilon * K + M)[jf][:, jf].toarray()
    np.testing.assert_allclose(m.gram_V.matrix.toarray(), G, atol=1e-15)
    # the test norm depends on epsilon only, not on the angle
    again = assemble_truth(m.h, m.epsilon)
    assert (again.gram_V.matrix != m.gram_V.matrix).nnz == 0


def test_apply_operator(small_model):
    m = small_model
    rng = np.random.default_rng(0)
    u = rng.standard_normal(m.n_trial)
    assert not np.any(apply_operator(m, m.point(0.3), np.zeros(m.n_trial)))
    fm = m.frozen([1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(apply_operator(fm, m.point(0.3), u), m.affine_ops[0] @ u)
    p = m.point(1.1)
    dense = sum(t * A.toarray() for t, A in zip(theta_eval(p), m.affine_ops)) @ u
    ref = apply_operator(m, p, u)
    assert np.linalg.norm(ref - dense) <= 1e-13 * np.linalg.norm(dense)
    with pytest.raises(ValueError):
        apply_operator(m, p, np.zeros(m.n_trial + 1))


def test_u_hat_norm_basic(small_model):
    m = small_model
    p = m.point(2.0)
    u = np.random.default_rng(1).standard_normal(m.n_trial)
    assert u_hat_norm(m, p, np.zeros(m.n_trial)) == 0.0
    assert u_hat_norm(m, p, 2 * u) == pytest.approx(2 * u_hat_norm(m, p, u), rel=1e-12)


def test_error_residual_isometry(small_model):
    m = small_model
    rng = np.random.default_rng(5)
    for p in [m.point(y) for y in rng.uniform(0, 2 * np.pi, 5)]:
        u, _ = truth_solve(m, p)
        for _ in range(20):
            w = rng.standard_normal(m.n_trial) * rng.uniform(0, 0.1)
            rhs = dual_norm(m.gram_V, m.rhs - apply_operator(m, p, w))
            assert abs(u_hat_norm(m, p, u - w) - rhs) <= 1e-10 * rhs


def test_rect_pythagoras(rect_model):
    # with a larger test space the residual splits orthogonally into the
    # renormed error and the truth residual lift
    m = rect_model
    rng = np.random.default_rng(6)
    for y in rng.uniform(0, 2 * np.pi, 5):
        p = m.point(y)
        u, r = truth_solve(m, p)
        rr = r @ (m.gram_V.matrix @ r)
        for _ in range(5):
            w = rng.standard_normal(m.n_trial) * 0.1
            lhs = dual_norm(m.gram_V, m.rhs - apply_operator(m, p, w)) ** 2
            assert lhs == pytest.approx(u_hat_norm(m, p, u - w) ** 2 + rr, rel=1e-10)


def test_truth_solve_mass_problem(small_model):
    m = small_model
    ones = np.ones(m.n_trial)
    fm = dataclasses.replace(m.frozen([0.0, 0.0, 0.0, 1.0]), rhs=m.affine_ops[3] @ ones)
    u, r = truth_solve(fm, m.point(0.0))
    np.testing.assert_allclose(u, ones, atol=1e-10)
    assert math.sqrt(max(r @ (m.gram_V.matrix @ r), 0.0)) <= 1e-9


@pytest.mark.parametrize("fixture", ["small_model", "rect_model"])
def test_truth_solve_orthogonality(fixture, request):
    m = request.getfixturevalue(fixture)
    for y in (0.0, 1.0, 4.0):
        p = m.point(y)
        u, r = truth_solve(m, p)
        assert np.abs(m.operator(p).T @ r).max() <= 1e-9 * np.abs(m.rhs).max()
        u2, r2 = truth_solve(m, p)
        assert np.array_equal(u, u2) and np.array_equal(r, r2)
        # the lifted residual is R_V(f - B u)
        np.testing.assert_allclose(m.gram_V.matrix @ r, m.rhs - apply_operator(m, p, u),
                                   atol=1e-12 * np.abs(m.rhs).max())


def test_rect_residual_nonzero(rect_model):
    # the refined test space is larger, so the truth residual does not vanish
    _, r = truth_solve(rect_model, rect_model.point(0.7))
    assert np.linalg.norm(r) > 0


@pytest.mark.parametrize("fixture", ["small_model", "rect_model"])
def test_dual_truth_solve(fixture, request):
    m = request.getfixturevalue(fixture)
    ell = subdomain_mean_functional(m)
    z0, _ = dual_truth_solve(m, m.point(1.0), np.zeros(m.n_trial))
    assert not np.any(z0)
    for y in (0.0, 2.5):
        p = m.point(y)
        z, _ = dual_truth_solve(m, p, ell)
        assert np.abs(m.operator(p).T @ z + ell).max() <= 1e-9 * np.abs(ell).max()


def test_dual_symmetry_oracle(small_model):
    m = small_model
    ell = subdomain_mean_functional(m)
    fm = m.frozen([1.0, 0.0, 0.0, 0.0])
    p = m.point(0.0)
    z, _ = dual_truth_solve(fm, p, ell)
    primal, _ = truth_solve(dataclasses.replace(fm, rhs=-ell), p)
    np.testing.assert_allclose(z, primal, atol=1e-10 * np.abs(z).max())


def test_subdomain_mean():
    m = assemble_truth(1 / 10, 1.0, check_infsup=False)
    ell = subdomain_mean_functional(m)
    assert ell @ np.ones(m.n_trial) == pytest.approx(1.0)
    x = m.mesh_trial.points[m.mesh_trial.interior, 0]
    assert ell @ x == pytest.approx(0.8)


def test_truth_infsup_recorded(small_model):
    assert 1e-3 <= small_model.truth_infsup <= 1.0
    # in the renormed trial metric the truth pair has inf-sup one
    p = small_model.point(0.4)
    A = small_model.operator(p).toarray()
    Gh = A.T @ small_model.gram_V.solve(A)
    beta = min_generalized_singular(A, small_model.gram_V, SpdGram(0.5 * (Gh + Gh.T)))
    assert beta == pytest.approx(1.0, abs=1e-8)


def test_export(tmp_path, rect_model):
    paths = export_matrices(rect_model, tmp_path)
    assert sorted(os.path.basename(p) for p in paths) == sorted(
        ["A1.mtx", "A2.mtx", "A3.mtx", "A4.mtx", "gram_U.mtx", "gram_V.mtx", "rhs.mtx"])
    head = (tmp_path / "A1.mtx").read_text().splitlines()
    role, name, rows, cols, nnz = head[0][2:].split()
    assert (role, name, int(rows), int(cols)) == ("operator", "A1", 49, 9)
    assert len(head) - 1 == int(nnz) == rect_model.affine_ops[0].nnz


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2 * np.pi, exclude_max=True), st.integers(0, 2 ** 32 - 1))
def test_isometry_property(y, seed):
    m = _cached()
    p = m.point(y)
    u, _ = truth_solve(m, p)
    w = np.random.default_rng(seed).standard_normal(m.n_trial)
    rhs = dual_norm(m.gram_V, m.rhs - apply_operator(m, p, w))
    assert abs(u_hat_norm(m, p, u - w) - rhs) <= 1e-10 * rhs


_CACHE = {}


def _cached():
    if "m" not in _CACHE:
        _CACHE["m"] = assemble_truth(1 / 6, 0.1)
    return _CACHE["m"]
