"""Test functions, Stein solutions, derivative bounds, mollifiers."""

import math

import numpy as np
import pytest

from steinclt.stein import (
    AffineTestFunction,
    GaussFactor,
    LipschitzFunction,
    MollifierSmoother,
    QuadraticTestFunction,
    SeparableTestFunction,
    SinFactor,
    SteinSolution,
    TanhFactor,
    builtin_test_functions,
    derivative_bound_check,
    g_h_evaluate,
    g_h_norm_probe,
    index_tuples,
    lipschitz_family_1d,
    mollify,
    smooth_metric_family,
    solve_stein_at,
    stein_residual,
    univariate_bound_check,
    univariate_solution,
)

SIGMA2 = np.array([[1.2, 0.3], [0.3, 0.9]])


def _mixed_separable():
    return SeparableTestFunction(
        (TanhFactor(0.6, 0.2), GaussFactor(1.1, -0.4), SinFactor(0.8, 0.3)), 0.9, "mixed"
    )


def test_index_tuples():
    assert index_tuples(2, 2) == [(0, 0), (0, 1), (1, 1)]
    assert index_tuples(3, 1) == [(0,), (1,), (2,)]
    assert index_tuples(2, 0) == [()]


def test_affine_solution_closed_form():
    v = (0.7, -0.3)
    h = AffineTestFunction(v, 0.5)
    sol = SteinSolution(h, SIGMA2)
    rng = np.random.default_rng(1)
    w = rng.normal(size=(40, 2))
    assert sol.phi_h == pytest.approx(0.5, abs=1e-13)
    np.testing.assert_allclose(sol.value(w), -(w @ np.asarray(v)), atol=1e-12)
    np.testing.assert_allclose(sol.gradient(w), np.broadcast_to(np.negative(v), (40, 2)), atol=1e-12)
    np.testing.assert_allclose(sol.hessian(w), 0.0, atol=1e-12)
    np.testing.assert_allclose(stein_residual(sol, w), 0.0, atol=1e-12)


def test_quadratic_solution_closed_form():
    q = np.array([[1.5, 0.25], [0.25, 1.0]])
    v = np.array([0.5, -0.2])
    h = QuadraticTestFunction(tuple(map(tuple, q)), tuple(v), -0.25)
    sol = SteinSolution(h, SIGMA2)
    rng = np.random.default_rng(2)
    w = rng.normal(size=(40, 2))
    assert sol.phi_h == pytest.approx(0.5 * np.trace(q @ SIGMA2) - 0.25, abs=1e-12)
    want_value = -(0.25 * (np.einsum("ba,ab->b", w @ q, w.T) - np.trace(q @ SIGMA2)) + w @ v)
    np.testing.assert_allclose(sol.value(w), want_value, atol=1e-11)
    np.testing.assert_allclose(sol.gradient(w), -0.5 * (w @ q) - v, atol=1e-11)
    np.testing.assert_allclose(sol.hessian(w), np.broadcast_to(-0.5 * q, (40, 2, 2)), atol=1e-12)
    np.testing.assert_allclose(stein_residual(sol, w), 0.0, atol=1e-10)


def test_separable_fields_fusion_matches_single_calls():
    h = _mixed_separable()
    rng = np.random.default_rng(3)
    w = rng.normal(size=(25, 3))
    fused = h.fields(w, ("value", "gradient", "hessian"))
    np.testing.assert_array_equal(fused["value"], h.value(w))
    np.testing.assert_array_equal(fused["gradient"], h.gradient(w))
    np.testing.assert_array_equal(fused["hessian"], h.hessian(w))
    only_grad = h.fields(w, ("gradient",))
    assert set(only_grad) == {"gradient"}


def test_base_fields_dispatch():
    h = AffineTestFunction((0.4, 0.1))
    w = np.zeros((4, 2))
    fused = h.fields(w, ("value", "hessian"))
    np.testing.assert_array_equal(fused["value"], h.value(w))
    np.testing.assert_array_equal(fused["hessian"], h.hessian(w))


def test_separable_derivatives_match_finite_differences():
    h = _mixed_separable()
    rng = np.random.default_rng(4)
    w = rng.normal(size=(12, 3)) * 0.8
    eps = 1e-5
    grad = h.gradient(w)
    hess = h.hessian(w)
    third = h.third(w)
    for a in range(3):
        shift = np.zeros(3)
        shift[a] = eps
        fd_g = (h.value(w + shift) - h.value(w - shift)) / (2 * eps)
        np.testing.assert_allclose(grad[:, a], fd_g, atol=5e-9)
        fd_h = (h.gradient(w + shift) - h.gradient(w - shift)) / (2 * eps)
        np.testing.assert_allclose(hess[:, :, a], fd_h, atol=5e-8)
        fd_t = (h.hessian(w + shift) - h.hessian(w - shift)) / (2 * eps)
        np.testing.assert_allclose(third[:, :, :, a], fd_t, atol=5e-7)


def test_partial_sups_dominate_grid_maxima():
    h = _mixed_separable()
    rng = np.random.default_rng(5)
    w = rng.normal(size=(4000, 3)) * 2.0
    grad = np.abs(h.gradient(w)).max(axis=0)
    hess = np.abs(h.hessian(w)).max(axis=0)
    for a in range(3):
        assert grad[a] <= h.partial_sup((a,)) + 1e-12
        for b in range(3):
            assert hess[a, b] <= h.partial_sup(tuple(sorted((a, b)))) + 1e-12
    with pytest.raises(ValueError):
        h.partial_sup((0, 0, 0, 0))


def test_quadratic_partial_sups():
    q = ((1.5, 0.25), (0.25, 1.0))
    h = QuadraticTestFunction(q, (0.5, -0.2))
    assert h.partial_sup((0,)) is None
    assert h.partial_sup((0, 1)) == pytest.approx(0.25)
    assert h.partial_sup((0, 0, 1)) == 0.0
    assert h.derivative_sup(1) is None
    assert h.derivative_sup(2) == pytest.approx(1.5)


def test_stein_residual_small_for_smooth_battery():
    w = np.stack(
        np.meshgrid(np.linspace(-3, 3, 9), np.linspace(-3, 3, 9), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    for h in builtin_test_functions(2):
        sol = SteinSolution(h, SIGMA2, gh_order=20, u_order=32)
        worst = float(stein_residual(sol, w).max())
        assert worst < 1e-4, f"{h.name}: residual {worst:.2e}"


def test_solve_stein_at_matches_evaluate():
    h = builtin_test_functions(2)[2]
    sol = SteinSolution(h, SIGMA2)
    w = np.array([0.3, -1.1])
    a, g, hh = solve_stein_at(sol, w)
    assert np.shape(a) == ()
    assert g.shape == (2,)
    assert hh.shape == (2, 2)
    np.testing.assert_array_equal(g, sol.gradient(w))


def test_stein_solution_validation():
    h = AffineTestFunction((1.0, 0.0))
    with pytest.raises(ValueError):
        SteinSolution(h, np.eye(3))
    with pytest.raises(ValueError):
        SteinSolution(h, np.array([[1.0, 0.0], [0.0, -0.5]]))
    with pytest.raises(ValueError):
        SteinSolution(h, np.array([[1.0, 0.4], [0.1, 1.0]]))


def test_derivative_bound_check_quadratic_margins():
    q = ((1.5, 0.25), (0.25, 1.0))
    h = QuadraticTestFunction(q, (0.5, -0.2))
    sol = SteinSolution(h, SIGMA2)
    grid = np.stack(
        np.meshgrid(np.linspace(-2, 2, 7), np.linspace(-2, 2, 7), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    report = derivative_bound_check(sol, grid, orders=(1, 2))
    # unbounded first partials are recorded as vacuously satisfied
    assert report.margins[(1, (0,))] == math.inf
    # D^2 A = -Q/2 exactly, so the order-2 margins sit at zero
    assert abs(report.margins[(2, (0, 1))]) < 1e-10
    assert report.passed(1e-6)
    assert report.grid_size == grid.shape[0]
    with pytest.raises(ValueError):
        derivative_bound_check(sol, np.zeros((5, 3)))


def test_derivative_bound_check_third_order():
    h = builtin_test_functions(1)[2]
    sol = SteinSolution(h, np.array([[1.0]]), gh_order=48, u_order=32)
    grid = np.linspace(-3, 3, 21)[:, None]
    report = derivative_bound_check(sol, grid, orders=(1, 2, 3))
    orders = sorted({k[0] for k in report.margins})
    assert orders == [1, 2, 3]
    assert report.passed(1e-6)


def test_univariate_identity_solution():
    grid = np.linspace(-6.0, 6.0, 101)
    a, a1, phi = univariate_solution(lambda w: w, grid)
    assert phi == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(a, -1.0, atol=1e-10)
    np.testing.assert_allclose(a1, 0.0, atol=1e-9)


def test_univariate_bound_check_family():
    grid = np.linspace(-8.0, 8.0, 321)
    fam = lipschitz_family_1d()
    assert [f.name for f in fam] == [
        "linear",
        "tanh",
        "tanh_half",
        "tanh_double",
        "sine",
        "sine_double",
        "erf_unit",
        "logcosh",
        "logcosh_double",
        "soft_id",
    ]
    for f in fam:
        report = univariate_bound_check(f, grid)
        assert report.passed(1e-6), f"{f.name}: worst margin {report.worst_margin:.3e}"
        assert report.name == f.name


def test_univariate_bound_check_rejects_steep_functions():
    steep = LipschitzFunction("steep", lambda w: 2.0 * w, 2.0)
    with pytest.raises(ValueError):
        univariate_bound_check(steep, np.linspace(-1, 1, 11))


def test_builtin_battery_contents():
    fns = builtin_test_functions(3)
    assert [h.name for h in fns] == [
        "affine",
        "quadratic",
        "tanh_prod",
        "tanh_asym",
        "gauss_bump",
        "gauss_wide",
    ]
    assert all(h.dimension == 3 for h in fns)
    with pytest.raises(ValueError):
        builtin_test_functions(0)


def test_smooth_metric_family_normalization():
    for dim in (1, 2):
        fam = smooth_metric_family(dim)
        assert len(fam) == 8
        for h in fam:
            assert h.derivative_sup(3) == pytest.approx(1.0, abs=1e-12)


def test_g_h_vanishes_for_constant_hessian():
    h = QuadraticTestFunction(((1.0, 0.2), (0.2, 0.8)), (0.1, 0.3))
    b = np.array([[1.3, 0.0], [0.2, 0.9]])
    rng = np.random.default_rng(6)
    x = rng.normal(size=(10, 2))
    y = rng.normal(size=(10, 2))
    g = g_h_evaluate(h, b, 0.7, 0.5, np.zeros(2), x, y)
    np.testing.assert_allclose(g, 0.0, atol=1e-14)
    sup_g, sup_grad = g_h_norm_probe(h, b, 0.7, 0.5, np.zeros(2), x, y)
    assert sup_g == pytest.approx(0.0, abs=1e-14)
    assert sup_grad == pytest.approx(0.0, abs=1e-14)


def test_g_h_matches_direct_hessian_difference():
    h = SeparableTestFunction((TanhFactor(0.9), TanhFactor(0.5, 0.3)), 1.0, "pair")
    b = np.array([[1.1, 0.3], [0.0, 0.8]])
    binv = np.linalg.inv(b)
    s, t = 0.6, 0.4
    z = np.array([0.2, -0.1])
    x = np.array([[0.5, -0.7]])
    y = np.array([[1.2, 0.4]])
    got = g_h_evaluate(h, b, s, t, z, x, y)
    h1 = h.hessian(s * (x + t * y) @ binv.T + z)
    h0 = h.hessian(s * x @ binv.T + z)
    want = binv @ (h1 - h0)[0] @ binv
    np.testing.assert_allclose(got[0], want, atol=1e-13)
    with pytest.raises(ValueError):
        g_h_evaluate(h, np.array([[1.0, 1.0], [1.0, 1.0]]), s, t, z, x, y)


def test_g_h_norm_probe_positive_for_bumpy_h():
    h = SeparableTestFunction((GaussFactor(1.0), GaussFactor(1.0)), 1.0, "bump")
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 2))
    y = rng.normal(size=(20, 2))
    sup_g, sup_grad = g_h_norm_probe(h, np.eye(2), 0.8, 0.3, np.zeros(2), x, y)
    assert 0.0 < sup_g < 10.0
    assert 0.0 < sup_grad < 10.0


def test_mollifier_mass_and_support():
    for dim in (1, 2):
        sm = MollifierSmoother(dim, 0.25)
        assert abs(sm.kernel_mass_check() - 1.0) < 1e-8
        assert sm.normalization_lower_bound_ok()
        inside = np.zeros(dim)
        outside = np.full(dim, 1.5)
        assert sm.eta(inside) > 0.0
        assert sm.eta(outside) == 0.0
        edge = np.zeros(dim)
        edge[0] = 1.0
        assert sm.eta(edge) == 0.0


def test_mollifier_validation():
    with pytest.raises(ValueError):
        MollifierSmoother(1, 0.0)
    with pytest.raises(ValueError):
        MollifierSmoother(0, 0.1)
    with pytest.raises(ValueError):
        MollifierSmoother(1, 0.1).eta(np.zeros((3, 2)))


def test_mollifier_reproduces_constants_and_linear():
    sm = MollifierSmoother(1, 0.3)
    const = sm.smooth(lambda p: np.full(p.shape[:-1], 2.5))
    pts = np.array([[0.4, -1.2], [0.0, 0.0], [2.0, 1.0]])
    np.testing.assert_allclose(const(pts), 2.5, atol=1e-14)
    lin = sm.smooth(lambda p: 3.0 * p[..., 0] - 2.0 * p[..., 1] + 0.5)
    want = 3.0 * pts[:, 0] - 2.0 * pts[:, 1] + 0.5
    np.testing.assert_allclose(lin(pts), want, atol=1e-12)


def test_mollify_error_shrinks_with_epsilon():
    def g(p):
        return np.abs(p[..., 0]) + 0.5 * np.abs(p[..., 1])

    probes = np.array([[0.3, -0.2], [1.0, 0.7], [-0.6, 0.1]])
    _, err_wide = mollify(g, 0.5, dim=1, probes=probes)
    _, err_narrow = mollify(g, 0.125, dim=1, probes=probes)
    assert err_narrow < err_wide
    assert err_wide <= 0.5 * 1.5 + 1e-12
    smoothed, err = mollify(g, 0.25, dim=1)
    assert err is None
    assert np.isfinite(smoothed(np.array([0.1, 0.2])))
