"""Ulam discretization, invariant densities, cone checks, correlations."""

import csv

import numpy as np
import pytest
import scipy.sparse as sp

from steinclt.dynamics import LsvFamily, LsvMap, OBSERVABLES, PiecewiseLinearMap, SequentialSequence
from steinclt.transfer import (
    ConeReport,
    ConvergenceError,
    DensityVector,
    UlamOperator,
    build_ulam,
    cone_check,
    correlation_estimate,
    invariant_density,
    variation_diagnostic,
)


def test_ulam_doubling_grid4_exact():
    op = build_ulam(LsvMap(0.0), 4)
    want = np.array(
        [
            [0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.5],
            [0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.5],
        ]
    )
    np.testing.assert_allclose(op.matrix.toarray(), want, atol=1e-14)


def test_ulam_rows_stochastic_lsv():
    for alpha in (0.1, 0.25, 1.0):
        op = build_ulam(LsvMap(alpha), 257)
        rowsum = np.asarray(op.matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(rowsum, 1.0, atol=1e-12)


def test_ulam_operator_rejects_bad_rows():
    with pytest.raises(ValueError):
        UlamOperator(2, sp.csr_matrix(np.array([[0.5, 0.4], [0.0, 1.0]])))


def test_push_masses_conserves_mass():
    op = build_ulam(LsvMap(0.25), 64)
    rng = np.random.default_rng(0)
    masses = rng.random(64)
    masses /= masses.sum()
    out = op.push_masses(masses)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert out.min() >= -1e-15


def test_doubling_invariant_density_is_uniform():
    dens = invariant_density(build_ulam(LsvMap(0.0), 512))
    np.testing.assert_allclose(dens.values, 1.0, atol=1e-10)
    assert dens.mass == pytest.approx(1.0, abs=1e-12)


def test_invariant_density_convergence_error():
    with pytest.raises(ConvergenceError):
        invariant_density(build_ulam(LsvMap(0.25), 128), max_iter=1)


def test_cone_check_lsv_quarter():
    dens = invariant_density(build_ulam(LsvMap(0.25), 512))
    report = cone_check(dens, 0.25)
    assert isinstance(report, ConeReport)
    assert report.tol == pytest.approx(1.0 / 512)
    assert report.decreasing_margin > 0.0
    assert report.power_increasing_margin > 0.0
    assert report.pointwise_bound_margin > 1.0
    assert report.passed


def test_cone_check_rejects_increasing_density():
    grid = 8
    x = (np.arange(grid) + 0.5) / grid
    vals = np.exp(3.0 * x)
    dens = DensityVector(grid, vals / vals.mean())
    report = cone_check(dens, 0.25)
    assert not report.decreasing_ok
    assert not report.passed


def test_density_vector_round_trips():
    dens = DensityVector.from_masses(np.array([0.2, 0.3, 0.5]))
    np.testing.assert_allclose(dens.masses, [0.2, 0.3, 0.5], atol=1e-15)
    assert dens.mass == pytest.approx(1.0)
    scaled = DensityVector(3, dens.values * 4.0)
    np.testing.assert_allclose(scaled.normalized().values, dens.values, atol=1e-15)
    with pytest.raises(ValueError):
        DensityVector(3, np.array([1.0, -0.5, 2.5]))


def test_density_sampling_seeded_and_in_range():
    dens = invariant_density(build_ulam(LsvMap(0.25), 128))
    rng = np.random.default_rng(21)
    draws = dens.sample(rng, 20_000)
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    again = dens.sample(np.random.default_rng(21), 20_000)
    np.testing.assert_array_equal(draws, again)
    # intermittent densities pile mass near the neutral fixed point
    assert draws.mean() < 0.5


def test_density_to_csv_round_trip(tmp_path):
    dens = DensityVector(4, np.array([0.5, 1.5, 1.25, 0.75]))
    path = tmp_path / "dens.csv"
    dens.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["midpoint", "value"]
    got = np.array([[float(a), float(b)] for a, b in rows[1:]])
    np.testing.assert_array_equal(got[:, 0], dens.midpoints)
    np.testing.assert_array_equal(got[:, 1], dens.values)


def test_correlation_estimate_doubling_lag_one():
    seq = SequentialSequence(LsvFamily(), tuple(np.zeros(10)), beta_star=0.25)
    f = OBSERVABLES["identity"]()
    value, stderr = correlation_estimate(seq, f, f, 0, 1, None, 200_000, 9)
    # Cov(x, 2x mod 1) under Lebesgue is 1/24
    assert abs(value - 1.0 / 24.0) <= 3.0 * stderr
    assert 0.0 < stderr < 1e-3


def test_correlation_estimate_validation():
    seq = SequentialSequence(LsvFamily(), tuple(np.zeros(4)), beta_star=0.25)
    f = OBSERVABLES["identity"]()
    pair = OBSERVABLES["poly_pair"]()
    with pytest.raises(ValueError):
        correlation_estimate(seq, pair, f, 0, 1, None, 5000, 1)
    with pytest.raises(ValueError):
        correlation_estimate(seq, f, f, 0, 1, None, 10, 1)
    with pytest.raises(IndexError):
        correlation_estimate(seq, f, f, -1, 1, None, 5000, 1)


def test_variation_diagnostic_constant_slope_is_zero():
    m = PiecewiseLinearMap((2.0,))
    assert variation_diagnostic([m]) == 0.0
    assert variation_diagnostic([m, m, m]) == 0.0


def test_variation_diagnostic_two_slopes():
    m = PiecewiseLinearMap((2.0, 4.0), (0.5,))
    # 1/|T'| steps 0.5 -> 0.25 at x = 0.5 and is flat elsewhere
    assert variation_diagnostic([m]) == pytest.approx(0.25, abs=1e-14)
    # composing with the doubling map doubles every slope: jump is 1/4 - 1/8
    assert variation_diagnostic([m, PiecewiseLinearMap((2.0,))]) == pytest.approx(0.125, abs=1e-14)


def test_variation_diagnostic_rejects_curved_maps():
    with pytest.raises(TypeError):
        variation_diagnostic([LsvMap(0.25)])
