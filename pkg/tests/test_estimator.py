import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import least_squares

from biphoton.core import CalibrationConfig, CorrelationMap, MapKind, Plane
from biphoton.estimator import (
    FitError,
    FitRegion,
    GaussianFit,
    MaskedCells,
    circular_mask,
    compare_control,
    epr_witness,
    fit_gaussian2d,
    gaussian2d,
    initial_guess,
    peak_statistics,
    witness_from_widths,
)

from oracles import lattice_points_in_disk, sampled_gaussian

CAL = CalibrationConfig()


def _map(values, kind=MapKind.AUTOCORRELATION):
    return CorrelationMap(values, kind, Plane.IMAGE)


def _cells(values, diameter=40, exclude_center=False):
    return circular_mask(_map(values), FitRegion(diameter, exclude_center))


def test_mask_single_cell():
    m = _map(np.arange(25.0).reshape(5, 5))
    cells = circular_mask(m, FitRegion(1, exclude_center=False))
    assert len(cells) == 1 and cells.values[0] == 12.0
    assert len(circular_mask(m, FitRegion(1, exclude_center=True))) == 0


@pytest.mark.parametrize("diameter", [5, 13, 80])
def test_mask_matches_lattice_enumeration(diameter):
    m = _map(np.zeros((127, 127)))
    assert len(circular_mask(m, FitRegion(diameter, False))) == lattice_points_in_disk(diameter / 2)
    assert len(circular_mask(m, FitRegion(diameter, True))) == lattice_points_in_disk(diameter / 2) - 1


def test_mask_too_large_rejected():
    with pytest.raises(ValueError):
        circular_mask(_map(np.zeros((41, 41))), FitRegion(80))


def test_fit_region_defaults_follow_map_kind():
    assert FitRegion.for_kind(MapKind.AUTOCORRELATION).exclude_center
    assert not FitRegion.for_kind(MapKind.AUTOCONVOLUTION).exclude_center
    assert FitRegion().diameter == 80


def test_fit_needs_enough_cells():
    cells = MaskedCells(np.zeros(6), np.zeros(6), np.arange(6.0))
    with pytest.raises(ValueError):
        fit_gaussian2d(cells)


def test_fit_flat_map():
    fit = fit_gaussian2d(_cells(np.full((41, 41), 7.0)))
    assert not fit.converged
    assert fit.amplitude == 0.0 and fit.offset == 7.0


@pytest.mark.parametrize("exclude_center", [False, True])
def test_noiseless_recovery_reference(exclude_center):
    truth = (100.0, 0.0, 0.0, 1.79, 1.79, 0.0)
    values = sampled_gaussian(81, *truth)
    fit = fit_gaussian2d(_cells(values, 80, exclude_center))
    assert fit.converged
    np.testing.assert_allclose(fit.params[[0, 3, 4]], [100.0, 1.79, 1.79], rtol=1e-6)
    np.testing.assert_allclose(fit.params[[1, 2, 5]], 0.0, atol=1e-6 * 100)


def test_argmax_ties_break_row_major():
    values = np.zeros((9, 9))
    values[2, 6] = values[6, 2] = 5.0
    guess = initial_guess(_cells(values, 9))
    # row 2 precedes row 6
    assert (guess[1], guess[2]) == (2.0, -2.0)


def _noisy_map(seed, n=61):
    rng = np.random.default_rng(seed)
    return sampled_gaussian(n, 40.0, 0.4, -0.7, 2.3, 3.1, 5.0) + rng.normal(0, 1.0, (n, n))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_scipy_least_squares(seed):
    cells = _cells(_noisy_map(seed), 50, True)
    fit = fit_gaussian2d(cells)
    ref = least_squares(
        lambda p: gaussian2d(p, cells.dx, cells.dy) - cells.values,
        initial_guess(cells),
        method="lm",
        xtol=1e-14,
        ftol=1e-14,
    )
    np.testing.assert_allclose(np.abs(fit.params), np.abs(ref.x), rtol=1e-5, atol=1e-7)
    assert fit.residual_ssd == pytest.approx(2 * ref.cost, rel=1e-9)


def test_converged_fit_is_local_minimum():
    cells = _cells(sampled_gaussian(41, 10.0, 0.3, 0.2, 2.0, 1.5, 1.0), 40, True)
    fit = fit_gaussian2d(cells)
    base = np.sum((cells.values - gaussian2d(fit.params, cells.dx, cells.dy)) ** 2)
    for i in range(6):
        for sign in (-1, 1):
            p = fit.params.copy()
            p[i] += sign * 0.01 * (abs(p[i]) if p[i] else 1.0)
            assert np.sum((cells.values - gaussian2d(p, cells.dx, cells.dy)) ** 2) >= base


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 1e4))
def test_scale_equivariance(k):
    values = _noisy_map(3, 41)
    a = fit_gaussian2d(_cells(values, 40, True))
    b = fit_gaussian2d(_cells(k * values, 40, True))
    assert b.amplitude == pytest.approx(k * a.amplitude, rel=1e-6)
    assert b.offset == pytest.approx(k * a.offset, rel=1e-6)
    np.testing.assert_allclose(b.params[1:5], a.params[1:5], rtol=1e-6, atol=1e-8)


def test_translation_equivariance():
    a = fit_gaussian2d(_cells(sampled_gaussian(41, 10.0, 0.25, 0.1, 2.0, 2.5, 0.5), 40))
    b = fit_gaussian2d(_cells(sampled_gaussian(41, 10.0, 1.25, 0.1, 2.0, 2.5, 0.5), 40))
    assert b.center_x - a.center_x == pytest.approx(1.0, abs=1e-6)
    assert b.center_y == pytest.approx(a.center_y, abs=1e-6)


def test_peak_statistics():
    unit = GaussianFit(1.0, 0, 0, 1.0, 1.0, 0.0)
    assert peak_statistics(unit).volume == pytest.approx(2 * math.pi)
    assert peak_statistics(unit).fwhm_x == pytest.approx(2.3548, abs=1e-4)
    assert peak_statistics(GaussianFit(2.0, 0, 0, 3.0, 4.0, 0.0)).volume == pytest.approx(48 * math.pi)
    with pytest.raises(FitError):
        peak_statistics(GaussianFit(1, 0, 0, 1, 1, 0, converged=False))


def test_witness_reference_widths():
    r = witness_from_widths(6.97e-6, 6394.0)
    assert r.product_hbar2 == pytest.approx(1.986e-3, abs=0.5e-6)
    assert r.violated
    assert r.violation_factor == pytest.approx(125.9, abs=0.1)


def test_witness_boundary_and_classical():
    assert not witness_from_widths(0.5, 1.0).violated
    r = witness_from_widths(10e-6, 1e5)
    assert r.product_hbar2 == pytest.approx(1.0)
    assert not r.violated


def test_epr_witness_from_fits():
    # 1.788 px image width and 12.21 px pupil width reproduce the reference product
    image = GaussianFit(1, 0, 0, 1.788, 1.7, 0)
    pupil = GaussianFit(1, 0, 0, 79.37e-6 / CAL.pixel_pitch, 12.0, 0)
    r = epr_witness(image, pupil, CAL)
    assert r.delta_x == pytest.approx(6.97e-6, rel=1e-3)
    assert r.delta_p == pytest.approx(6394, rel=1e-3)
    assert r.product_hbar2 == pytest.approx(1.98e-3, rel=5e-3)
    ry = epr_witness(image, pupil, CAL, axis="y")
    assert ry.product_hbar2 < r.product_hbar2
    with pytest.raises(FitError):
        epr_witness(GaussianFit(1, 0, 0, 1, 1, 0, converged=False), pupil, CAL)


@given(st.floats(0.5, 10), st.floats(0.5, 10), st.floats(1.001, 2))
def test_witness_monotone(sx, sp, k):
    base = epr_witness(GaussianFit(1, 0, 0, sx, sx, 0), GaussianFit(1, 0, 0, sp, sp, 0), CAL).product_hbar2
    wider_image = epr_witness(GaussianFit(1, 0, 0, k * sx, sx, 0), GaussianFit(1, 0, 0, sp, sp, 0), CAL)
    wider_pupil = epr_witness(GaussianFit(1, 0, 0, sx, sx, 0), GaussianFit(1, 0, 0, k * sp, sp, 0), CAL)
    assert wider_image.product_hbar2 > base
    assert wider_pupil.product_hbar2 > base


def test_compare_control():
    main = GaussianFit(4.0, 0, 0, 2.0, 2.0, 0)
    assert compare_control(main, main) == (1.0, 1.0)
    amp, vol = compare_control(main, GaussianFit(1.0, 0, 0, 2.0, 2.0, 0))
    assert amp == 0.25 and vol == pytest.approx(0.25)
    with pytest.raises(FitError):
        compare_control(main, GaussianFit(1, 0, 0, 1, 1, 0, converged=False))


def test_runaway_fit_is_not_converged():
    rng = np.random.default_rng(0)
    fit = fit_gaussian2d(_cells(rng.normal(size=(21, 21)), 20))
    assert not fit.converged or (fit.sigma_x < 40 and fit.sigma_y < 40)
