import csv

import numpy as np
import pytest
import sympy as sp

from qcurv.blowup import (BUBBLE, BUBBLE_A, BUBBLE_VOLUME, MASS_THRESHOLD, ResolutionError, analyze,
                          bubble_residual, bubble_volume, bubble_volume_fraction, case_b_scale, concentration_mass,
                          detect_peaks, ellipsoid_check, min_resolved_scale, rescale_case_a, rescale_case_b,
                          synthetic_blowup, write_peaks_csv, write_profile_csv)
from qcurv.energy import PrescribedCurvature
from qcurv.grid import GridSpec, ScalarField


@pytest.fixture(scope="module")
def spec32():
    return GridSpec(32)


@pytest.fixture(scope="module")
def pc():
    return PrescribedCurvature((1.0, 1.0, 1.0, 1.0))


def test_bubble_identity_symbolic():
    r = sp.symbols("r", positive=True)
    a = 4 * sp.sqrt(6)
    w = -sp.log(1 + r**2 / a)
    lap = lambda g: sp.diff(g, r, 2) + 3 * sp.diff(g, r) / r
    assert sp.simplify(lap(lap(w)) - sp.exp(4 * w)) == 0
    x = np.array([0.0, 0.3, 1.7, 25.0, 900.0])
    derivs = [sp.lambdify(r, sp.diff(w, r, k), "numpy") for k in range(5)]
    ours = [BUBBLE.w, BUBBLE.d1, BUBBLE.d2, BUBBLE.d3, BUBBLE.d4]
    for ref, mine in zip(derivs, ours):
        np.testing.assert_allclose(mine(x), np.broadcast_to(ref(x), x.shape), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(BUBBLE.laplacian(x[1:]), sp.lambdify(r, lap(w), "numpy")(x[1:]), rtol=1e-12)


def test_bubble_constants_and_range():
    assert BUBBLE_A == pytest.approx(4 * np.sqrt(6))
    assert bubble_residual(np.linspace(0, 1e3, 101)) < 1e-12
    with pytest.raises(ValueError):
        bubble_residual([1e3 + 1])
    with pytest.raises(ValueError):
        bubble_residual([-1.0])


@pytest.mark.parametrize("R", [1.0, 5.0, 30.0])
def test_volume_fraction_against_quadrature(R):
    from qcurv.grid import RadialGrid, radial_quadrature
    g = RadialGrid.uniform(0.0, R, 16, 20)
    part = radial_quadrature(BUBBLE.density, g)
    assert part / BUBBLE_VOLUME == pytest.approx(bubble_volume_fraction(R), rel=1e-12)
    assert bubble_volume() == pytest.approx(BUBBLE_VOLUME, rel=1e-12)


@pytest.mark.parametrize("index", [(0, 0, 0, 0), (1, 0, 0, 0), (31, 1, 0, 30)])
def test_case_a_round_trip_off_origin(spec32, pc, index):
    lam, r = 1.0, 0.3
    center = tuple(spec32.axis[i] for i in index)
    u = synthetic_blowup(lam, "a", pc, spec32, r=r, center=center)
    peaks = detect_peaks(u, pc, lam)
    assert peaks[0].index == index and peaks[0].blowup
    res = rescale_case_a(u, lam, peaks[0].index)
    assert res.r == pytest.approx(r, rel=1e-12)
    assert res.profile_error <= 1e-3
    assert r**4 * lam * np.exp(4 * u.values[index]) == pytest.approx(0.5, rel=1e-12)


def test_case_b_round_trip(spec32, pc):
    lam, c = 0.1, 2.0
    u = synthetic_blowup(lam, "b", pc, spec32, c=c)
    peak = detect_peaks(u, pc, lam)[0]
    assert peak.index == (0, 0, 0, 0)
    res = rescale_case_b(u, lam, pc, c, peak.index)
    assert res.r == pytest.approx(case_b_scale(lam, pc, c))
    assert res.profile_error <= 1e-3
    # h(0) = 1 and h decreases away from the maximum
    assert res.limit_curvature[:, 0].max() == 1.0 and res.limit_curvature[:, -1].max() < 1.0
    with pytest.raises(ValueError):
        rescale_case_b(u, lam, pc, -1.0)


def test_resolution_guards(spec32, pc):
    rmin = min_resolved_scale(spec32)
    with pytest.raises(ResolutionError, match="below the resolved minimum"):
        synthetic_blowup(1.0, "a", pc, spec32, r=0.5 * rmin)
    with pytest.raises(ResolutionError, match="plateau"):
        synthetic_blowup(0.5, "b", pc, spec32, c=1.0)
    u = synthetic_blowup(1.0, "a", pc, spec32, r=0.3)
    with pytest.raises(ResolutionError, match="under-resolved"):
        rescale_case_a(u + 3.0, 1.0, (0, 0, 0, 0))
    with pytest.raises(ValueError):
        synthetic_blowup(1.0, "c", pc, spec32)


def test_detect_peaks_restricted_to_K(spec32, pc):
    # a bump where f < 0 is ignored; a plateau yields one representative
    u = synthetic_blowup(1.0, "a", pc, spec32, r=0.3, center=(np.pi, np.pi, 0.0, 0.0))
    assert all(p.location != (np.pi, np.pi, 0.0, 0.0) for p in detect_peaks(u, pc, 1.0))
    flat = ScalarField.constant(spec32, 0.0)
    peaks = detect_peaks(flat, pc, 1.0)
    assert len(peaks) == 1 and not peaks[0].blowup
    assert detect_peaks(flat, pc, -1.0) == []


def test_concentration_mass_grid_quadrature(spec32):
    # u = 0, f = 1: the mass is the Euclidean ball volume pi^2 R^4 / 2
    u = ScalarField.constant(spec32, 0.0)
    R = 2.0
    m = concentration_mass(u, ScalarField.constant(spec32, 1.0), None, (0, 0, 0, 0), R)
    assert m.mass_abs == pytest.approx(np.pi**2 * R**4 / 2, rel=0.05)
    assert m.mass_pos == m.mass_abs
    with pytest.raises(ValueError):
        concentration_mass(u, 1.0, None, (0, 0, 0, 0), 4.0)


def test_bubble_mass_exceeds_threshold(spec32, pc):
    # K = {f_lam >= 0} must contain the bubble core, so lam is taken large enough
    u = synthetic_blowup(4.0, "a", pc, spec32, r=0.3)
    m = concentration_mass(u, pc, 4.0, (0, 0, 0, 0), 2.0)
    assert m.above_threshold and m.mass_pos >= MASS_THRESHOLD


@pytest.mark.parametrize("lam", [0.05, 0.2, 1.0])
def test_control_ellipsoids(spec32, lam):
    chk = ellipsoid_check(PrescribedCurvature((0.5, 1.0, 1.0, 2.0)), lam, spec32)
    assert chk.ok and chk.n_inner <= chk.n_K


def test_analyze_and_outputs(tmp_path, spec32, pc):
    u = synthetic_blowup(1.0, "a", pc, spec32, r=0.3)
    rep = analyze(u, pc, 1.0, radius=2.0)
    assert len(rep.rows) == 1 and not rep.mean_drop
    row = rep.rows[0]
    assert row.case == "a" and row.r == pytest.approx(0.3, rel=1e-9)
    p = write_peaks_csv(rep, tmp_path / "peaks.csv")
    with open(p) as fh:
        assert len(list(csv.reader(fh))) == 2
    prof = write_profile_csv(rescale_case_a(u, 1.0, (0, 0, 0, 0)), tmp_path / "prof.csv")
    with open(prof) as fh:
        assert len(list(csv.reader(fh))) == 22
