import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcurv.grid import (CompatibilityError, GridError, GridSpec, RadialGrid, ScalarField, apply_multiplier,
                        bilaplacian, derivative, inner, interpolate, laplacian, radial_quadrature, read_snapshot,
                        resample, sample, solve_bilaplacian_meanzero, spectral_inner, tail_fraction,
                        write_snapshot)
from qcurv.paneitz import random_bandlimited


@pytest.mark.parametrize("n", [7, 6, 9, 0, -8, 8.0])
def test_gridspec_rejects_bad_n(n):
    with pytest.raises(GridError):
        GridSpec(n)


def test_gridspec_shapes():
    s = GridSpec(12)
    assert s.shape == (12,) * 4
    assert s.spectral_shape == (12, 12, 12, 7)
    assert s.spacing == pytest.approx(2 * np.pi / 12)
    # half-spectrum multiplicities reproduce the full spectrum size
    assert np.broadcast_to(s.half_weights, s.spectral_shape).sum() == s.size


def test_fields_on_different_grids_refuse_to_mix():
    a = ScalarField.constant(GridSpec(8), 1.0)
    b = ScalarField.constant(GridSpec(10), 1.0)
    with pytest.raises(GridError):
        inner(a, b)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), band=st.integers(1, 4))
def test_parseval(seed, band):
    spec = GridSpec(8)
    rng = np.random.default_rng(seed)
    u = ScalarField(spec, random_bandlimited(spec, rng, band, mean_zero=False))
    v = ScalarField(spec, rng.standard_normal(spec.shape))
    assert spectral_inner(u, v) == pytest.approx(inner(u, v), rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("k", [(1, 0, 0, 0), (0, 2, 1, 0), (1, 1, 1, 3), (0, 0, 0, 5)])
def test_laplacian_and_bilaplacian_of_modes(k):
    spec = GridSpec(12)
    u = sample(lambda *x: np.cos(sum(ki * xi for ki, xi in zip(k, x)) + 0.3), spec)
    k2 = float(np.dot(k, k))
    np.testing.assert_allclose(apply_multiplier(u, laplacian(spec)).values, -k2 * u.values, atol=1e-10)
    np.testing.assert_allclose(apply_multiplier(u, bilaplacian(spec)).values, k2**2 * u.values, atol=1e-9)


def test_derivative_is_skew_adjoint(rng):
    spec = GridSpec(8)
    u = ScalarField(spec, rng.standard_normal(spec.shape))
    v = ScalarField(spec, rng.standard_normal(spec.shape))
    for ax in range(4):
        d = derivative(spec, ax)
        assert inner(apply_multiplier(u, d), v) == pytest.approx(-inner(u, apply_multiplier(v, d)), abs=1e-12)


def test_bilaplacian_solve_round_trip(rng):
    spec = GridSpec(10)
    u = ScalarField(spec, random_bandlimited(spec, rng, band=4))
    rhs = apply_multiplier(u, bilaplacian(spec))
    back = solve_bilaplacian_meanzero(rhs)
    np.testing.assert_allclose(back.values, u.values, atol=1e-12)
    with pytest.raises(CompatibilityError):
        solve_bilaplacian_meanzero(rhs + 1.0)


def test_interpolate_reproduces_trig_polynomial(rng):
    spec = GridSpec(10)
    fn = lambda x1, x2, x3, x4: np.sin(x1 - 2 * x3) + 0.5 * np.cos(3 * x2 + x4) + 0.25
    u = sample(fn, spec)
    pts = rng.uniform(0, 2 * np.pi, size=(37, 4))
    np.testing.assert_allclose(interpolate(u, pts), fn(*pts.T), atol=1e-12)
    idx = np.array([[0, 1, 2, 3], [9, 9, 0, 4]])
    np.testing.assert_allclose(interpolate(u, idx * spec.spacing), u.values[tuple(idx.T)], atol=1e-12)


def test_resample_keeps_band_limited_field(rng):
    spec = GridSpec(8)
    u = ScalarField(spec, random_bandlimited(spec, rng, band=3, mean_zero=False))
    fine = resample(u, 14)
    pts = rng.uniform(0, 2 * np.pi, size=(10, 4))
    np.testing.assert_allclose(interpolate(fine, pts), interpolate(u, pts), atol=1e-12)


def test_tail_fraction_flags_rough_fields(rng):
    spec = GridSpec(12)
    smooth = ScalarField(spec, random_bandlimited(spec, rng, band=2))
    assert tail_fraction(smooth) < 1e-20
    rough = ScalarField(spec, rng.standard_normal(spec.shape))
    with pytest.warns(RuntimeWarning, match="tail fraction"):
        assert tail_fraction(rough) > 0.1


@pytest.mark.parametrize("p", [0, 1, 2, 5])
def test_radial_quadrature_monomials(p):
    g = RadialGrid.uniform(0.0, 2.0, 3, 12)
    exact = 2 * np.pi**2 * 2.0 ** (p + 4) / (p + 4)
    assert radial_quadrature(lambda r: r**p, g) == pytest.approx(exact, rel=1e-13)


def test_radial_grid_log_panels_resolve_log_singularity():
    # 2 pi^2 int_eps^1 log(1/r)^2 r^{-1} dr (times r^3 / r^3) = 2 pi^2 log(1/eps)^3 / 3
    eps = 1e-8
    g = RadialGrid.log_panels(eps, 1.0, per_unit=2, order=20)
    val = radial_quadrature(lambda r: np.log(1 / r) ** 2 / r**4, g)
    assert val == pytest.approx(2 * np.pi**2 * np.log(1 / eps) ** 3 / 3, rel=1e-12)


def test_radial_grid_validation():
    with pytest.raises(GridError):
        RadialGrid.from_breaks([1.0])
    with pytest.raises(GridError):
        RadialGrid.graded(0.0, 1.0)
    a = RadialGrid.uniform(0, 1)
    with pytest.raises(GridError):
        a.join(a)


def test_snapshot_round_trip(tmp_path, rng):
    spec = GridSpec(8)
    u = ScalarField(spec, rng.standard_normal(spec.shape))
    p = write_snapshot(tmp_path / "u.qc4f", u, 0.125)
    v, lam = read_snapshot(p)
    assert lam == 0.125
    assert np.array_equal(v.values, u.values)
    bad = tmp_path / "bad.qc4f"
    bad.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(GridError, match="magic"):
        read_snapshot(bad)
    short = tmp_path / "short.qc4f"
    short.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(GridError, match="expected"):
        read_snapshot(short)
