import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcurv.energy import (CurvatureSignError, OverflowGuardError, PrescribedCurvature, energy, f_average,
                          f_lambda_field, gradient_field, hessian_apply, kp_residual, volume)
from qcurv.grid import GridSpec, ScalarField
from qcurv.paneitz import PaneitzCoefficients, random_bandlimited


@pytest.mark.parametrize("alphas", [(1, 1, 1), (0, 1, 1, 1), (-1, 1, 2, 3), (2, 1, 1, 1)])
def test_prescribed_curvature_validation(alphas):
    with pytest.raises(ValueError):
        PrescribedCurvature(alphas)


def test_f0_hessian_at_maximum():
    pc = PrescribedCurvature((0.5, 1.0, 1.5, 2.0))
    h = 1e-4
    H = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            def f(si, sj):
                x = np.zeros(4)
                x[i] += si * h
                x[j] += sj * h
                return pc.f0(*x)
            H[i, j] = (f(1, 1) - f(1, -1) - f(-1, 1) + f(-1, -1)) / (4 * h * h)
    np.testing.assert_allclose(H, pc.hessian(), atol=1e-6)
    assert pc.f0(0, 0, 0, 0) == 0.0
    assert pc.with_lambda(0.3).f(0, 0, 0, 0) == pytest.approx(0.3)


def test_energy_of_constants():
    spec = GridSpec(8)
    c = PaneitzCoefficients.flat(spec)
    pc = PrescribedCurvature((1, 1, 1, 1), 0.1)
    f = f_lambda_field(pc, spec)
    b = energy(ScalarField.constant(spec, 0.25), f, -2.0, c)
    assert b.quadratic == pytest.approx(0.0, abs=1e-14)
    assert b.linear == pytest.approx(4 * -2.0 * 0.25)
    # mean of f_lam over the torus: lam - 2 sum alpha
    assert b.exponential == pytest.approx(-(0.1 - 8.0) * np.exp(1.0))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), amp=st.floats(0.05, 0.8))
def test_gradient_matches_directional_difference(seed, amp):
    spec = GridSpec(8)
    rng = np.random.default_rng(seed)
    c = PaneitzCoefficients.flat(spec)
    f = f_lambda_field(PrescribedCurvature((1, 1, 2, 3), 0.2), spec)
    u = ScalarField(spec, amp * random_bandlimited(spec, rng, 3, mean_zero=False))
    d = ScalarField(spec, random_bandlimited(spec, rng, 3, mean_zero=False))
    h = 1e-5
    fd = (energy(u + h * d, f, -1.0, c).total - energy(u - h * d, f, -1.0, c).total) / (2 * h)
    g = gradient_field(u, f, -1.0, c)
    assert float(np.mean(g.values * d.values)) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_hessian_is_symmetric(rng):
    spec = GridSpec(8)
    c = PaneitzCoefficients.flat(spec)
    f = f_lambda_field(PrescribedCurvature((1, 1, 1, 1), 0.1), spec)
    u = ScalarField(spec, 0.4 * random_bandlimited(spec, rng, 3, mean_zero=False))
    H = hessian_apply(u, f, c)
    v = ScalarField(spec, rng.standard_normal(spec.shape))
    w = ScalarField(spec, rng.standard_normal(spec.shape))
    assert np.mean(H(v).values * w.values) == pytest.approx(np.mean(v.values * H(w).values), rel=1e-12)


def test_constant_solution_residuals():
    # f = Q0 constant: u = 0 solves P u + 2 Q0 = 2 f e^{4u}
    spec = GridSpec(8)
    c = PaneitzCoefficients.flat(spec)
    f = ScalarField.constant(spec, -1.5)
    u = ScalarField.constant(spec, 0.0)
    assert np.abs(gradient_field(u, f, -1.5, c).values).max() == 0.0
    assert kp_residual(u, f, -1.5) == 0.0
    assert volume(u) == 1.0


def test_q0_must_be_negative():
    spec = GridSpec(8)
    c = PaneitzCoefficients.flat(spec)
    u = ScalarField.constant(spec, 0.0)
    with pytest.raises(ValueError, match="negative"):
        energy(u, u - 1.0, 0.0, c)


def test_overflow_guard():
    spec = GridSpec(8)
    with pytest.raises(OverflowGuardError):
        volume(ScalarField.constant(spec, 200.0))


def test_f_average_jensen(rng):
    spec = GridSpec(8)
    f = f_lambda_field(PrescribedCurvature((1, 1, 1, 1)), spec) - 0.5
    u = ScalarField(spec, random_bandlimited(spec, rng, 2, mean_zero=False))
    avg = f_average(u, f)
    assert avg.jensen_gap >= 0
    with pytest.raises(CurvatureSignError):
        f_average(u, f + 1.0)
