import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcurv.energy import PrescribedCurvature, f_lambda_field
from qcurv.grid import GridSpec
from qcurv.minimizer import solve_unique_min
from qcurv.mountainpass import (FieldEnergy, Path, PathError, SaddleRejected, ToyEnergy, _arclength, bump_direction,
                                c_curve, endpoint_scale, initial_path, measure_structure, optimize_path,
                                perpendicular_gradient, refine_saddle, reparametrize)
from qcurv.paneitz import PaneitzCoefficients, random_bandlimited


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-2, 3), y=st.floats(-2, 3), kappa=st.floats(-1, 1), mu=st.floats(0, 1))
def test_toy_derivatives(x, y, kappa, mu):
    toy = ToyEnergy(4.0, kappa, mu)
    p = np.array([x, y])
    h = 1e-6
    fd = np.array([(toy.energy(p + h * e) - toy.energy(p - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(toy.gradient(p), fd, atol=1e-6 * (1 + np.abs(fd).max()))
    fdh = np.array([(toy.gradient(p + h * e) - toy.gradient(p - h * e)) / (2 * h) for e in np.eye(2)]).T
    np.testing.assert_allclose(toy.hessian(p), fdh, atol=1e-5 * (1 + np.abs(fdh).max()))


@pytest.mark.parametrize("kappa", [0.0, 0.5, 1.0])
def test_toy_saddle_is_critical(kappa):
    toy = ToyEnergy(4.0, kappa)
    s = toy.saddle()
    assert np.abs(toy.gradient(s)).max() == 0.0
    assert toy.energy(s) == pytest.approx(toy.saddle_value)
    assert toy.nu_estimate(s).value < 0


@pytest.mark.parametrize("M", [8, 16, 32])
def test_string_finds_toy_saddle(M):
    toy = ToyEnergy(4.0, 0.5)
    path = initial_path(np.zeros(2), np.array([2.0, 2.0]), M, toy, 0.0)
    rep = optimize_path(path, toy, iters=5000)
    assert rep.converged
    assert rep.initial_max > rep.c_est
    np.testing.assert_allclose(rep.maximizer, toy.saddle(), atol=1e-5)
    cp = refine_saddle(rep.maximizer, toy, branch_point=np.zeros(2), rho=0.5)
    np.testing.assert_allclose(cp.field, toy.saddle(), atol=1e-12)
    assert cp.negative_directions == 1
    assert cp.distance_to_branch == pytest.approx(np.hypot(1.0, 0.5))


def test_refine_saddle_rejections():
    toy = ToyEnergy(4.0, 0.5)
    with pytest.raises(SaddleRejected, match="negative direction"):
        refine_saddle(np.array([0.05, -0.02]), toy)
    with pytest.raises(SaddleRejected, match="rho/2"):
        refine_saddle(np.array([0.9, 0.45]), toy, branch_point=np.zeros(2), rho=3.0)


def test_initial_path_checks_endpoint():
    toy = ToyEnergy(4.0, 0.5)
    with pytest.raises(PathError, match="increase the ray parameter"):
        initial_path(np.zeros(2), np.array([0.5, 0.0]), 8, toy, 0.0)
    with pytest.raises(PathError):
        initial_path(np.zeros(2), np.ones(2), 0)


def test_reparametrize_equalizes_arclength():
    toy = ToyEnergy()
    t = np.linspace(0, 1, 17) ** 3
    X = np.stack([2 * t, np.sin(3 * t)], axis=1)
    p = reparametrize(toy, Path(X))
    seg = np.diff(_arclength(toy, p.nodes))
    assert seg.max() / seg.min() < 1.05
    # chords of the spline differ from its arclength; repeated passes converge geometrically
    for _ in range(3):
        p = reparametrize(toy, p)
    seg = np.diff(_arclength(toy, p.nodes))
    assert seg.max() / seg.min() < 1 + 1e-6
    np.testing.assert_array_equal(p.nodes[0], X[0])
    np.testing.assert_array_equal(p.nodes[-1], X[-1])
    q = reparametrize(toy, Path(X), fixed=5)
    np.testing.assert_array_equal(q.nodes[5], X[5])


def test_perpendicular_gradient_annihilates_tangent(rng):
    toy = ToyEnergy()
    for _ in range(10):
        g, t = rng.standard_normal(2), rng.standard_normal(2)
        assert toy.pairing(perpendicular_gradient(toy, None, g, t), t) == pytest.approx(0.0, abs=1e-14)


def test_monotone_family_gives_monotone_levels():
    mus = [0.0, 0.05, 0.1, 0.2]
    rows = c_curve(mus, lambda mu: ToyEnergy(4.0, 0.5, mu), np.zeros(2), lambda mu: np.array([2.0, 2.0]), M=16,
                   optimize_kw=dict(iters=5000))
    c = [r.c_est for r in rows]
    assert all("monotonicity-violation" not in r.flags for r in rows)
    assert np.all(np.diff(c) <= 0)


def test_measure_structure_on_toy():
    # origin is the minimizer (E = 0); every unit direction rises before the saddle level
    dirs = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
    st_ = measure_structure(lambda mu: ToyEnergy(4.0, 0.5, mu), [0.0], [np.zeros(2)], np.zeros(2), dirs,
                            np.linspace(0.01, 0.5, 50))
    assert st_.rho == pytest.approx(0.5)
    assert 0 < st_.beta0 <= ToyEnergy.saddle_value


@pytest.fixture(scope="module")
def field_model():
    spec = GridSpec(8)
    pc = PrescribedCurvature((1, 1, 1, 1))
    f = f_lambda_field(pc.with_lambda(0.2), spec)
    u0 = solve_unique_min(f_lambda_field(pc, spec), -1.0, PaneitzCoefficients.flat(spec)).u.values
    return FieldEnergy(f, -1.0), u0


def test_field_model_kernels(field_model, rng):
    model, u0 = field_model
    spec = model.spec
    x = u0 + 0.2 * random_bandlimited(spec, rng, 2, False)
    d = random_bandlimited(spec, rng, 3, False)
    h = 1e-5
    fd = (model.energy(x + h * d) - model.energy(x - h * d)) / (2 * h)
    assert model.pairing(model.gradient(x), d) == pytest.approx(fd, rel=1e-7)
    # preconditioner is symmetric positive definite in the L2 pairing
    g = random_bandlimited(spec, rng, 3, False)
    assert model.pairing(g, model.precondition(x, g)) > 0
    assert model.pairing(d, model.precondition(x, g)) == pytest.approx(model.pairing(g, model.precondition(x, d)))
    assert model.norm(d) ** 2 == pytest.approx(model.inner(d, d))
    assert model.entropy(np.zeros(spec.shape)) == 1.0


def test_endpoint_scale(field_model):
    model, u0 = field_model
    b = bump_direction(model.spec, 0.5)
    ref = model.energy(u0)
    s = endpoint_scale(model, u0, b, ref, margin=0.5)
    assert model.energy(u0 + s * b) < ref - 0.5
    assert model.energy(u0 + (s - 0.25) * b) >= ref - 0.5
    with pytest.raises(PathError):
        endpoint_scale(model, u0, b, ref, margin=0.5, s_max=0.5)
