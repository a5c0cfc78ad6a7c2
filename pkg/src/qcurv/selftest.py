"""Fast invariant table used by ``qcurv selftest``.

Each row is (name, measured value, tolerance, passed). Every value is a
discrepancy between two independent routes to the same quantity.
"""
from __future__ import annotations

import numpy as np

from .blowup import BUBBLE_VOLUME, bubble_residual, bubble_volume
from .comparison import CutoffParams, appendix_integrals
from .energy import PrescribedCurvature, energy_array, f_lambda_field, gradient_array, hessian_operator
from .grid import GridSpec, ScalarField, inner, spectral_inner
from .minimizer import solve_unique_min
from .mountainpass import ToyEnergy, refine_saddle
from .paneitz import PaneitzCoefficients, _form_arrays, _paneitz_array, random_bandlimited


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def run_selftest(spec: GridSpec = GridSpec(16), seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    c = PaneitzCoefficients.flat(spec)
    rows = []

    u = random_bandlimited(spec, rng, band=3, mean_zero=False)
    v = random_bandlimited(spec, rng, band=3, mean_zero=False)
    U, V = ScalarField(spec, u), ScalarField(spec, v)
    rows.append(("parseval", _rel(spectral_inner(U, V), inner(U, V)), 1e-10))
    pu, pv = _paneitz_array(u, c), _paneitz_array(v, c)
    rows.append(("paneitz adjoint", _rel(np.mean(pu * v), np.mean(u * pv)), 1e-10))
    rows.append(("paneitz form vs operator", _rel(_form_arrays(u, v, c), np.mean(pu * v)), 1e-10))

    pc = PrescribedCurvature((1.0, 1.0, 1.0, 1.0))
    f = f_lambda_field(pc.with_lambda(0.1), spec).values
    Q0 = -1.0
    x = 0.3 * u
    g = gradient_array(x, f, Q0, c)
    d = random_bandlimited(spec, rng, band=3, mean_zero=False)
    h = 1e-4
    fd = (energy_array(x + h * d, f, Q0, c).total - energy_array(x - h * d, f, Q0, c).total) / (2 * h)
    rows.append(("gradient vs central difference", _rel(np.mean(g * d), fd), 1e-6))
    H = hessian_operator(x, f, c)
    fdh = (gradient_array(x + h * d, f, Q0, c) - gradient_array(x - h * d, f, Q0, c)) / (2 * h)
    rows.append(("hessian vs central difference", np.abs(H(d) - fdh).max() / np.abs(fdh).max(), 1e-5))

    res = solve_unique_min(ScalarField.constant(spec, -1.0), -1.0, c)
    rows.append(("zero field solves f=-1, Q0=-1", float(np.abs(res.u.values).max()), 1e-10))

    r = np.linspace(0.0, 1e3, 2001)
    rows.append(("bubble residual", float(np.abs(bubble_residual(r)).max()), 1e-10))
    rows.append(("bubble volume", _rel(bubble_volume(), BUBBLE_VOLUME), 1e-8))

    app = appendix_integrals(np.exp(-10.0), CutoffParams(1.1))
    rows.append(("annulus integral closed form", app.II_relerr, 1e-8))

    toy = ToyEnergy()
    cp = refine_saddle(np.array([0.8, 0.3]), toy)
    rows.append(("toy saddle value", abs(cp.energy - toy.saddle_value), 1e-6))
    return [(n, float(val), tol, bool(val <= tol)) for n, val, tol in rows]
