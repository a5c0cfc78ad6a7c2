"""The functional E_f, its first two variations and scalar diagnostics.

    E_f(u) = <Pu, u> + 4 Q0 mean(u) - mean(f e^{4u})

All integrals use the normalized measure of the torus.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import GridSpec, ScalarField
from .paneitz import PaneitzCoefficients, _form_arrays, _paneitz_array

EXP_BUDGET = 700.0


class OverflowGuardError(FloatingPointError):
    """e^{4u} would leave the double-precision range."""


class CurvatureSignError(ValueError):
    """f has the wrong sign for the requested operation."""


@dataclass(frozen=True)
class PrescribedCurvature:
    """Builtin family f_lam(x) = lam - 4 sum_i alpha_i sin^2(x_i / 2).

    The factor 4 makes f_0 = -sum alpha_i x_i^2 + O(|x|^4) near its
    maximum at the origin, so D^2 f_0(0) = -2 diag(alpha).
    """

    alphas: tuple
    lam: float = 0.0

    def __post_init__(self):
        a = tuple(float(x) for x in self.alphas)
        if len(a) != 4:
            raise ValueError("need exactly four alphas")
        if min(a) <= 0:
            raise ValueError("alphas must be positive (f0 nonconstant with a nondegenerate maximum)")
        if list(a) != sorted(a):
            raise ValueError("alphas must be sorted ascending")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "lam", float(self.lam))

    def with_lambda(self, lam: float) -> "PrescribedCurvature":
        return PrescribedCurvature(self.alphas, lam)

    def f0(self, *x) -> np.ndarray:
        out = 0.0
        for a, xi in zip(self.alphas, x):
            out = out - 4.0 * a * np.sin(0.5 * xi) ** 2
        return out

    def f(self, *x) -> np.ndarray:
        return self.f0(*x) + self.lam

    def hessian(self) -> np.ndarray:
        """D^2 f_0 at the maximum point."""
        return -2.0 * np.diag(self.alphas)


@dataclass(frozen=True)
class EnergyBreakdown:
    quadratic: float
    linear: float
    exponential: float

    @property
    def total(self) -> float:
        return self.quadratic + self.linear + self.exponential


def f_lambda_field(pc: PrescribedCurvature, spec: GridSpec) -> ScalarField:
    x = spec.coords()
    return ScalarField(spec, np.broadcast_to(pc.f(*x), spec.shape))


def exp4(u: np.ndarray) -> np.ndarray:
    m = float(np.max(u))
    if 4.0 * m > EXP_BUDGET:
        raise OverflowGuardError(f"max(u) = {m:.4g} puts e^(4u) beyond the exponent budget")
    return np.exp(4.0 * u)


def _require_q0(Q0: float):
    if not Q0 < 0:
        raise ValueError(f"Q0 must be negative, got {Q0}")


# array kernels shared with the solvers

def energy_array(u, f, Q0, c) -> EnergyBreakdown:
    e = exp4(u)
    return EnergyBreakdown(_form_arrays(u, u, c), 4.0 * Q0 * float(u.mean()), -float(np.mean(f * e)))


def gradient_array(u, f, Q0, c) -> np.ndarray:
    return 2.0 * _paneitz_array(u, c) + 4.0 * Q0 - 4.0 * f * exp4(u)


def hessian_operator(u, f, c) -> Callable[[np.ndarray], np.ndarray]:
    weight = 16.0 * f * exp4(u)

    def apply(w: np.ndarray) -> np.ndarray:
        return 2.0 * _paneitz_array(w, c) - weight * w

    return apply


def _fields(u, f, c):
    if f.spec != u.spec or c.spec != u.spec:
        raise ValueError("u, f and coefficients must share a grid")


def energy(u: ScalarField, f: ScalarField, Q0: float, c: PaneitzCoefficients) -> EnergyBreakdown:
    _require_q0(Q0)
    _fields(u, f, c)
    return energy_array(u.values, f.values, Q0, c)


def gradient_field(u: ScalarField, f: ScalarField, Q0: float, c: PaneitzCoefficients) -> ScalarField:
    """L2 representative of DE_f(u): DE_f(u)[v] = mean(grad * v)."""
    _require_q0(Q0)
    _fields(u, f, c)
    return ScalarField(u.spec, gradient_array(u.values, f.values, Q0, c))


def hessian_apply(u: ScalarField, f: ScalarField, c: PaneitzCoefficients):
    """Return w -> 2 P w - 16 f e^{4u} w, the representative of D^2 E_f(u)."""
    _fields(u, f, c)
    op = hessian_operator(u.values, f.values, c)

    def apply(w: ScalarField) -> ScalarField:
        return ScalarField(u.spec, op(w.values))

    return apply


@dataclass(frozen=True)
class FAverage:
    value: float
    jensen_lhs: float
    jensen_rhs: float

    @property
    def jensen_gap(self) -> float:
        return self.jensen_lhs - self.jensen_rhs


def f_average(u: ScalarField, f: ScalarField) -> FAverage:
    """Weighted mean of u under the probability density -f / ||f||_1."""
    fv = f.values
    if np.any(fv > 0):
        raise CurvatureSignError("f_average needs f <= 0")
    norm = float(np.mean(-fv))
    if norm == 0.0:
        raise CurvatureSignError("f vanishes identically")
    wgt = -fv / norm
    ubar = float(np.mean(wgt * u.values))
    return FAverage(ubar, float(np.mean(wgt * exp4(u.values))), float(np.exp(4.0 * ubar)))


def volume(u: ScalarField) -> float:
    """Normalized conformal volume mean(e^{4u})."""
    return float(np.mean(exp4(u.values)))


def kp_residual(u: ScalarField, f: ScalarField, Q0: float) -> float:
    """mean(f e^{4u}) - Q0; zero at exact solutions."""
    return float(np.mean(f.values * exp4(u.values))) - Q0
