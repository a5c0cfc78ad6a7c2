"""Paneitz operator and quadratic form on the periodic model.

    P u = bilap(u) - d_i(A_ij d_j u),   A = (2/3) R delta - 2 Ric

The curvature fields are user data. With both fields zero the operator is
the plain bi-Laplacian and every call short-circuits to it.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .grid import GridError, GridSpec, ScalarField, fft4, ifft4

PAIRS = tuple(combinations_with_replacement(range(4), 2))


class PaneitzHypothesisError(ValueError):
    """Coefficients make the Paneitz form negative on some test field."""


@dataclass(frozen=True, eq=False)
class PaneitzCoefficients:
    """Scalar curvature R and the 10 components of a symmetric Ricci tensor.

    ``ricci`` maps index pairs (i, j) with i <= j to fields.
    """

    spec: GridSpec
    scalar_curvature: ScalarField | None = None
    ricci: dict | None = None

    def __post_init__(self):
        if self.scalar_curvature is not None and self.scalar_curvature.spec != self.spec:
            raise GridError("scalar curvature lives on a different grid")
        if self.ricci is not None:
            ric = {}
            for (i, j), fld in self.ricci.items():
                key = (min(i, j), max(i, j))
                if key in ric and not np.array_equal(ric[key].values, fld.values):
                    raise GridError(f"Ricci components {key} and its transpose disagree")
                if fld.spec != self.spec:
                    raise GridError("Ricci component lives on a different grid")
                ric[key] = fld
            missing = [p for p in PAIRS if p not in ric]
            if missing:
                raise GridError(f"Ricci tensor missing components {missing}")
            object.__setattr__(self, "ricci", ric)

    @classmethod
    def flat(cls, spec: GridSpec) -> "PaneitzCoefficients":
        return cls(spec)

    @classmethod
    def from_constants(cls, spec: GridSpec, R: float, ric) -> "PaneitzCoefficients":
        ric = np.asarray(ric, dtype=float)
        if ric.shape != (4, 4) or not np.allclose(ric, ric.T):
            raise GridError("constant Ricci tensor must be a symmetric 4x4 matrix")
        return cls(spec, ScalarField.constant(spec, R),
                   {p: ScalarField.constant(spec, ric[p]) for p in PAIRS})

    @property
    def is_flat(self) -> bool:
        if self.scalar_curvature is None and self.ricci is None:
            return True
        vals = []
        if self.scalar_curvature is not None:
            vals.append(self.scalar_curvature.values)
        if self.ricci is not None:
            vals.extend(f.values for f in self.ricci.values())
        return all(not np.any(v) for v in vals)

    def tensor(self) -> dict:
        """Components A_ij (i <= j) as arrays or scalars."""
        out = {}
        R = 0.0 if self.scalar_curvature is None else self.scalar_curvature.values
        for i, j in PAIRS:
            a = (2.0 / 3.0) * R if i == j else 0.0
            if self.ricci is not None:
                a = a - 2.0 * self.ricci[(i, j)].values
            out[(i, j)] = a
        return out

    def tensor_at_origin(self) -> np.ndarray:
        A = np.zeros((4, 4))
        for (i, j), a in self.tensor().items():
            v = float(np.asarray(a).ravel()[0]) if np.ndim(a) else float(a)
            A[i, j] = A[j, i] = v
        return A


def _gradient_hat(uh: np.ndarray, spec: GridSpec) -> list:
    return [1j * spec.odd_wavenumber(a) * uh for a in range(4)]


def _paneitz_array(values: np.ndarray, c: PaneitzCoefficients) -> np.ndarray:
    spec = c.spec
    uh = fft4(values)
    out_h = spec.k2**2 * uh
    if not c.is_flat:
        grads = [ifft4(g, spec) for g in _gradient_hat(uh, spec)]
        A = c.tensor()
        for i in range(4):
            flux = np.zeros_like(values, dtype=float)
            for j in range(4):
                flux = flux + A[(min(i, j), max(i, j))] * grads[j]
            out_h = out_h - 1j * spec.odd_wavenumber(i) * fft4(flux)
    return ifft4(out_h, spec)


def _form_arrays(u: np.ndarray, v: np.ndarray, c: PaneitzCoefficients) -> float:
    spec = c.spec
    uh, vh = fft4(u), fft4(v)
    val = np.sum(spec.half_weights * spec.k2**2 * (uh * vh.conj()).real) / spec.size**2
    if not c.is_flat:
        gu = [ifft4(g, spec) for g in _gradient_hat(uh, spec)]
        gv = [ifft4(g, spec) for g in _gradient_hat(vh, spec)]
        A = c.tensor()
        acc = np.zeros(spec.shape)
        for i in range(4):
            for j in range(4):
                acc = acc + A[(min(i, j), max(i, j))] * gu[i] * gv[j]
        val += acc.mean()
    return float(val)


def _check(u: ScalarField, c: PaneitzCoefficients):
    if u.spec != c.spec:
        raise GridError(f"field on N={u.spec.n} but coefficients on N={c.spec.n}")


def apply_paneitz(u: ScalarField, c: PaneitzCoefficients) -> ScalarField:
    _check(u, c)
    return ScalarField(u.spec, _paneitz_array(u.values, c))


def quadratic_form(u: ScalarField, v: ScalarField, c: PaneitzCoefficients) -> float:
    """<Pu, v> = mean(lap u lap v + A(grad u, grad v))."""
    _check(u, c)
    _check(v, c)
    return _form_arrays(u.values, v.values, c)


@dataclass(frozen=True)
class PositivityReport:
    min_ratio: float
    max_ratio: float
    n_random: int
    n_modes: int
    worst_mode: tuple | None

    @property
    def ok(self) -> bool:
        return self.min_ratio >= 0.0


def _mode_ratios(c: PaneitzCoefficients, kmax: float = 4.0):
    """Exact form ratios for cos(k.x) and sin(k.x), 0 < |k| <= kmax.

    For a single mode only the Fourier coefficients of A at 0 and 2k enter:
    mean(A_ij sin^2(k.x)) = (A^_ij(0) - Re A^_ij(2k)) / 2, likewise for cos^2.
    """
    spec = c.spec
    n = spec.n
    A = c.tensor()
    Ahat = {}
    for p, a in A.items():
        full = np.fft.fftn(np.broadcast_to(a, spec.shape)) / spec.size
        Ahat[p] = full
    kk = int(np.floor(kmax))
    rng = np.arange(-kk, kk + 1)
    modes = []
    for k in np.array(np.meshgrid(rng, rng, rng, rng, indexing="ij")).reshape(4, -1).T:
        k2 = float(k @ k)
        if k2 == 0 or k2 > kmax**2 or np.any(np.abs(k) >= n // 2):
            continue
        nz = k[k != 0][0]
        if nz < 0:
            continue
        modes.append(k)
    out = []
    for k in modes:
        idx2 = tuple(int(v) % n for v in 2 * k)
        lap2 = 0.5 * float(k @ k) ** 2
        cos_g = 0.0
        sin_g = 0.0
        for (i, j), ah in Ahat.items():
            mult = 1.0 if i == j else 2.0
            a0 = ah[0, 0, 0, 0].real
            a2 = ah[idx2].real
            cos_g += mult * k[i] * k[j] * 0.5 * (a0 - a2)
            sin_g += mult * k[i] * k[j] * 0.5 * (a0 + a2)
        out.append((tuple(int(v) for v in k), "cos", (lap2 + cos_g) / lap2))
        out.append((tuple(int(v) for v in k), "sin", (lap2 + sin_g) / lap2))
    return out


def random_bandlimited(spec: GridSpec, rng: np.random.Generator, band: int = 3,
                       mean_zero: bool = True) -> np.ndarray:
    """Random real field whose Fourier support has max |k_i| <= band."""
    coeffs = np.zeros(spec.spectral_shape, dtype=complex)
    k = spec.wavenumbers
    mask = ((np.abs(k[0]) <= band) & (np.abs(k[1]) <= band)
            & (np.abs(k[2]) <= band) & (np.abs(k[3]) <= band))
    mask = np.broadcast_to(mask, spec.spectral_shape)
    vals = rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())
    coeffs[mask] = vals
    field = ifft4(coeffs, spec)
    if mean_zero:
        field -= field.mean()
    return field / np.sqrt(np.mean(field**2))


def positivity_check(c: PaneitzCoefficients, trials: int = 16, seed: int = 0,
                     band: int = 3, kmax: float = 4.0, raise_on_negative: bool = True) -> PositivityReport:
    """Empirical range of <Pu,u>/<lap u, lap u> on test fields.

    Random band-limited fields plus every single Fourier mode with
    0 < |k| <= kmax. A negative ratio rejects the coefficients.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    spec = c.spec
    if c.is_flat:
        return PositivityReport(1.0, 1.0, trials, 0, None)
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(trials):
        u = random_bandlimited(spec, rng, band)
        lap = np.sum(spec.half_weights * spec.k2**2 * np.abs(fft4(u)) ** 2) / spec.size**2
        ratios.append(_form_arrays(u, u, c) / lap)
    modes = _mode_ratios(c, kmax)
    worst = min(modes, key=lambda m: m[2]) if modes else None
    lo = min(min(ratios), worst[2] if worst else np.inf)
    hi = max(max(ratios), max(m[2] for m in modes) if modes else -np.inf)
    rep = PositivityReport(float(lo), float(hi), trials, len(modes), worst[:2] if worst else None)
    if raise_on_negative and not rep.ok:
        raise PaneitzHypothesisError(
            f"Paneitz form negative: min ratio {rep.min_ratio:.4g} (worst mode {rep.worst_mode})")
    return rep
