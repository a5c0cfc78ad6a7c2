"""Periodic 4-D grid, spectral operators and a radial quadrature engine.

All integrals on the torus [0, 2pi)^4 are taken with respect to the
normalized measure, so they are plain means over the grid points.
Fields are real and spectral transforms use the real-to-complex FFT, so
symbols live on the half spectrum of shape ``(n, n, n, n // 2 + 1)``.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import fft as sfft
from scipy import signal

TWO_PI = 2.0 * np.pi
VOLUME = TWO_PI**4
TAIL_WARN = 1e-6

SNAPSHOT_MAGIC = b"QC4F"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIId")


class GridError(ValueError):
    """Invalid grid input (shape mismatch, non-finite samples, ...)."""


class CompatibilityError(GridError):
    """Right-hand side outside the range of the bi-Laplacian."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``n`` points per axis on [0, 2pi)^4."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 8 or self.n % 2:
            raise GridError(f"n_per_axis must be an even integer >= 8, got {self.n!r}")

    @property
    def n_per_axis(self) -> int:
        return int(self.n)

    @property
    def domain_length(self) -> float:
        return TWO_PI

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n,) * 4

    @property
    def spectral_shape(self) -> tuple[int, int, int, int]:
        return (self.n, self.n, self.n, self.n // 2 + 1)

    @property
    def size(self) -> int:
        return self.n**4

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n

    @cached_property
    def axis(self) -> np.ndarray:
        return np.arange(self.n) * self.spacing

    def coords(self) -> tuple[np.ndarray, ...]:
        """Sparse broadcastable coordinate arrays x1..x4."""
        return tuple(np.meshgrid(*(self.axis,) * 4, indexing="ij", sparse=True))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Integer frequencies per axis, broadcastable to the half spectrum.

        The Nyquist entry of the first three axes is reported as -n/2, the
        last (halved) axis runs 0..n/2.
        """
        full = np.fft.fftfreq(self.n, 1.0 / self.n)
        half = np.arange(self.n // 2 + 1, dtype=float)
        out = []
        for ax in range(4):
            k = half if ax == 3 else full
            shp = [1, 1, 1, 1]
            shp[ax] = k.size
            out.append(k.reshape(shp))
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        k = self.wavenumbers
        return k[0] ** 2 + k[1] ** 2 + k[2] ** 2 + k[3] ** 2

    @cached_property
    def half_weights(self) -> np.ndarray:
        """Multiplicity of each half-spectrum entry in the full spectrum."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w.reshape(1, 1, 1, -1)

    def odd_wavenumber(self, axis: int) -> np.ndarray:
        """Wavenumber along ``axis`` with the Nyquist mode removed.

        First derivatives cannot represent the Nyquist mode as a real field,
        so it is zeroed; this keeps d/dx exactly skew-adjoint.
        """
        k = self.wavenumbers[axis].copy()
        k[np.abs(k) == self.n // 2] = 0.0
        return k


def _check_values(values: np.ndarray, spec: GridSpec) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != spec.shape:
        raise GridError(f"field shape {arr.shape} does not match grid {spec.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real grid values; the array is made read-only on construction."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(_check_values(self.values, self.spec), dtype=float, copy=True)
        if not np.all(np.isfinite(arr)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            raise GridError(f"non-finite field value at grid index {bad}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def constant(cls, spec: GridSpec, c: float) -> "ScalarField":
        return cls(spec, np.full(spec.shape, float(c)))

    def mean(self) -> float:
        return float(self.values.mean())

    def max_norm(self) -> float:
        return float(np.abs(self.values).max())

    def _other(self, other):
        if isinstance(other, ScalarField):
            if other.spec != self.spec:
                raise GridError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.spec, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.spec, self.values - self._other(other))

    def __rsub__(self, other):
        return ScalarField(self.spec, self._other(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.spec, self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.spec, -self.values)


def sample(fn: Callable[..., np.ndarray], spec: GridSpec) -> ScalarField:
    """Evaluate ``fn(x1, x2, x3, x4)`` at every grid point."""
    x = spec.coords()
    vals = np.broadcast_to(np.asarray(fn(*x), dtype=float), spec.shape)
    return ScalarField(spec, vals)


def integrate(u: ScalarField) -> float:
    """Integral under the normalized (unit-volume) measure."""
    return u.mean()


def inner(u: ScalarField, v: ScalarField) -> float:
    return float(np.mean(u.values * u._other(v)))


# spectral plumbing on raw arrays

# the trailing four axes are spatial, leading axes are batch dimensions

def fft4(values: np.ndarray) -> np.ndarray:
    return sfft.rfftn(values, axes=(-4, -3, -2, -1))


def ifft4(coeffs: np.ndarray, spec: GridSpec) -> np.ndarray:
    return sfft.irfftn(coeffs, s=spec.shape, axes=(-4, -3, -2, -1))


def spectral_inner(u: ScalarField, v: ScalarField) -> float:
    """mean(u v) evaluated from Fourier coefficients (Parseval)."""
    spec = u.spec
    uh = fft4(u.values)
    vh = fft4(u._other(v))
    s = np.sum(spec.half_weights * (uh * vh.conj()).real)
    return float(s / spec.size**2)


@dataclass(frozen=True, eq=False)
class FourierMultiplier:
    """Diagonal operator in Fourier space.

    ``symbol`` is given on the half spectrum; ``zero_mode`` is the value
    at k = 0, kept separately so mean handling stays explicit.
    """

    spec: GridSpec
    symbol: np.ndarray
    zero_mode: complex = 0.0
    name: str = field(default="multiplier")

    def __post_init__(self):
        sym = np.array(np.broadcast_to(self.symbol, self.spec.spectral_shape))
        sym[0, 0, 0, 0] = self.zero_mode
        sym.setflags(write=False)
        object.__setattr__(self, "symbol", sym)

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        return ifft4(fft4(values) * self.symbol, self.spec)


def laplacian(spec: GridSpec) -> FourierMultiplier:
    return FourierMultiplier(spec, -spec.k2, 0.0, "laplacian")


def bilaplacian(spec: GridSpec) -> FourierMultiplier:
    return FourierMultiplier(spec, spec.k2**2, 0.0, "bilaplacian")


def derivative(spec: GridSpec, axis: int) -> FourierMultiplier:
    return FourierMultiplier(spec, 1j * spec.odd_wavenumber(axis), 0.0, f"d{axis}")


def apply_multiplier(u: ScalarField, m: FourierMultiplier) -> ScalarField:
    if u.spec != m.spec:
        raise GridError(f"multiplier built for N={m.spec.n} applied to field with N={u.spec.n}")
    return ScalarField(u.spec, m.apply_array(u.values))


def solve_bilaplacian_meanzero(rhs: ScalarField, tol: float = 1e-10) -> ScalarField:
    """Unique mean-zero solution of bilap(u) = rhs."""
    m = rhs.mean()
    if abs(m) >= tol:
        raise CompatibilityError(f"rhs must have zero mean for the bi-Laplacian, mean(rhs) = {m:.3e}")
    spec = rhs.spec
    k4 = spec.k2**2
    k4[0, 0, 0, 0] = 1.0
    coeffs = fft4(rhs.values) / k4
    coeffs[0, 0, 0, 0] = 0.0
    return ScalarField(spec, ifft4(coeffs, spec))


def tail_fraction(u: ScalarField, warn: bool = True) -> float:
    """Share of spectral energy carried by modes with max |k_i| > n/3."""
    spec = u.spec
    uh = fft4(u.values)
    power = spec.half_weights * np.abs(uh) ** 2
    power[0, 0, 0, 0] = 0.0
    total = power.sum()
    if total == 0.0:
        return 0.0
    k = spec.wavenumbers
    kinf = np.maximum(np.maximum(np.abs(k[0]), np.abs(k[1])), np.maximum(np.abs(k[2]), np.abs(k[3])))
    frac = float(power[np.broadcast_to(kinf > spec.n / 3, power.shape)].sum() / total)
    if warn and frac > TAIL_WARN:
        warnings.warn(f"spectral tail fraction {frac:.2e} exceeds {TAIL_WARN:g}; grid may be under-resolved",
                      RuntimeWarning, stacklevel=2)
    return frac


def interpolate(u: ScalarField, points: np.ndarray) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``u`` at arbitrary points.

    ``points`` has shape (P, 4). The transform is contracted one axis at a
    time, which costs O(P n^4) for the first axis and less afterwards.
    """
    spec = u.spec
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    c = fft4(u.values) / spec.size
    c = c * spec.half_weights
    kf = np.fft.fftfreq(spec.n, 1.0 / spec.n)
    kh = np.arange(spec.n // 2 + 1, dtype=float)
    per_point = spec.n**2 * (spec.n // 2 + 1)
    chunk = max(1, int(4_000_000 // per_point))
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        q = pts[s:s + chunk]
        t = np.einsum("pa,abcd->pbcd", np.exp(1j * np.outer(q[:, 0], kf)), c, optimize=True)
        t = np.einsum("pb,pbcd->pcd", np.exp(1j * np.outer(q[:, 1], kf)), t)
        t = np.einsum("pc,pcd->pd", np.exp(1j * np.outer(q[:, 2], kf)), t)
        out[s:s + chunk] = np.einsum("pd,pd->p", np.exp(1j * np.outer(q[:, 3], kh)), t).real
    return out


def resample(u: ScalarField, n: int) -> ScalarField:
    """Trigonometric interpolant of ``u`` sampled on the grid with ``n`` points per axis."""
    spec = GridSpec(n)
    vals = u.values
    for ax in range(4):
        vals = signal.resample(vals, n, axis=ax)
    return ScalarField(spec, vals)


# radial engine

@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Composite Gauss-Legendre rule for 2 pi^2 * int phi(r) r^3 dr."""

    nodes: np.ndarray
    weights: np.ndarray
    breaks: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.nodes) <= 0) or self.nodes[0] < 0:
            raise GridError("radial nodes must be strictly increasing and nonnegative")
        if np.any(self.weights <= 0):
            raise GridError("radial weights must be positive")

    @property
    def r_max(self) -> float:
        return float(self.breaks[-1])

    @classmethod
    def from_breaks(cls, breaks, order: int = 20, merge_rtol: float = 1e-10) -> "RadialGrid":
        b = np.sort(np.asarray(breaks, dtype=float))
        if b.size > 1:
            keep = np.concatenate([[True], np.diff(b) > merge_rtol * np.abs(b[1:])])
            keep[-1] = True
            b = b[keep]
            if b.size > 2 and b[-1] - b[-2] <= merge_rtol * abs(b[-1]):
                b = np.delete(b, -2)
        if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
            raise GridError("panel breaks must be strictly increasing")
        x, w = leggauss(order)
        a, c = b[:-1, None], b[1:, None]
        r = (0.5 * (c - a) * x + 0.5 * (c + a)).ravel()
        wr = (0.5 * (c - a) * w).ravel()
        return cls(r, 2.0 * np.pi**2 * wr * r**3, b)

    @classmethod
    def uniform(cls, a: float, b: float, panels: int = 4, order: int = 20) -> "RadialGrid":
        return cls.from_breaks(np.linspace(a, b, panels + 1), order)

    @classmethod
    def graded(cls, a: float, b: float, panels: int = 8, order: int = 20) -> "RadialGrid":
        """Geometrically graded panels on [a, b], a > 0."""
        if a <= 0:
            raise GridError("graded radial grid needs a > 0")
        return cls.from_breaks(np.geomspace(a, b, panels + 1), order)

    @classmethod
    def log_panels(cls, a: float, b: float, per_unit: float = 1.0, order: int = 20,
                   min_panels: int = 2) -> "RadialGrid":
        """Graded panels with about ``per_unit`` panels per unit of log r."""
        panels = max(min_panels, int(np.ceil(per_unit * np.log(b / a))))
        return cls.graded(a, b, panels, order)

    def join(self, other: "RadialGrid") -> "RadialGrid":
        if other.nodes[0] <= self.nodes[-1]:
            raise GridError("radial grids must be disjoint and ordered")
        return RadialGrid(np.concatenate([self.nodes, other.nodes]),
                          np.concatenate([self.weights, other.weights]),
                          np.concatenate([self.breaks, other.breaks[1:]]))


def radial_quadrature(profile: Callable[[np.ndarray], np.ndarray], grid: RadialGrid) -> float:
    """2 pi^2 * int profile(r) r^3 dr over the grid's support."""
    vals = np.asarray(profile(grid.nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        i = int(np.argwhere(~np.isfinite(vals))[0, 0])
        raise GridError(f"non-finite radial profile value at r = {grid.nodes[i]:.6e}")
    return float(np.dot(grid.weights, vals))


# snapshots

def write_snapshot(path, u: ScalarField, lam: float) -> Path:
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, u.spec.n, float(lam)))
        fh.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes(order="C"))
    return p


def read_snapshot(path) -> tuple[ScalarField, float]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GridError(f"{path}: truncated snapshot header")
    magic, version, n, lam = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise GridError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise GridError(f"{path}: unsupported snapshot version {version}")
    spec = GridSpec(int(n))
    body = data[_HEADER.size:]
    if len(body) != 8 * spec.size:
        raise GridError(f"{path}: expected {8 * spec.size} value bytes, found {len(body)}")
    vals = np.frombuffer(body, dtype="<f8").reshape(spec.shape)
    return ScalarField(spec, vals), float(lam)
