"""Bubble profiles, rescaling at concentration points and mass diagnostics.

Masses and volumes here are integrals in the coordinate measure dx on
[0, 2pi)^4 (the grid mean times VOLUME), the scale in which a bubble
carries 16 pi^2 and the weight threshold is 8 pi^2.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comparison import tau
from .energy import PrescribedCurvature, exp4, f_lambda_field
from .grid import VOLUME, GridSpec, RadialGrid, ScalarField, interpolate, radial_quadrature

BUBBLE_A = 4.0 * np.sqrt(6.0)
BUBBLE_VOLUME = 16.0 * np.pi**2
MASS_THRESHOLD = 4.0 * np.pi**2
WEIGHT_UNIT = 8.0 * np.pi**2
WEIGHT_WINDOW = (1.0, 1.5)


class ResolutionError(ValueError):
    """Concentration scale too small (or too large) for the grid."""


# bubble ------------------------------------------------------------------------

class BubbleProfile:
    """w(r) = -log(1 + r^2/a), a = 4 sqrt(6), with closed-form radial derivatives.

    With s = a + r^2 the derivatives are rational in r; the two
    combinations that are singular termwise at r = 0 (d3/r and d2 - d1/r)
    are provided in simplified form.
    """

    a = BUBBLE_A

    def _s(self, r):
        r = np.asarray(r, dtype=float)
        return r, self.a + r * r

    def w(self, r):
        r, s = self._s(r)
        return -np.log1p(r * r / self.a)

    def d1(self, r):
        r, s = self._s(r)
        return -2.0 * r / s

    def d2(self, r):
        r, s = self._s(r)
        return -2.0 * (self.a - r * r) / s**2

    def d3(self, r):
        r, s = self._s(r)
        return 4.0 * r * (3.0 * self.a - r * r) / s**3

    def d4(self, r):
        r, s = self._s(r)
        a = self.a
        return 12.0 * (a * a - 6.0 * a * r * r + r**4) / s**4

    def d3_over_r(self, r):
        r, s = self._s(r)
        return 4.0 * (3.0 * self.a - r * r) / s**3

    def d2_minus_d1_over_r(self, r):
        r, s = self._s(r)
        return 4.0 * r * r / s**2

    def laplacian(self, r):
        r, s = self._s(r)
        return -4.0 * (2.0 * self.a + r * r) / s**2

    def bilaplacian(self, r):
        """Radial bi-Laplacian in R^4: f'''' + 6 f'''/r + (3/r^2)(f'' - f'/r)."""
        r, s = self._s(r)
        return self.d4(r) + 6.0 * self.d3_over_r(r) + 12.0 / s**2

    def density(self, r):
        return np.exp(4.0 * self.w(r))


BUBBLE = BubbleProfile()


def bubble_residual(r_values) -> float:
    """max |Delta^2 w - e^{4w}| over the given radii."""
    r = np.asarray(r_values, dtype=float)
    if np.any(r < 0) or np.any(r > 1e3):
        raise ValueError("radii must lie in [0, 1e3]")
    return float(np.max(np.abs(BUBBLE.bilaplacian(r) - BUBBLE.density(r))))


def _tail_t(T):
    # int_T^inf t/(1+t)^4 dt
    return 0.5 / (1.0 + T) ** 2 - 1.0 / (3.0 * (1.0 + T) ** 3)


def bubble_volume(R: float = 100.0, order: int = 24) -> float:
    """2 pi^2 int_0^inf e^{4w} r^3 dr: quadrature on [0, R] plus the exact tail."""
    grid = RadialGrid.log_panels(1e-3, R, per_unit=4, order=order, min_panels=4)
    grid = RadialGrid.join(RadialGrid.from_breaks([0.0, 1e-3], order=order), grid)
    core = radial_quadrature(BUBBLE.density, grid)
    a = BUBBLE.a
    return core + np.pi**2 * a * a * _tail_t(R * R / a)


def bubble_volume_fraction(R: float) -> float:
    """Share of the bubble volume inside radius R (closed form)."""
    return 1.0 - 6.0 * _tail_t(R * R / BUBBLE.a)


# fixtures -------------------------------------------------------------------------

def _periodic_offsets(spec: GridSpec, center):
    """Signed periodic offsets x - center in (-pi, pi], per axis (sparse)."""
    out = []
    for ax, (xa, ca) in enumerate(zip(spec.coords(), center)):
        d = np.mod(xa - ca + np.pi, 2.0 * np.pi) - np.pi
        out.append(d)
    return out


def _distance(spec: GridSpec, center):
    d = _periodic_offsets(spec, center)
    return np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2 + d[3] ** 2)


def min_resolved_scale(spec: GridSpec, cells: float = 8.0) -> float:
    """Smallest r whose bubble core (diameter 2 sqrt(a) r) spans ``cells`` grid cells."""
    return cells * spec.spacing / (2.0 * np.sqrt(BUBBLE.a))


def implant_bubble(spec: GridSpec, r: float, C: float, center=(0.0,) * 4, far: float | None = None,
                   blend_radius: float = 2.5) -> np.ndarray:
    """w(|x - x0|/r) + C near x0, blended smoothly into a periodic far field.

    The default far field -log(1 + D/(a r^2)) + C, D = sum 4 sin^2((x_i - x0_i)/2),
    is the periodic analogue of the bubble, so the blend only joins two
    nearby smooth functions; a constant ``far`` is also accepted.
    """
    if not blend_radius < np.pi:
        raise ValueError("blend radius must stay below pi")
    rho = _distance(spec, center)
    chi = tau(rho / blend_radius)[0]
    if far is None:
        D = sum(4.0 * np.sin(0.5 * d) ** 2 for d in _periodic_offsets(spec, center))
        outer = -np.log1p(D / (BUBBLE.a * r * r)) + C
    else:
        outer = far
    return chi * (BUBBLE.w(rho / r) + C) + (1.0 - chi) * outer


def case_a_constant(r: float, lam: float) -> float:
    """Peak value C with r^4 lam e^{4C} = 1/2."""
    return -np.log(r) - 0.25 * np.log(2.0 * lam)


def case_b_scale(lam: float, pc: PrescribedCurvature, c: float) -> float:
    """r with r^4 = lam^2 / (c alpha_4^2)."""
    return (lam * lam / (c * pc.alphas[-1] ** 2)) ** 0.25


def synthetic_blowup(lam: float, case: str, pc: PrescribedCurvature, spec: GridSpec, r: float | None = None,
                     c: float = 1.0, center=(0.0,) * 4, far: float | None = None, blend_radius: float = 2.5,
                     cells: float = 8.0) -> ScalarField:
    """Field with one bubble at a maximum point of f_0.

    Case 'a' uses the given r (default: the smallest resolved one) and the
    peak value fixed by r^4 lam e^{4u(x0)} = 1/2. Case 'b' uses the scale
    r^4 = lam^2/(c alpha_4^2) and shifts the profile by -(3/4) log lam - log c,
    so the case-b rescaling returns w exactly.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    rmin = min_resolved_scale(spec, cells)
    if case == "a":
        r = rmin if r is None else float(r)
        C = case_a_constant(r, lam)
    elif case == "b":
        r = case_b_scale(lam, pc, c)
        C = -0.75 * np.log(lam) - np.log(c)
    else:
        raise ValueError("case must be 'a' or 'b'")
    if r < rmin * (1 - 1e-12):
        raise ResolutionError(f"bubble scale r = {r:.4g} below the resolved minimum {rmin:.4g} for N={spec.n}")
    if np.sqrt(BUBBLE.a) * r > 0.5 * blend_radius:
        raise ResolutionError(f"bubble core (r = {r:.4g}) does not fit inside the plateau of the blend "
                              f"(radius {blend_radius / 2:.4g})")
    return ScalarField(spec, implant_bubble(spec, r, C, center, far, blend_radius))


# detection and rescaling --------------------------------------------------------

@dataclass(frozen=True)
class Peak:
    index: tuple
    location: tuple
    value: float
    blowup: bool


def _f_values(f, spec, lam):
    if isinstance(f, PrescribedCurvature):
        return f_lambda_field(f.with_lambda(lam if lam is not None else f.lam), spec).values
    if isinstance(f, ScalarField):
        return f.values
    return np.broadcast_to(np.asarray(f, dtype=float), spec.shape)


def detect_peaks(u: ScalarField, f, lam: float | None = None, threshold: float = 1.0) -> list:
    """Local maxima of u on K = {f_lam >= 0}, sorted by value (largest first).

    ``f`` is a PrescribedCurvature (evaluated at ``lam``) or a field. A peak
    counts as blow-up when it exceeds the median of u by ``threshold``.
    Plateaus without strict maxima yield a single representative point.
    """
    spec = u.spec
    fv = _f_values(f, spec, lam)
    K = fv >= 0
    if not K.any():
        return []
    v = u.values
    strict = np.ones(spec.shape, dtype=bool)
    offsets = [o for o in np.ndindex(3, 3, 3, 3) if o != (1, 1, 1, 1)]
    for o in offsets:
        strict &= v > np.roll(v, tuple(int(x) - 1 for x in o), axis=(0, 1, 2, 3))
    cand = np.argwhere(strict & K)
    med = float(np.median(v))
    if cand.size == 0:
        idx = np.unravel_index(np.argmax(np.where(K, v, -np.inf)), spec.shape)
        cand = np.array([idx])
    peaks = []
    for idx in cand:
        t = tuple(int(i) for i in idx)
        loc = tuple(float(spec.axis[i]) for i in t)
        val = float(v[t])
        peaks.append(Peak(t, loc, val, val - med > threshold))
    peaks.sort(key=lambda p: -p.value)
    return peaks


def _directions():
    e = np.eye(4)
    dirs = [s * e[i] for i in range(4) for s in (1.0, -1.0)]
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            dirs.append(np.array([sx, sy, sx * sy, 1.0]) / 2.0)
    return np.array(dirs)


@dataclass
class RescaleResult:
    case: str
    r: float
    ratio: float  # r / sqrt(lam)
    radii: np.ndarray = field(repr=False)
    profile: np.ndarray = field(repr=False)  # direction-averaged rescaled profile
    samples: np.ndarray = field(repr=False)  # (n_dir, n_r)
    profile_error: float = float("nan")
    fitted_constant: float = 0.0
    limit_curvature: np.ndarray | None = field(default=None, repr=False)
    peak_value: float = float("nan")


def _rescaled_samples(u, center, r, radii, shift):
    dirs = _directions()
    pts = np.asarray(center)[None, None, :] + r * radii[None, :, None] * dirs[:, None, :]
    vals = interpolate(u, pts.reshape(-1, 4)).reshape(len(dirs), len(radii))
    return vals + shift


def _check_scale(u: ScalarField, r: float, cells: float):
    spec = u.spec
    if not r < 2.0 * np.pi / 8.0:
        raise ResolutionError(f"scale r = {r:.4g} exceeds an eighth of the period")
    rmin = min_resolved_scale(spec, cells)
    if r < rmin * (1 - 1e-12):
        raise ResolutionError(f"scale r = {r:.4g} under-resolved on N={spec.n} (needs >= {rmin:.4g})")


def _finish(case, r, lam, radii, samples, fit, peak, h=None):
    prof = samples.mean(axis=0)
    diff = samples - BUBBLE.w(radii)[None, :]
    const = 0.5 * (diff.max() + diff.min()) if fit else 0.0
    err = float(np.abs(diff - const).max())
    return RescaleResult(case, float(r), float(r / np.sqrt(lam)), radii, prof, samples, err, float(const), h, peak)


def rescale_case_a(u: ScalarField, lam: float, center, R: float = 2.0, n_r: int = 21, fit: bool = False,
                   cells: float = 8.0) -> RescaleResult:
    """r = (1/(2 lam e^{4u(x_n)}))^{1/4}, profile u(x_n + r x) - u(x_n) on |x| <= R.

    ``center`` is a grid index tuple or a point; the peak value is read from
    the spectral interpolant. ``fit`` subtracts the one constant that best
    matches w in the sup norm.
    """
    center = _as_point(u.spec, center)
    un = float(interpolate(u, np.array([center]))[0])
    r = (1.0 / (2.0 * lam * np.exp(4.0 * un))) ** 0.25
    _check_scale(u, r, cells)
    radii = np.linspace(0.0, R, n_r)
    samples = _rescaled_samples(u, center, r, radii, -un)
    return _finish("a", r, lam, radii, samples, fit, un)


def limit_curvature(pc: PrescribedCurvature, x) -> np.ndarray:
    """h(x) = 1 + (1/2) D^2 f_0 [x, x] at the maximum point."""
    x = np.asarray(x, dtype=float)
    H = pc.hessian()
    return 1.0 + 0.5 * np.einsum("...i,ij,...j->...", x, H, x)


def rescale_case_b(u: ScalarField, lam: float, pc: PrescribedCurvature, c: float, center=(0.0,) * 4,
                   R: float = 2.0, n_r: int = 21, fit: bool = False, cells: float = 8.0) -> RescaleResult:
    """r^4 = lam^2/(c alpha_4^2), profile u(x_n + r x) + (3/4) log lam + log c.

    The limit curvature h(x) = 1 + D^2 f_0[x, x]/2 is returned at the
    sample points for comparison.
    """
    if not c > 0:
        raise ValueError("case-b constant c must be positive")
    center = _as_point(u.spec, center)
    r = case_b_scale(lam, pc, c)
    _check_scale(u, r, cells)
    radii = np.linspace(0.0, R, n_r)
    samples = _rescaled_samples(u, center, r, radii, 0.75 * np.log(lam) + np.log(c))
    pts = radii[None, :, None] * _directions()[:, None, :]
    un = float(interpolate(u, np.array([center]))[0])
    return _finish("b", r, lam, radii, samples, fit, un, limit_curvature(pc, pts))


def _as_point(spec, center):
    c = tuple(center)
    if all(isinstance(i, (int, np.integer)) for i in c):
        return np.array([spec.axis[int(i)] for i in c])
    return np.asarray(c, dtype=float)


# masses --------------------------------------------------------------------------

@dataclass(frozen=True)
class MassReport:
    mass_abs: float
    mass_pos: float
    weight: float

    @property
    def above_threshold(self) -> bool:
        return self.mass_pos >= MASS_THRESHOLD

    @property
    def weight_in_window(self) -> bool:
        return WEIGHT_WINDOW[0] <= self.weight <= WEIGHT_WINDOW[1]


def concentration_mass(u: ScalarField, f, lam: float | None, center, radius: float) -> MassReport:
    """int_{B_r(x0)} |f| e^{4u} dx and its positive-part version (grid quadrature).

    ``weight`` is the signed mass int_B f e^{4u} dx divided by 8 pi^2.
    """
    spec = u.spec
    if not 0 < radius < np.pi:
        raise ValueError("ball must lie inside one period (0 < radius < pi)")
    center = _as_point(spec, center)
    fv = _f_values(f, spec, lam)
    inside = _distance(spec, center) < radius
    dens = exp4(u.values)
    scale = VOLUME / spec.size
    m_abs = float(np.sum(np.abs(fv) * dens, where=inside)) * scale
    m_pos = float(np.sum(np.maximum(fv, 0.0) * dens, where=inside)) * scale
    signed = float(np.sum(fv * dens, where=inside)) * scale
    return MassReport(m_abs, m_pos, signed / WEIGHT_UNIT)


# control ellipsoids -----------------------------------------------------------------

@dataclass(frozen=True)
class EllipsoidCheck:
    inner_in_K: bool
    K_in_outer: bool
    n_inner: int
    n_K: int

    @property
    def ok(self) -> bool:
        return self.inner_in_K and self.K_in_outer


def ellipsoid_check(pc: PrescribedCurvature, lam: float, spec: GridSpec) -> EllipsoidCheck:
    """Grid test of Theta_2 in K in Theta_1 for K = {f_lam >= 0} near the maximum.

    Theta_1 has semi-axes sqrt(2 lam/alpha_i), Theta_2 sqrt(2 lam/(3 alpha_i)).
    """
    d = _periodic_offsets(spec, (0.0,) * 4)
    q = sum(a * di**2 for a, di in zip(pc.alphas, d))
    q = np.broadcast_to(q, spec.shape)
    K = f_lambda_field(pc.with_lambda(lam), spec).values >= 0
    inner = q <= 2.0 * lam / 3.0
    outer = q <= 2.0 * lam
    return EllipsoidCheck(bool(np.all(K[inner])), bool(np.all(outer[K])), int(inner.sum()), int(K.sum()))


# analysis driver ----------------------------------------------------------------------

@dataclass
class PeakRow:
    lam: float
    location: tuple
    value: float
    case: str
    r: float
    ratio: float
    profile_error: float
    mass: MassReport
    flags: list = field(default_factory=list)


@dataclass
class BlowupReport:
    lam: float
    peaks: list
    rows: list
    mean_drop: bool


def analyze(u: ScalarField, pc: PrescribedCurvature, lam: float, radius: float = 1.0, c: float = 1.0,
            case_ratio: float = 0.5, mean_floor: float = -50.0, max_peaks: int = 8, fit: bool = True,
            cells: float = 8.0) -> BlowupReport:
    """Detect peaks, rescale each (case a when r/sqrt(lam) < case_ratio) and measure masses."""
    peaks = detect_peaks(u, pc, lam)
    rows = []
    for p in [p for p in peaks if p.blowup][:max_peaks]:
        flags = []
        try:
            res = rescale_case_a(u, lam, p.index, fit=fit, cells=cells)
            if res.ratio >= case_ratio:
                res = rescale_case_b(u, lam, pc, c, p.index, fit=fit, cells=cells)
        except ResolutionError as exc:
            flags.append(f"unresolved: {exc}")
            res = None
        m = concentration_mass(u, pc, lam, p.index, radius)
        if not m.above_threshold:
            flags.append("mass below 4pi^2")
        if not m.weight_in_window:
            flags.append("weight outside [1, 3/2]")
        rows.append(PeakRow(lam, p.location, p.value, res.case if res else "-",
                            res.r if res else float("nan"), res.ratio if res else float("nan"),
                            res.profile_error if res else float("nan"), m, flags))
    return BlowupReport(lam, peaks, rows, float(u.mean()) < mean_floor)


def write_peaks_csv(report: BlowupReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lambda", "x1", "x2", "x3", "x4", "u_peak", "case", "r_n", "r_over_sqrt_lambda",
                     "profile_error", "mass_abs", "mass_pos", "weight", "flags"])
        for r in report.rows:
            wr.writerow([f"{r.lam:.12g}", *(f"{x:.12g}" for x in r.location), f"{r.value:.12g}", r.case,
                         f"{r.r:.12g}", f"{r.ratio:.12g}", f"{r.profile_error:.6e}", f"{r.mass.mass_abs:.12g}",
                         f"{r.mass.mass_pos:.12g}", f"{r.mass.weight:.12g}", ";".join(r.flags)])
    return path


def write_profile_csv(result: RescaleResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "value"])
        for x, y in zip(result.radii, result.profile):
            wr.writerow([f"{x:.12g}", f"{y:.15g}"])
    return path
