"""Convex solve for f <= 0 and warm-started continuation of the minimizer branch."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import LinearOperator, lobpcg

from .energy import (CurvatureSignError, EnergyBreakdown, PrescribedCurvature, energy_array,
                     exp4, f_lambda_field, gradient_array, hessian_operator)
from .grid import GridSpec, ScalarField, fft4, ifft4, write_snapshot
from .paneitz import PaneitzCoefficients, _paneitz_array

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Newton iteration failed; ``trace`` holds (iteration, energy, grad max-norm)."""

    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


@dataclass(frozen=True)
class SolveOptions:
    tol_grad: float = 1e-10
    max_newton: int = 60
    ls_factor: float = 0.5
    ls_decrease: float = 1e-4
    max_backtracks: int = 40
    linear_tol: float = 1e-12
    max_linear: int = 400

    def __post_init__(self):
        if not self.tol_grad > 0:
            raise ValueError("tol_grad must be positive")


@dataclass
class SolveResult:
    u: ScalarField
    breakdown: EnergyBreakdown
    grad_norm: float
    iterations: int
    trace: list = field(default_factory=list)


def spectral_preconditioner(spec: GridSpec, scale: float, shift: float):
    """Inverse of scale * |k|^4 + shift, applied spectrally."""
    sym = 1.0 / (scale * spec.k2**2 + shift)

    def apply(r: np.ndarray) -> np.ndarray:
        return ifft4(fft4(r) * sym, spec)

    return apply


def pcg(apply_A, b, apply_M, rtol, maxiter):
    """Preconditioned CG in the mean inner product.

    Returns (x, info) with info 0 on convergence, 1 on hitting maxiter and
    -1 when a direction of nonpositive curvature is met.
    """
    x = np.zeros_like(b)
    r = b.copy()
    z = apply_M(r)
    p = z.copy()
    rz = float(np.mean(r * z))
    bnorm = float(np.sqrt(np.mean(b * b)))
    if bnorm == 0.0:
        return x, 0
    for _ in range(maxiter):
        Ap = apply_A(p)
        pAp = float(np.mean(p * Ap))
        if pAp <= 0.0:
            return x, -1
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if np.sqrt(np.mean(r * r)) <= rtol * bnorm:
            return x, 0
        z = apply_M(r)
        rz_new = float(np.mean(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, 1


def _newton(u, f, Q0, c, opts: SolveOptions, label: str) -> SolveResult:
    spec = c.spec
    u = np.array(u, dtype=float)
    trace = []
    for it in range(opts.max_newton + 1):
        br = energy_array(u, f, Q0, c)
        g = gradient_array(u, f, Q0, c)
        gn = float(np.abs(g).max())
        trace.append((it, br.total, gn))
        if gn <= opts.tol_grad:
            return SolveResult(ScalarField(spec, u), br, gn, it, trace)
        if it == opts.max_newton:
            break
        H = hessian_operator(u, f, c)
        shift = 16.0 * float(np.mean(np.abs(f) * exp4(u))) + 1e-12
        M = spectral_preconditioner(spec, 2.0, shift)
        eta = max(opts.linear_tol, min(1e-2, gn))
        d, info = pcg(H, -g, M, eta, opts.max_linear)
        if info < 0:
            raise SolverError(f"{label}: Hessian lost positive definiteness at iteration {it}", trace)
        slope = float(np.mean(g * d))
        if slope >= 0:
            raise SolverError(f"{label}: Newton direction is not a descent direction", trace)
        t = 1.0
        E0 = br.total
        for _ in range(opts.max_backtracks):
            trial = u + t * d
            try:
                E1 = energy_array(trial, f, Q0, c).total
            except FloatingPointError:
                E1 = np.inf
            if E1 <= E0 + opts.ls_decrease * t * slope:
                break
            # below rounding level the energy carries no information; use the residual
            if np.isfinite(E1) and abs(E1 - E0) <= 1e-13 * (1.0 + abs(E0)):
                g1 = np.abs(gradient_array(trial, f, Q0, c)).max()
                if g1 < gn:
                    break
            t *= opts.ls_factor
        else:
            raise SolverError(f"{label}: line search failed at iteration {it} (grad {gn:.3e})", trace)
        u = trial
    raise SolverError(f"{label}: no convergence in {opts.max_newton} Newton steps "
                      f"(grad {trace[-1][2]:.3e})", trace)


def solve_unique_min(f: ScalarField, Q0: float, c: PaneitzCoefficients,
                     opts: SolveOptions = SolveOptions(), init: ScalarField | None = None) -> SolveResult:
    """Unique minimizer of E_f for f <= 0 (strictly convex case)."""
    if not Q0 < 0:
        raise ValueError(f"Q0 must be negative, got {Q0}")
    if np.any(f.values > 0):
        raise CurvatureSignError(f"f must be <= 0 for the convex solve; max(f) = {f.values.max():.3e}")
    if not np.any(f.values):
        raise CurvatureSignError("f vanishes identically")
    u0 = np.zeros(f.spec.shape) if init is None else init.values
    return _newton(u0, f.values, Q0, c, opts, "convex solve")


def newton_critical(f: ScalarField, Q0: float, c: PaneitzCoefficients, init: ScalarField,
                    opts: SolveOptions = SolveOptions()) -> SolveResult:
    """Damped Newton from ``init`` without sign restrictions on f."""
    return _newton(init.values, f.values, Q0, c, opts, "newton")


# smallest eigenvalue of the Hessian pencil

@dataclass(frozen=True)
class NuEstimate:
    value: float
    converged: bool
    residual: float
    lower: float = -np.inf
    vector: np.ndarray | None = field(default=None, repr=False)

    @property
    def sign(self) -> int | None:
        """+1/-1 when certified, None when inconclusive.

        A negative Rayleigh quotient always certifies a negative direction;
        a positive one counts once the iteration has converged or the
        rigorous lower bound is itself positive.
        """
        if self.value < 0:
            return -1
        return 1 if (self.converged or self.lower > 0) else None


def _pencil(u: np.ndarray, f: np.ndarray, c: PaneitzCoefficients):
    spec = c.spec
    n = spec.size
    weight = 8.0 * f * exp4(u)
    shape = spec.shape
    shift = 1.0 + 8.0 * float(np.mean(np.abs(f) * exp4(u)))
    prec_sym = 1.0 / (spec.k2**2 + shift)

    def batch(X):
        X = np.asarray(X).reshape(n, -1)
        return X.T.reshape((X.shape[1],) + shape)

    def unbatch(W):
        return W.reshape(W.shape[0], n).T

    def a_mat(X):
        W = batch(X)
        return unbatch(_paneitz_array(W, c) - weight * W)

    def b_mat(X):
        W = batch(X)
        return unbatch(_paneitz_array(W, c) + W)

    def m_mat(X):
        return unbatch(ifft4(fft4(batch(X)) * prec_sym, spec))

    mk = lambda fn: LinearOperator((n, n), matvec=fn, matmat=fn, dtype=float)
    return mk(a_mat), mk(b_mat), mk(m_mat), a_mat, b_mat


def pencil_lower_bound(u: ScalarField, f: ScalarField) -> float:
    """Rigorous lower bound min(1, 8 min(-f e^{4u})) for the pencil minimum.

    Follows from 8 mean(m w^2) - mean(w^2) >= (8 min m - 1) mean(w^2) and
    mean(w^2) <= <Pw,w> + mean(w^2).
    """
    m = -f.values * exp4(u.values)
    return float(min(1.0, 8.0 * m.min()))


def smallest_pencil_eigen(u: ScalarField, f: ScalarField, c: PaneitzCoefficients,
                          block: int = 4, tol: float = 1e-5, maxiter: int = 150,
                          seed: int = 0, guess: np.ndarray | None = None) -> NuEstimate:
    """Smallest eigenvalue of (1/2 D^2 E_f(u), P + I) by LOBPCG.

    ``value`` is the best Rayleigh quotient, an upper bound for the true
    minimum. ``lower`` is the rigorous bound from :func:`pencil_lower_bound`;
    when it is positive the sign is certified even if LOBPCG stalls in the
    cluster of high modes.
    """
    spec = c.spec
    A, B, M, a_mat, b_mat = _pencil(u.values, f.values, c)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((spec.size, block))
    X[:, 0] = 1.0
    if guess is not None:
        X[:, 1] = np.ravel(guess)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        vals, vecs = lobpcg(A, X, B=B, M=M, tol=tol, maxiter=maxiter, largest=False)
    i = int(np.argmin(vals))
    v = vecs[:, i:i + 1]
    Av, Bv = a_mat(v), b_mat(v)
    theta = float((v.T @ Av)[0, 0] / (v.T @ Bv)[0, 0])
    res = float(np.linalg.norm(Av - theta * Bv) / np.linalg.norm(Bv))
    lower = pencil_lower_bound(u, f)
    return NuEstimate(theta, res <= 10 * tol, res, lower, v[:, 0].reshape(spec.shape))


def verify_relative_min(u: ScalarField, f: ScalarField, c: PaneitzCoefficients, **kw) -> NuEstimate:
    return smallest_pencil_eigen(u, f, c, **kw)


# branch continuation

@dataclass(frozen=True)
class BranchEntry:
    lam: float
    u: ScalarField
    breakdown: EnergyBreakdown
    nu: NuEstimate
    volume: float
    grad_norm: float
    kp_residual: float


@dataclass
class Branch:
    entries: list
    lambda_fail: float | None = None
    reason: str = ""

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    @property
    def truncated(self) -> bool:
        return self.lambda_fail is not None

    def entry_at(self, lam: float) -> BranchEntry:
        for e in self.entries:
            if abs(e.lam - lam) <= 1e-14 * max(1.0, abs(lam)):
                return e
        raise KeyError(lam)


def _entry(lam, res: SolveResult, f: ScalarField, Q0, c, nu: NuEstimate) -> BranchEntry:
    e4 = exp4(res.u.values)
    return BranchEntry(lam, res.u, res.breakdown, nu, float(e4.mean()), res.grad_norm,
                       float(np.mean(f.values * e4)) - Q0)


def continue_branch(pc: PrescribedCurvature, Q0: float, lambdas, spec: GridSpec,
                    c: PaneitzCoefficients | None = None, opts: SolveOptions = SolveOptions(),
                    nu_tol: float = 1e-5) -> Branch:
    """Follow the strict relative minimizers from lam = 0 along ``lambdas``.

    The branch stops at the first lam where Newton fails or the Hessian
    pencil estimate is not certified positive; that lam is reported as
    the empirical end of the stability window.
    """
    lams = np.asarray(lambdas, dtype=float)
    if lams.size and (np.any(np.diff(lams) <= 0) or lams[0] <= 0):
        raise ValueError("lambda grid must be positive and strictly increasing")
    c = PaneitzCoefficients.flat(spec) if c is None else c
    f0 = f_lambda_field(pc.with_lambda(0.0), spec)
    res = solve_unique_min(f0, Q0, c, opts)
    nu = verify_relative_min(res.u, f0, c, tol=nu_tol)
    entries = [_entry(0.0, res, f0, Q0, c, nu)]
    branch = Branch(entries)
    for lam in lams:
        f = f_lambda_field(pc.with_lambda(lam), spec)
        try:
            res = newton_critical(f, Q0, c, entries[-1].u, opts)
        except (SolverError, FloatingPointError) as exc:
            branch.lambda_fail, branch.reason = float(lam), f"newton: {exc}"
            break
        nu = verify_relative_min(res.u, f, c, tol=nu_tol, guess=entries[-1].nu.vector)
        if nu.sign != 1:
            branch.lambda_fail = float(lam)
            branch.reason = f"nu_est = {nu.value:.3e} (converged={nu.converged})"
            break
        entries.append(_entry(float(lam), res, f, Q0, c, nu))
        log.info("branch lam=%.4g E=%.10g nu=%.4g", lam, res.breakdown.total, nu.value)
    return branch


def write_branch(branch: Branch, directory) -> list:
    """Snapshots plus a CSV index; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    index = d / "branch.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "quadratic", "linear", "exponential", "total", "nu_est",
                    "nu_converged", "volume", "grad_norm", "kp_residual", "snapshot"])
        for i, e in enumerate(branch.entries):
            snap = d / f"u_{i:04d}.qc4f"
            write_snapshot(snap, e.u, e.lam)
            paths.append(snap)
            b = e.breakdown
            w.writerow([repr(e.lam), repr(b.quadratic), repr(b.linear), repr(b.exponential),
                        repr(b.total), repr(e.nu.value), int(e.nu.converged), repr(e.volume),
                        repr(e.grad_norm), repr(e.kp_residual), snap.name])
    paths.insert(0, index)
    return paths
