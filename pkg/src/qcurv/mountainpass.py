"""Discrete mountain-pass machinery: paths, string optimization, saddle refinement.

The algorithms act on a generic :class:`EnergyModel` so the same code runs on
grid fields and on small analytic test energies. States are numpy arrays of
a fixed shape; the model supplies the energy, its L2 gradient, Hessian
products, the H^2 inner product used for arclength and distances, and a
symmetric positive preconditioner for descent and Krylov solves.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import LinearOperator, minres

from .energy import energy_array, exp4, gradient_array, hessian_operator
from .grid import GridSpec, ScalarField, fft4, ifft4
from .minimizer import NuEstimate, smallest_pencil_eigen
from .paneitz import PaneitzCoefficients, _form_arrays

log = logging.getLogger(__name__)


class PathError(ValueError):
    """Invalid path endpoints."""


class SaddleRejected(RuntimeError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


class EnergyModel:
    """Interface; subclasses implement the numerical kernels."""

    def energy(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian_apply(self, x, v) -> np.ndarray:
        raise NotImplementedError

    def inner(self, a, b) -> float:
        """Metric used for arclength, tangents and distances."""
        raise NotImplementedError

    def pairing(self, g, v) -> float:
        """Duality pairing of a gradient with a direction (dE[v])."""
        raise NotImplementedError

    def precondition(self, x, g) -> np.ndarray:
        return g

    def nu_estimate(self, x) -> NuEstimate:
        raise NotImplementedError

    def entropy(self, x) -> float:
        return float("nan")

    def norm(self, a) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))


class FieldEnergy(EnergyModel):
    """E_f on grid fields with the H^2 metric <Pu, v> + mean(u v)."""

    def __init__(self, f: ScalarField, Q0: float, c: PaneitzCoefficients | None = None):
        self.spec: GridSpec = f.spec
        self.f = f.values
        self.Q0 = float(Q0)
        self.c = PaneitzCoefficients.flat(self.spec) if c is None else c

    def with_f(self, f: ScalarField) -> "FieldEnergy":
        return FieldEnergy(f, self.Q0, self.c)

    def energy(self, x):
        return energy_array(x, self.f, self.Q0, self.c).total

    def gradient(self, x):
        return gradient_array(x, self.f, self.Q0, self.c)

    def hessian_apply(self, x, v):
        return hessian_operator(x, self.f, self.c)(v)

    def inner(self, a, b):
        return _form_arrays(a, b, self.c) + float(np.mean(a * b))

    def pairing(self, g, v):
        return float(np.mean(g * v))

    def _shift(self, x):
        return 16.0 * float(np.mean(np.abs(self.f) * exp4(x))) + 1.0

    def precondition(self, x, g):
        sym = 1.0 / (2.0 * self.spec.k2**2 + self._shift(x))
        return ifft4(fft4(g) * sym, self.spec)

    def nu_estimate(self, x, **kw):
        return smallest_pencil_eigen(ScalarField(self.spec, x), ScalarField(self.spec, self.f), self.c, **kw)

    def entropy(self, x):
        return float(np.mean(exp4(x)))


class ToyEnergy(EnergyModel):
    """E(x, y) = x^2/2 - x^3/3 + beta/2 (y - kappa x^2)^2.

    Minimum at the origin, a single saddle at (1, kappa) with value 1/6;
    the point (2, 4 kappa) lies below the minimum at level -2/3. For
    kappa != 0 the straight segment between them misses the curved valley.
    ``mu`` adds -mu * (1 + x^2) so the family decreases in mu pointwise.
    """

    def __init__(self, beta: float = 4.0, kappa: float = 0.5, mu: float = 0.0):
        self.beta, self.kappa, self.mu = float(beta), float(kappa), float(mu)

    saddle_value = 1.0 / 6.0

    def saddle(self):
        return np.array([1.0, self.kappa])

    def energy(self, p):
        x, y = p
        r = y - self.kappa * x * x
        return float(0.5 * x * x - x**3 / 3.0 + 0.5 * self.beta * r * r - self.mu * (1 + x * x))

    def gradient(self, p):
        x, y = p
        r = y - self.kappa * x * x
        return np.array([x - x * x - 2.0 * self.beta * self.kappa * x * r - 2 * self.mu * x, self.beta * r])

    def hessian(self, p):
        x, y = p
        b, k = self.beta, self.kappa
        r = y - k * x * x
        hxx = 1.0 - 2.0 * x - 2.0 * b * k * r + 4.0 * b * k * k * x * x - 2 * self.mu
        hxy = -2.0 * b * k * x
        return np.array([[hxx, hxy], [hxy, b]])

    def hessian_apply(self, p, v):
        return self.hessian(p) @ v

    def inner(self, a, b):
        return float(np.dot(a, b))

    def pairing(self, g, v):
        return float(np.dot(g, v))

    def nu_estimate(self, p, **kw):
        w, V = np.linalg.eigh(0.5 * self.hessian(p))
        return NuEstimate(float(w[0]), True, 0.0, float(w[0]), V[:, 0])

    def entropy(self, p):
        return float(1 + p[0] ** 2)


# paths ----------------------------------------------------------------------

@dataclass
class Path:
    nodes: np.ndarray  # (M+1, *state_shape)
    start: np.ndarray = field(repr=False, default=None)
    end: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float)
        if self.start is None:
            self.start = self.nodes[0].copy()
        if self.end is None:
            self.end = self.nodes[-1].copy()

    @property
    def M(self) -> int:
        return self.nodes.shape[0] - 1

    def pin(self):
        self.nodes[0] = self.start
        self.nodes[-1] = self.end

    def energies(self, model: EnergyModel) -> np.ndarray:
        return np.array([model.energy(x) for x in self.nodes])


def initial_path(u0, v, M: int, model: EnergyModel | None = None, reference: float | None = None) -> Path:
    """Straight path u0 -> v with M segments.

    With ``model`` and ``reference`` (energy of the branch minimizer) the
    endpoint must lie strictly below the reference level.
    """
    u0 = np.asarray(u0, dtype=float)
    v = np.asarray(v, dtype=float)
    if M < 1:
        raise PathError("need at least one segment")
    if model is not None and reference is not None:
        ev = model.energy(v)
        if not ev < reference:
            raise PathError(f"endpoint not below minimizer: E(v) = {ev:.6g} >= {reference:.6g}; "
                            "increase the ray parameter s")
    t = np.linspace(0.0, 1.0, M + 1).reshape((-1,) + (1,) * u0.ndim)
    return Path((1 - t) * u0 + t * v, u0.copy(), v.copy())


def _arclength(model, X):
    seg = np.array([model.norm(X[j + 1] - X[j]) for j in range(len(X) - 1)])
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return s / s[-1] if s[-1] > 0 else np.linspace(0, 1, len(X))


def _respace(model, X):
    a = _arclength(model, X)
    keep = np.concatenate([[True], np.diff(a) > 1e-14])
    spline = CubicSpline(a[keep], X[keep], axis=0)
    out = spline(np.linspace(0.0, 1.0, X.shape[0]))
    out[0], out[-1] = X[0], X[-1]
    return out


def reparametrize(model: EnergyModel, path: Path, fixed: int | None = None) -> Path:
    """Equal spacing in the model metric by cubic-spline interpolation.

    With ``fixed`` the node of that index stays put and the two pieces on
    either side are redistributed separately.
    """
    X = path.nodes
    if fixed is None or fixed <= 1 or fixed >= path.M - 1:
        Xn = _respace(model, X)
    else:
        Xn = np.concatenate([_respace(model, X[: fixed + 1])[:-1], _respace(model, X[fixed:])])
    out = Path(Xn, path.start, path.end)
    out.pin()
    return out


def _tangents(model, X, E):
    """Energy-weighted upwind tangents, normalized in the metric."""
    T = np.zeros_like(X)
    for i in range(1, len(X) - 1):
        tp, tm = X[i + 1] - X[i], X[i] - X[i - 1]
        if E[i + 1] > E[i] > E[i - 1]:
            t = tp
        elif E[i + 1] < E[i] < E[i - 1]:
            t = tm
        else:
            dmax = max(abs(E[i + 1] - E[i]), abs(E[i - 1] - E[i]))
            dmin = min(abs(E[i + 1] - E[i]), abs(E[i - 1] - E[i]))
            t = tp * dmax + tm * dmin if E[i + 1] > E[i - 1] else tp * dmin + tm * dmax
        nrm = model.norm(t)
        T[i] = t / nrm if nrm > 0 else t
    return T


def perpendicular_gradient(model, x, g, t) -> np.ndarray:
    """Gradient minus its component along the unit tangent t.

    The tangential part is removed in the duality sense: the result
    annihilates t, so it carries no first-order change along the path.
    """
    tt = model.pairing(t, t)
    if tt == 0:
        return g
    return g - (model.pairing(g, t) / tt) * t


def _dual_norm(model, x) -> float:
    g = model.gradient(x)
    return float(np.sqrt(max(model.pairing(g, model.precondition(x, g)), 0.0)))


@dataclass
class MinimaxReport:
    c_est: float
    t_star: int
    grad_norm_at_max: float
    entropy_at_max: float
    converged: bool
    iterations: int
    path: Path = field(repr=False)
    history: list = field(repr=False, default_factory=list)
    initial_max: float = float("nan")

    @property
    def maximizer(self) -> np.ndarray:
        return self.path.nodes[self.t_star]


def optimize_path(path: Path, model: EnergyModel, iters: int = 2000, step: float = 0.1,
                  tol: float = 1e-6, climb: bool = True, climb_tol: float = 1e-2,
                  increase_tol: float = 1e-12, min_step: float = 1e-10, grow: float = 1.2,
                  trust: float = 0.5, stall_window: int = 10, stall_tol: float = 1e-6) -> MinimaxReport:
    """String-method descent of the path maximum.

    Each interior node moves along minus the preconditioned gradient with
    its tangential component removed, then the path is redistributed at
    equal metric arclength. Every node keeps its own step, halved whenever
    the move would raise that node's energy by more than ``increase_tol``
    (relative) and regrown by ``grow`` after accepted moves. A node never
    moves farther than ``trust`` times the current segment length, which
    keeps the downhill end from running away where E is unbounded below;
    nodes below both endpoint energies are frozen for the same reason,
    they cannot carry the maximum. Once the perpendicular gradient at the maximizer drops below
    ``climb_tol`` the maximal node switches to climbing: its tangential
    gradient component is reversed and it is excluded from the
    redistribution, so it converges to the saddle itself. Climbing also
    starts when the maximum changed by at most ``stall_tol`` (relative)
    over the last ``stall_window`` sweeps, since on fields the
    perpendicular residual has a floor set by the tangent discretization. Convergence is
    declared when the gradient at the maximizer (perpendicular part when
    not climbing, full gradient when climbing) has max-norm <= ``tol``.
    """
    cur = reparametrize(model, path)
    E = cur.energies(model)
    initial_max = float(E.max())
    history = []
    hs = np.full(cur.M + 1, float(step))
    converged = False
    climbing = None
    it = 0

    def residual(P, En, ic):
        i = ic if ic is not None else 1 + int(np.argmax(En[1:-1]))
        T = _tangents(model, P.nodes, En)
        g = model.gradient(P.nodes[i])
        r = g if ic is not None else perpendicular_gradient(model, P.nodes[i], g, T[i])
        return i, float(np.abs(r).max())

    if cur.M < 2:
        raise PathError("path needs an interior node")
    floor = max(E[0], E[-1])
    imax, gres = residual(cur, E, None)
    for it in range(1, iters + 1):
        if gres <= tol and (climbing is not None or not climb):
            converged = True
            break
        stalled = (len(history) > stall_window
                   and abs(history[-1][1] - history[-1 - stall_window][1]) <= stall_tol * (1 + abs(E.max())))
        if climb and climbing is None and (gres <= climb_tol or stalled):
            climbing = imax
            hs[climbing] = step
            imax, gres = residual(cur, E, climbing)
            continue
        X = cur.nodes
        T = _tangents(model, X, E)
        seg = model.norm(X[1] - X[0])
        Xn = X.copy()
        moved = 0
        for i in range(1, cur.M):
            if i != climbing and E[i] < floor:
                continue
            g = model.gradient(X[i])
            if i == climbing:
                d = g - 2.0 * (model.pairing(g, T[i]) / model.pairing(T[i], T[i])) * T[i]
            else:
                d = perpendicular_gradient(model, X[i], g, T[i])
            d = model.precondition(X[i], d)
            dn = model.norm(d)
            if dn * hs[i] > trust * seg:
                hs[i] = trust * seg / dn
            # node-wise backtracking: energy for descending nodes, the dual
            # gradient norm for the climbing node, which ascends along T
            while hs[i] >= min_step:
                xi = X[i] - hs[i] * d
                try:
                    if i == climbing:
                        ok = _dual_norm(model, xi) <= (1.0 + 1e-3) * _dual_norm(model, X[i])
                    else:
                        ok = model.energy(xi) <= E[i] + increase_tol * (1.0 + abs(E[i]))
                except FloatingPointError:
                    ok = False
                if ok:
                    break
                hs[i] *= 0.5
            if hs[i] < min_step:
                continue
            Xn[i] = xi
            hs[i] = min(hs[i] * grow, step)
            moved += 1
        if moved == 0:
            break
        cur = reparametrize(model, Path(Xn, cur.start, cur.end), climbing)
        E = cur.energies(model)
        imax, gres = residual(cur, E, climbing)
        history.append((it, float(E.max()), gres, float(np.median(hs[1:-1]))))
    i = climbing if climbing is not None else 1 + int(np.argmax(E[1:-1]))
    return MinimaxReport(float(E[i]), i, gres, model.entropy(cur.nodes[i]), converged, it, cur, history,
                         initial_max)


# saddle refinement ------------------------------------------------------------

@dataclass
class CriticalPoint:
    field: np.ndarray
    energy: float
    grad_norm: float
    nu: NuEstimate
    negative_directions: int
    distance_to_branch: float
    entropy: float
    iterations: int
    trace: list = field(repr=False, default_factory=list)


def _newton_saddle(model, x, tol, max_iter, lin_tol, max_lin):
    trace = []
    x = np.array(x, dtype=float)
    shape = x.shape
    n = x.size
    for it in range(max_iter + 1):
        g = model.gradient(x)
        gn = float(np.abs(g).max())
        trace.append((it, model.energy(x), gn))
        if gn <= tol:
            return x, gn, it, trace
        if it == max_iter:
            break
        H = LinearOperator((n, n), matvec=lambda v: model.hessian_apply(x, v.reshape(shape)).ravel(),
                           dtype=float)
        Mp = LinearOperator((n, n), matvec=lambda v: model.precondition(x, v.reshape(shape)).ravel(),
                            dtype=float)
        d, _ = minres(H, -g.ravel(), M=Mp, rtol=max(lin_tol, min(1e-3, gn)), maxiter=max_lin)
        d = d.reshape(shape)
        # damp on the gradient norm, the natural merit for indefinite Newton
        t = 1.0
        g2 = float(np.sum(g * g))
        for _ in range(30):
            xt = x + t * d
            try:
                gt = model.gradient(xt)
            except FloatingPointError:
                t *= 0.5
                continue
            if float(np.sum(gt * gt)) < (1 - 1e-4 * t) * g2:
                break
            t *= 0.5
        else:
            raise SaddleRejected(f"saddle Newton stalled at iteration {it} (grad {gn:.3e})", trace)
        x = xt
    raise SaddleRejected(f"saddle Newton did not converge (grad {trace[-1][2]:.3e})", trace)


def refine_saddle(guess, model: EnergyModel, branch_point=None, rho: float | None = None,
                  tol: float = 1e-8, max_iter: int = 50, lin_tol: float = 1e-10, max_lin: int = 500,
                  nu_kw: dict | None = None) -> CriticalPoint:
    """Newton-MINRES on grad E = 0 from ``guess``, then classification.

    Rejects points within rho/2 of the branch minimizer (in the model
    metric) and points without a certified negative direction.
    """
    x, gn, it, trace = _newton_saddle(model, guess, tol, max_iter, lin_tol, max_lin)
    nu = model.nu_estimate(x, **(nu_kw or {}))
    dist = float("nan") if branch_point is None else model.norm(x - np.asarray(branch_point))
    cp = CriticalPoint(x, model.energy(x), gn, nu, int(nu.value < 0), dist, model.entropy(x), it, trace)
    if rho is not None and branch_point is not None and not dist > rho / 2:
        raise SaddleRejected(f"converged to the branch minimizer (distance {dist:.3e} <= rho/2 = {rho / 2:.3e})",
                             trace)
    if nu.sign != -1:
        raise SaddleRejected(f"critical point has no certified negative direction (nu_est = {nu.value:.3e})",
                             trace)
    return cp


# structure of the landscape around the branch ------------------------------------

@dataclass
class MountainStructure:
    rho: float | None
    beta0: float | None
    sup_branch: float
    radii: np.ndarray = field(repr=False)
    annulus_profile: np.ndarray = field(repr=False)
    admissible: tuple | None = None


def measure_structure(model_for, lambdas, branch_fields, u0, directions, radii) -> MountainStructure:
    """Estimate rho and beta0 from energy scans along rays out of u0.

    ``model_for(mu)`` returns the model at parameter mu. m(t) is the
    smallest energy over mu in ``lambdas`` and the given unit directions at
    metric distance t from u0. The admissible radii are those with
    m > sup_{mu,nu} E_mu(u_nu) on the whole annulus (rho/2, rho); the
    largest admissible radius is returned.
    """
    models = [model_for(mu) for mu in lambdas]
    sup_branch = max(m.energy(ub) for m in models for ub in branch_fields)
    radii = np.asarray(radii, dtype=float)
    dirs = []
    for d in directions:
        nrm = models[0].norm(d)
        dirs.append(d / nrm)
    prof = np.array([min(m.energy(u0 + t * d) for m in models for d in dirs) for t in radii])
    above = prof > sup_branch
    best = None
    for j in range(len(radii)):
        r = radii[j]
        inside = (radii > r / 2) & (radii <= r)
        if inside.any() and np.all(above[inside]) and radii[0] <= r / 2:
            best = j
    if best is None:
        return MountainStructure(None, None, sup_branch, radii, prof)
    rho = float(radii[best])
    inside = (radii > rho / 2) & (radii <= rho)
    adm = [radii[j] for j in range(len(radii))
           if np.all(above[(radii > radii[j] / 2) & (radii <= radii[j])]) and radii[0] <= radii[j] / 2]
    return MountainStructure(rho, float(prof[inside].min()), sup_branch, radii, prof,
                             (float(min(adm)), float(max(adm))))


# c-curve ------------------------------------------------------------------------

@dataclass
class CCurveRow:
    lam: float
    c_est: float | None
    t_star: int | None
    grad_norm: float | None
    entropy_at_max: float | None
    c_fd_derivative: float | None = None
    flags: list = field(default_factory=list)


def c_curve(lambdas, model_for, u0, v_for, M: int = 33, optimize_kw: dict | None = None,
            K: float | None = None, volume: float = 1.0, monotone_tol: float = 1e-6) -> list:
    """Minimax level c_est(lam) on a grid, with derivative diagnostics.

    ``v_for(lam)`` returns the path endpoint for lam; reusing one endpoint
    over [lam, 2 lam] is the caller's policy. ``volume`` converts the
    normalized levels to the coordinate measure for the 32 pi^2 and K log
    comparisons, which are recorded as flags only.
    """
    rows = []
    for lam in lambdas:
        model = model_for(lam)
        try:
            path = initial_path(u0, v_for(lam), M)
            rep = optimize_path(path, model, **(optimize_kw or {}))
        except (PathError, FloatingPointError) as exc:
            rows.append(CCurveRow(float(lam), None, None, None, None, flags=[f"failed: {exc}"]))
            continue
        row = CCurveRow(float(lam), rep.c_est, rep.t_star, rep.grad_norm_at_max, rep.entropy_at_max)
        if not rep.converged:
            row.flags.append("not-converged")
        rows.append(row)
    ok = [r for r in rows if r.c_est is not None and "not-converged" not in r.flags]
    for a, b in zip(ok, ok[1:]):
        d = (b.c_est - a.c_est) / (b.lam - a.lam)
        b.c_fd_derivative = d
        if b.c_est > a.c_est + monotone_tol:
            b.flags.append("monotonicity-violation")
        if volume * b.lam * abs(d) > 32 * np.pi**2:
            b.flags.append("mu|c'|>32pi^2")
    if K is not None:
        for r in ok:
            if volume * r.c_est > K * np.log(1.0 / r.lam):
                r.flags.append("c>Klog")
    return rows


# second-solution driver -------------------------------------------------------------

def bump_direction(spec: GridSpec, sigma: float = 0.5, center=(0.0,) * 4) -> np.ndarray:
    """Periodic Gaussian bump exp(-D/(2 sigma^2)), D = sum 4 sin^2((x_i - c_i)/2)."""
    D = 0.0
    for xa, ca in zip(spec.coords(), center):
        D = D + 4.0 * np.sin(0.5 * (xa - ca)) ** 2
    return np.broadcast_to(np.exp(-D / (2.0 * sigma**2)), spec.shape).copy()


def endpoint_scale(model: EnergyModel, u0, direction, reference: float, margin: float = 0.5,
                   ds: float = 0.25, s_max: float = 20.0) -> float:
    """Smallest s on a ds-grid with E(u0 + s d) < reference - margin."""
    s = ds
    while s <= s_max:
        try:
            if model.energy(u0 + s * direction) < reference - margin:
                return s
        except FloatingPointError:
            break
        s += ds
    raise PathError(f"no endpoint below {reference - margin:.6g} along the direction up to s = {s_max}")


def saddle_family_derivative(model_for, x, lam: float, h: float, tol: float = 1e-9) -> float:
    """Central difference of the critical level along the saddle family through x."""
    e = []
    for mu in (lam - h, lam + h):
        xm, _, _, _ = _newton_saddle(model_for(mu), x, tol, 50, 1e-10, 500)
        e.append(model_for(mu).energy(xm))
    return (e[1] - e[0]) / (2.0 * h)


@dataclass
class SecondSolution:
    lam: float
    structure: MountainStructure
    endpoint_s: float
    report: MinimaxReport
    critical: CriticalPoint
    branch_energy: float
    c_prime: float | None = None
    tail: float | None = None

    @property
    def entropy_bound(self) -> float | None:
        return None if self.c_prime is None else abs(self.c_prime) + 3.0


def second_solution(branch, pc, Q0: float, lam: float, spec: GridSpec, c: PaneitzCoefficients | None = None,
                    M: int = 33, iters: int = 400, sigma: float = 0.5, margin: float = 0.5,
                    n_random: int = 3, radii=None, seed: int = 0, fd_step: float | None = 0.01,
                    optimize_kw: dict | None = None) -> SecondSolution:
    """Mountain-pass pipeline at lam on a computed minimizer branch.

    Endpoint: u0 + s b with b a grid-resolved bump at the maximum of f_0 and
    s the first scale bringing the energy below E_lam(u_lam) - margin.
    rho and beta0 come from ray scans out of u0 over all branch parameters
    up to lam (the branch fields, the bump and ``n_random`` smooth random
    directions). The saddle is refined from the path maximizer and
    rejected within rho/2 of u_lam.
    """
    from .energy import f_lambda_field
    from .grid import tail_fraction
    from .paneitz import random_bandlimited

    c = PaneitzCoefficients.flat(spec) if c is None else c
    entries = [e for e in branch.entries if e.lam <= lam + 1e-12]
    if abs(entries[-1].lam - lam) > 1e-12:
        raise ValueError(f"branch has no entry at lambda = {lam}")
    u0 = entries[0].u.values
    ul = entries[-1].u.values

    def model_for(mu):
        return FieldEnergy(f_lambda_field(pc.with_lambda(mu), spec), Q0, c)

    model = model_for(lam)
    ref = model.energy(ul)
    b = bump_direction(spec, sigma)
    s = endpoint_scale(model, u0, b, ref, margin)
    rng = np.random.default_rng(seed)
    dirs = [e.u.values - u0 for e in entries[1:]] + [b]
    dirs += [random_bandlimited(spec, rng, band=2, mean_zero=False) for _ in range(n_random)]
    radii = np.linspace(0.01, 1.0, 100) if radii is None else np.asarray(radii)
    structure = measure_structure(model_for, [e.lam for e in entries], [e.u.values for e in entries],
                                  u0, dirs, radii)
    path = initial_path(u0, u0 + s * b, M, model, ref)
    kw = dict(iters=iters, step=0.5, tol=1e-6)
    kw.update(optimize_kw or {})
    report = optimize_path(path, model, **kw)
    cp = refine_saddle(report.maximizer, model, branch_point=ul, rho=structure.rho)
    cprime = None
    if fd_step:
        cprime = saddle_family_derivative(model_for, cp.field, lam, fd_step)
    tail = tail_fraction(ScalarField(spec, cp.field), warn=False)
    return SecondSolution(lam, structure, s, report, cp, ref, cprime, tail)
