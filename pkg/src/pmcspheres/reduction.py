"""Lyapunov-Schmidt reduction for small prescribed mean curvature spheres.

The equation ``H[r, tau, r^2 u] = (n / f(p)) F[r, tau]`` is split into its
component orthogonal to the kernel K = span{x^1, ..., x^{n+1}}, solved for u
by a frozen-operator quasi-Newton iteration, and the finite-dimensional map

    G(r, tau) = Pi~((H - (n / f(p)) F) / r)

solved for tau. Non-degenerate critical points use Newton in tau; degenerate
ones with nonzero index use Brouwer-degree subdivision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry, meancurv, sphereharm
from .meancurv import GraphSphere, PrescribedProblem
from .sphereharm import SphereField, SphereGrid


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last_residual: float | None = None):
        super().__init__(message)
        self.last_residual = last_residual


class SingularJacobianError(ValueError):
    pass


class DegreeError(ValueError):
    pass


class BoundaryZeroError(DegreeError):
    pass


class SamplingError(DegreeError):
    pass


class HomotopyError(DegreeError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class NoCriticalPointError(DegreeError):
    pass


class ZeroDegreeError(DegreeError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances of the reduction. Residuals are measured at original scale."""

    inner_tol: float = 1e-10
    inner_max_iter: int = 50
    step_tol: float = 1e-11
    outer_tol: float = 1e-10
    outer_max_iter: int = 30
    leaf_tol: float = 1e-8
    hessian_cond_max: float = 1e8
    fd_step: float = 1e-5
    degenerate_tol: float = 1e-8


DEFAULT_SETTINGS = SolverSettings()


def _xx(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,iz,jz->z", M, x, x)


# --------------------------------------------------------------------------
# model solution and inner solve


def u0_rhs(problem: PrescribedProblem, grid: SphereGrid) -> SphereField:
    """(1/3)(R_ij(0) + (3n / 2f(p)) e_i e_j f(p)) x^i x^j in the frame at p."""
    frame = problem.frame(np.zeros(problem.chart.dim))
    R = geometry.ricci_in_frame(problem.chart, frame)
    _, hess, _ = meancurv.covariant_f_derivatives(problem, frame)
    M = (R + 1.5 * problem.n / problem.fp * hess) / 3.0
    return SphereField.from_values(grid, _xx(M, grid.nodes))


def solve_u0(problem: PrescribedProblem, grid: SphereGrid) -> SphereField:
    return sphereharm.solve_shifted(u0_rhs(problem, grid))


def residual(problem: PrescribedProblem, r: float, tau, u: SphereField) -> SphereField:
    """H[r, tau, r^2 u] - (n / f(p)) F[r, tau] at the nodes of u's grid."""
    frame = problem.frame(tau)
    H = meancurv.mean_curvature(problem.chart, frame, r, u * r**2, delta0=problem.delta0)
    F = meancurv.f_restriction(problem, frame, r, u.grid)
    return SphereField.from_values(u.grid, H.values - problem.c_bar * F.values)


@dataclass
class InnerResult:
    u: SphereField
    iterations: int
    pi_residual: float  # sup of Pi_perp(H - cF) at original scale
    residual: SphereField


def inner_solve(problem: PrescribedProblem, r: float, tau, seed: SphereField,
                settings: SolverSettings = DEFAULT_SETTINGS) -> InnerResult:
    """Solve Pi_perp(H[r, tau, r^2 u] - (n/f(p)) F[r, tau]) = 0 for u in K_perp.

    Uses the frozen linearization (Delta + n) on K_perp. Once the residual is
    below ``inner_tol`` the iteration continues while it still contracts, so
    the result sits at the rounding floor rather than just under tolerance.
    """
    grid = seed.grid
    if r == 0:
        u0 = solve_u0(problem, grid)
        return InnerResult(u0, 0, 0.0, SphereField.zeros(grid))
    u = sphereharm.project_Kperp(seed)
    best = None
    last = math.inf
    step = math.inf
    for it in range(settings.inner_max_iter + 1):
        res = residual(problem, r, tau, u)
        pres = sphereharm.project_Kperp(res)
        size = pres.sup()
        if best is None or size < best.pi_residual:
            best = InnerResult(u, it, size, res)
        if size <= settings.inner_tol and (step <= settings.step_tol or size > 0.5 * last):
            return best
        if it == settings.inner_max_iter:
            break
        # pres is orthogonal to K by construction, so skip the Fredholm check
        # (its relative test would only see rounding left by the projection)
        du = SphereField.from_coeffs(grid, pres.coeffs * (sphereharm.shifted_inverse_factors(grid) / r**2))
        step = du.sup()
        u = u - du
        last = size
    if best.pi_residual <= settings.inner_tol:
        return best
    raise ConvergenceError(
        f"inner solve did not converge in {settings.inner_max_iter} iterations at r = {r:g}",
        best.pi_residual,
    )


# --------------------------------------------------------------------------
# outer map and Newton in tau


def outer_G_zero(problem: PrescribedProblem, tau) -> np.ndarray:
    """Continuous extension G(0, tau) = -(n / f(p)) (e_i^tau f)(c(tau))."""
    frame = problem.frame(tau)
    grad = problem.f_jet(frame.center, 1).grad
    return -problem.c_bar * (frame.basis.T @ grad)


@dataclass
class OuterState:
    tau: np.ndarray
    G: np.ndarray
    inner: InnerResult | None


def outer_G(problem: PrescribedProblem, r: float, tau, seed: SphereField | None = None,
            grid: SphereGrid | None = None, settings: SolverSettings = DEFAULT_SETTINGS) -> OuterState:
    """G(r, tau) = Pi~((H - (n/f(p)) F) / r) after solving the inner equation."""
    tau = np.asarray(tau, dtype=float)
    if r == 0:
        return OuterState(tau, outer_G_zero(problem, tau), None)
    if seed is None:
        seed = solve_u0(problem, grid)
    inner = inner_solve(problem, r, tau, seed, settings)
    return OuterState(tau, sphereharm.pi_tilde(inner.residual) / r, inner)


def model_jacobian(problem: PrescribedProblem, settings: SolverSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """-(n / f(p)) e_l e_i f(p): the tau-Jacobian of G at r = 0, tau = 0."""
    frame = problem.frame(np.zeros(problem.chart.dim))
    _, hess, _ = meancurv.covariant_f_derivatives(problem, frame)
    J = -problem.c_bar * hess
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > settings.hessian_cond_max:
        raise SingularJacobianError(
            f"Hessian of f at p has condition number {cond:.3e}; the critical point looks degenerate"
        )
    return J


def fd_jacobian(problem: PrescribedProblem, r: float, state: OuterState, h: float,
                settings: SolverSettings = DEFAULT_SETTINGS) -> np.ndarray:
    d = state.tau.size
    J = np.empty((d, d))
    seed = state.inner.u if state.inner is not None else None
    for l in range(d):
        e = np.zeros(d)
        e[l] = h
        plus = outer_G(problem, r, state.tau + e, seed, settings=settings)
        minus = outer_G(problem, r, state.tau - e, seed, settings=settings)
        J[:, l] = (plus.G - minus.G) / (2 * h)
    return J


@dataclass
class NewtonResult:
    tau: np.ndarray
    u: SphereField | None
    G_norm: float
    iterations: int
    inner_max: int
    inner_total: int
    inner: InnerResult | None


def newton_tau(problem: PrescribedProblem, r: float, seed_tau, grid: SphereGrid,
               u_seed: SphereField | None = None, settings: SolverSettings = DEFAULT_SETTINGS,
               jacobian: np.ndarray | None = None) -> NewtonResult:
    """Chord Newton for G(r, tau) = 0 with the Hessian model Jacobian.

    A rejected step (no decrease of |G|) triggers a finite-difference refresh
    of the Jacobian, then step halving.
    """
    J = model_jacobian(problem, settings) if jacobian is None else jacobian
    tau = np.asarray(seed_tau, dtype=float).copy()
    if u_seed is None:
        u_seed = solve_u0(problem, grid)
    counts = []

    def evaluate(t, seed):
        st = outer_G(problem, r, t, seed, grid, settings)
        if st.inner is not None:
            counts.append(st.inner.iterations)
        return st

    state = evaluate(tau, u_seed)
    refreshed = False
    for it in range(settings.outer_max_iter + 1):
        norm = float(np.linalg.norm(state.G))
        if norm <= settings.outer_tol:
            u = state.inner.u if state.inner else None
            return NewtonResult(state.tau, u, norm, it, max(counts, default=0), sum(counts), state.inner)
        if it == settings.outer_max_iter:
            break
        step = -np.linalg.solve(J, state.G)
        seed = state.inner.u if state.inner else u_seed
        accepted = False
        for attempt in range(8):
            trial = evaluate(state.tau + step, seed)
            if np.linalg.norm(trial.G) < norm:
                accepted = True
                break
            if not refreshed and r > 0:
                J = fd_jacobian(problem, r, state, settings.fd_step, settings)
                if np.linalg.cond(J) > settings.hessian_cond_max:
                    raise SingularJacobianError("finite-difference Jacobian of G is singular; try degenerate mode")
                refreshed = True
                step = -np.linalg.solve(J, state.G)
            else:
                step = 0.5 * step
        if not accepted:
            break
        state = trial
    raise ConvergenceError(
        f"Newton in tau did not converge at r = {r:g} (|G| = {np.linalg.norm(state.G):.3e})",
        float(np.linalg.norm(state.G)),
    )


# --------------------------------------------------------------------------
# Brouwer degree


@dataclass
class DegreeReport:
    rho: float
    samples: int
    degree: int
    residue: float
    min_norm: float
    homotopy_ok: bool | None = None
    homotopy_min: float | None = None

    def as_dict(self) -> dict:
        return {
            "rho": self.rho,
            "samples": self.samples,
            "degree": self.degree,
            "residue": self.residue,
            "min_norm": self.min_norm,
            "homotopy_ok": self.homotopy_ok,
            "homotopy_min": self.homotopy_min,
        }


BOUNDARY_MIN = 1e-8
RESIDUE_MAX = 0.2


def _winding(values: np.ndarray) -> tuple[float, float]:
    """Winding sum of a closed loop of planar vectors and the largest step."""
    ang = np.arctan2(values[1], values[0])
    inc = np.diff(np.concatenate([ang, ang[:1]]))
    inc = (inc + np.pi) % (2 * np.pi) - np.pi
    return float(np.sum(inc) / (2 * np.pi)), float(np.max(np.abs(inc)))


def _solid_angles(values: np.ndarray, faces: np.ndarray) -> tuple[float, float]:
    """Sum of signed solid angles of the image triangles (Van Oosterom-Strackee)."""
    u = values / np.linalg.norm(values, axis=0)
    a, b, c = u[:, faces[:, 0]], u[:, faces[:, 1]], u[:, faces[:, 2]]
    num = np.einsum("iz,iz->z", a, np.cross(b, c, axis=0))
    den = 1 + np.einsum("iz,iz->z", a, b) + np.einsum("iz,iz->z", b, c) + np.einsum("iz,iz->z", c, a)
    omega = 2 * np.arctan2(num, den)
    edge = np.arccos(np.clip(np.concatenate([np.einsum("iz,iz->z", a, b), np.einsum("iz,iz->z", b, c),
                                             np.einsum("iz,iz->z", c, a)]), -1, 1))
    return float(np.sum(omega) / (4 * np.pi)), float(np.max(edge))


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere vertices (3, V) and outward-oriented faces (F, 3)."""
    t = (1 + math.sqrt(5)) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts).T
    Fa = np.array(faces)
    det = np.einsum("iz,iz->z", V[:, Fa[:, 0]], np.cross(V[:, Fa[:, 1]], V[:, Fa[:, 2]], axis=0))
    Fa[det < 0] = Fa[det < 0][:, ::-1]
    return V, Fa


def ball_boundary(dim: int, center, rho: float, samples: int | None = None):
    """Boundary samples of B_rho(center): (points, faces or None)."""
    center = np.asarray(center, dtype=float)
    if dim == 2:
        m = samples or 4096
        t = 2 * np.pi * np.arange(m) / m
        return center[:, None] + rho * np.stack([np.cos(t), np.sin(t)]), None
    sub = 5 if samples is None else int(samples)
    V, Fa = icosphere(sub)
    return center[:, None] + rho * V, Fa


def _degree_of_values(values: np.ndarray, faces) -> tuple[float, float]:
    if faces is None:
        return _winding(values)
    return _solid_angles(values, faces)


def brouwer_degree(field, center, rho: float, samples: int | None = None) -> DegreeReport:
    """Degree of a vectorized field over B_rho(center).

    ``field`` maps points of shape (dim, B) to values of shape (dim, B). In 2D
    the winding number of 4096 boundary samples is used; in 3D the signed
    solid angles of the image of an icosahedral mesh (5 subdivisions, 20480
    faces).
    """
    center = np.asarray(center, dtype=float)
    dim = center.size
    pts, faces = ball_boundary(dim, center, rho, samples)
    values = np.asarray(field(pts), dtype=float)
    return _report_from_values(values, faces, rho, pts.shape[1])


def _report_from_values(values, faces, rho, count) -> DegreeReport:
    norms = np.linalg.norm(values, axis=0)
    min_norm = float(np.min(norms))
    if not min_norm > BOUNDARY_MIN:
        raise BoundaryZeroError(f"field vanishes on the boundary (min |V| = {min_norm:.3e})")
    raw, step = _degree_of_values(values, faces)
    limit = np.pi / 2 if faces is None else np.pi / 3
    degree = int(round(raw))
    residue = abs(raw - degree)
    if residue >= RESIDUE_MAX or step >= limit:
        raise SamplingError(f"boundary sampling too coarse (residue {residue:.3f}, largest step {step:.3f})")
    return DegreeReport(rho, count, degree, residue, min_norm)


def gradient_data(problem: PrescribedProblem, taus: np.ndarray):
    """D_tau f, g_tau, and B(tau) = (dc^-1 E_tau)^T at a batch of tau."""
    chart = problem.chart
    centers, bases, dc, _ = geometry.transport_batch(chart, taus, problem.initial_basis, differential=True)
    grad = np.stack([j for j in _grad_batch(problem, centers)])
    Df = np.einsum("kiz,kz->iz", dc, grad)
    G = chart.metric(centers)
    gtau = np.einsum("kiz,klz,ljz->ijz", dc, G, dc)
    dc_m = np.moveaxis(dc, -1, 0)
    Bt = np.linalg.solve(dc_m, np.moveaxis(bases, -1, 0))  # dc^-1 E
    B = np.moveaxis(np.swapaxes(Bt, 1, 2), 0, -1)
    return Df, gtau, B


def _grad_batch(problem: PrescribedProblem, points: np.ndarray):
    from . import exprfield

    jet = exprfield.jet(problem.f, points, 1)
    return [jet.c[1 + k] for k in range(problem.chart.dim)]


def index_gradient(problem: PrescribedProblem, rho: float | None = None, samples: int | None = None,
                   homotopy_levels: int = 17, critical_tol: float = 1e-8) -> DegreeReport:
    """Index of grad^g f = g^-1 D_tau f at p, plus the homotopy check.

    The homotopy ``[(1 - s) B(tau) + s g_tau^-1] D_tau f`` is sampled on
    ``homotopy_levels`` values of s times the boundary samples and must not
    vanish there.
    """
    chart = problem.chart
    dim = chart.dim
    rho = chart.chart_radius / 16 if rho is None else float(rho)
    _check_critical(problem, critical_tol)
    pts, faces = ball_boundary(dim, np.zeros(dim), rho, samples)
    Df, gtau, B = gradient_data(problem, pts)
    if float(np.min(np.linalg.norm(Df, axis=0))) <= BOUNDARY_MIN:
        raise BoundaryZeroError("D_tau f vanishes on the boundary; p is not an isolated critical point in B_rho")
    ginv = np.moveaxis(np.linalg.inv(np.moveaxis(gtau, -1, 0)), 0, -1)
    V = np.einsum("ijz,jz->iz", ginv, Df)
    report = _report_from_values(V, faces, rho, pts.shape[1])
    worst = math.inf
    witness = None
    for s in np.linspace(0.0, 1.0, homotopy_levels):
        M = (1 - s) * B + s * ginv
        vals = np.linalg.norm(np.einsum("ijz,jz->iz", M, Df), axis=0)
        k = int(np.argmin(vals))
        if vals[k] < worst:
            worst, witness = float(vals[k]), (float(s), pts[:, k].tolist())
    report.homotopy_min = worst
    report.homotopy_ok = worst > BOUNDARY_MIN
    if not report.homotopy_ok:
        raise HomotopyError(f"homotopy vanishes at s = {witness[0]}, tau = {witness[1]}", witness)
    return report


def _check_critical(problem: PrescribedProblem, critical_tol: float = 1e-8):
    grad0 = problem.f_jet(None, 1).grad
    if np.linalg.norm(grad0) > critical_tol:
        raise NoCriticalPointError(
            f"p is not a critical point of f (|df(p)| = {np.linalg.norm(grad0):.3e}); no isolated zero"
        )


@dataclass
class ModeDecision:
    mode: str
    hessian_condition: float
    index: DegreeReport | None = None

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "hessian_condition": self.hessian_condition,
            "index": None if self.index is None else self.index.as_dict(),
        }


def select_mode(problem: PrescribedProblem, requested: str = "auto", settings: SolverSettings = DEFAULT_SETTINGS,
                rho: float | None = None) -> ModeDecision:
    """Pick the solver for the critical point p.

    ``auto`` takes the Newton path iff the covariant Hessian has condition
    number <= ``settings.hessian_cond_max``, otherwise the degree path iff
    the index is nonzero. Constant f gets its own mode (every point is
    critical, tau is held at 0). Non-critical p is always refused.
    """
    if requested not in ("auto", "nondegenerate", "degenerate", "constant"):
        raise ValueError(f"unknown mode {requested!r}")
    if problem.f.is_constant or requested == "constant":
        if not problem.f.is_constant:
            raise ValueError("constant mode needs a constant f")
        return ModeDecision("constant", math.inf)
    _check_critical(problem)
    _, hess, _ = meancurv.covariant_f_derivatives(problem)
    cond = float(np.linalg.cond(hess)) if np.all(np.isfinite(hess)) else math.inf
    if requested == "nondegenerate" or (requested == "auto" and cond <= settings.hessian_cond_max):
        return ModeDecision("nondegenerate", cond)
    report = index_gradient(problem, rho)
    if report.degree == 0:
        raise ZeroDegreeError("critical point has zero index")
    return ModeDecision("degenerate", cond, report)


# --------------------------------------------------------------------------
# degenerate case: degree-guided subdivision


class _CachedField:
    """Pointwise field with caching and warm-started inner solves."""

    def __init__(self, func):
        self.func = func
        self.cache = {}

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        out = np.empty_like(pts)
        for k in range(pts.shape[1]):
            key = tuple(np.round(pts[:, k], 15))
            if key not in self.cache:
                self.cache[key] = np.asarray(self.func(pts[:, k]), dtype=float)
            out[:, k] = self.cache[key]
        return out


def _cube_surface(lo, hi, m: int):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    pts, faces = [], []
    t = np.linspace(0, 1, m + 1)
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        for side, val in ((1, hi[a]), (-1, lo[a])):
            base = sum(len(p[0]) for p in pts)
            U, W = np.meshgrid(t, t, indexing="ij")
            P = np.empty((3, U.size))
            P[a] = val
            P[b] = lo[b] + (hi[b] - lo[b]) * U.ravel()
            P[c] = lo[c] + (hi[c] - lo[c]) * W.ravel()
            pts.append(P)
            idx = lambda i, j: base + i * (m + 1) + j
            for i in range(m):
                for j in range(m):
                    tri = [(idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)), (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))]
                    for f in tri:
                        faces.append(f if side > 0 else f[::-1])
    return np.concatenate(pts, axis=1), np.array(faces)


def _perimeter_points(lo, hi, params: np.ndarray) -> np.ndarray:
    """Counterclockwise square perimeter, parametrized by s in [0, 4)."""
    (x0, y0), (x1, y1) = lo, hi
    e = np.floor(params).astype(int)
    t = params - e
    x = np.select([e == 0, e == 1, e == 2, e == 3], [x0 + (x1 - x0) * t, np.full_like(t, x1), x1 - (x1 - x0) * t,
                                                     np.full_like(t, x0)])
    y = np.select([e == 0, e == 1, e == 2, e == 3], [np.full_like(t, y0), y0 + (y1 - y0) * t, np.full_like(t, y1),
                                                     y1 - (y1 - y0) * t])
    return np.stack([x, y])


def _loop_degree(field, lo, hi, start: int, max_samples: int, max_step: float) -> tuple[int, float]:
    params = np.arange(4 * start) / start
    values = field(_perimeter_points(lo, hi, params))
    while True:
        norms = np.linalg.norm(values, axis=0)
        if not np.min(norms) > BOUNDARY_MIN:
            raise BoundaryZeroError("field vanishes on a cell boundary")
        ang = np.arctan2(values[1], values[0])
        inc = np.diff(np.concatenate([ang, ang[:1]]))
        inc = (inc + np.pi) % (2 * np.pi) - np.pi
        coarse = np.flatnonzero(np.abs(inc) > max_step)
        if coarse.size == 0:
            raw = float(np.sum(inc) / (2 * np.pi))
            return int(round(raw)), float(np.min(norms))
        if params.size + coarse.size > max_samples:
            raise SamplingError(f"cell boundary sampling did not resolve the degree ({params.size} samples)")
        nxt = np.concatenate([params[1:], [4.0]])
        mids = 0.5 * (params[coarse] + nxt[coarse])
        new_vals = field(_perimeter_points(lo, hi, mids))
        order = np.argsort(np.concatenate([params, mids]), kind="stable")
        params = np.concatenate([params, mids])[order]
        values = np.concatenate([values, new_vals], axis=1)[:, order]


def cell_degree(field, lo, hi, start: int = 8, max_samples: int = 4096) -> tuple[int, float]:
    """Degree of ``field`` over the box [lo, hi] with adaptive boundary sampling.

    In 2D, perimeter segments whose image turns by more than pi/8 are split
    until none remain. In 3D the face mesh is refined uniformly until every
    image edge subtends less than pi/6. Returns the degree and the smallest
    sampled boundary norm.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if lo.size == 2:
        return _loop_degree(field, lo, hi, start, max_samples, np.pi / 8)
    m = start
    while True:
        pts, faces = _cube_surface(lo, hi, m)
        values = field(pts)
        norms = np.linalg.norm(values, axis=0)
        if not np.min(norms) > BOUNDARY_MIN:
            raise BoundaryZeroError("field vanishes on a cell boundary")
        raw, step = _solid_angles(values, faces)
        if step < np.pi / 6 and abs(raw - round(raw)) < RESIDUE_MAX:
            return int(round(raw)), float(np.min(norms))
        if pts.shape[1] >= max_samples:
            raise SamplingError(f"cell boundary sampling did not resolve the degree ({pts.shape[1]} samples)")
        m *= 2


@dataclass
class SubdivisionResult:
    tau: np.ndarray
    value: np.ndarray
    cells: int
    depth: int
    polished: bool


ROOT_OFFSET = np.array([0.0123456789, -0.0098765432, 0.0071828183])


def _newton_polish(field, x0, lo, hi, tol: float, h: float, max_iter: int = 40):
    """Damped Newton with a finite-difference Jacobian, confined to a box."""
    x = np.asarray(x0, float).copy()
    dim = x.size
    fx = field(x[:, None])[:, 0]
    for _ in range(max_iter):
        if np.linalg.norm(fx) <= tol:
            return x, fx
        J = np.empty((dim, dim))
        for l in range(dim):
            e = np.zeros(dim)
            e[l] = h
            J[:, l] = (field((x + e)[:, None])[:, 0] - field((x - e)[:, None])[:, 0]) / (2 * h)
        try:
            step = -np.linalg.solve(J, fx)
        except np.linalg.LinAlgError:
            return None
        for _ in range(12):
            trial = x + step
            if np.all(trial >= lo) and np.all(trial <= hi):
                ft = field(trial[:, None])[:, 0]
                if np.linalg.norm(ft) < np.linalg.norm(fx):
                    break
            step = 0.5 * step
        else:
            return None
        x, fx = trial, ft
        h = min(h, max(1e-9, 0.1 * float(np.linalg.norm(step))))
    return (x, fx) if np.linalg.norm(fx) <= tol else None


def subdivide_zero(field, lo, hi, tol: float = 1e-8, min_diameter: float = 1e-9,
                   polish_below: float | None = None, shrink: float = 0.99) -> SubdivisionResult:
    """Locate a zero of ``field`` in the box [lo, hi] by degree-guided bisection.

    Cells are split dyadically and scanned in a fixed order; the first child
    with nonzero boundary degree is kept. A child whose boundary carries a
    zero is shrunk about its center by ``shrink`` before its degree is taken.
    Once a cell is smaller than ``polish_below`` a Newton polish from its
    center is attempted; success ends the search.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dim = lo.size
    deg, _ = cell_degree(field, lo, hi)
    if deg == 0:
        raise ZeroDegreeError("field has degree zero on the top-level cell")
    polish_below = polish_below if polish_below is not None else 0.25 * float(np.max(hi - lo))
    cells, depth = 1, 0
    while True:
        center = 0.5 * (lo + hi)
        diam = float(np.linalg.norm(hi - lo))
        fc = field(center[:, None])[:, 0]
        if np.linalg.norm(fc) <= tol:
            return SubdivisionResult(center, fc, cells, depth, False)
        if diam <= polish_below:
            hit = _newton_polish(field, center, lo, hi, tol, h=max(1e-7, 1e-3 * diam))
            if hit is not None:
                return SubdivisionResult(hit[0], hit[1], cells, depth, True)
        if diam <= min_diameter:
            raise DegreeError(f"cell diameter {diam:.2e} reached with |G| = {np.linalg.norm(fc):.3e}")
        found = False
        for corner in np.ndindex(*(2,) * dim):
            c = np.array(corner)
            clo = np.where(c == 0, lo, center)
            chi = np.where(c == 0, center, hi)
            cells += 1
            try:
                d, _ = cell_degree(field, clo, chi)
            except BoundaryZeroError:
                mid = 0.5 * (clo + chi)
                clo, chi = mid + shrink * (clo - mid), mid + shrink * (chi - mid)
                d, _ = cell_degree(field, clo, chi)
            if d != 0:
                lo, hi = clo, chi
                found = True
                break
        if not found:
            raise DegreeError("all subcells have degree zero; boundary sampling failed")
        depth += 1


@dataclass
class DegenerateResult:
    tau: np.ndarray
    G_norm: float
    inner: InnerResult | None
    top_degree: int
    cells: int
    evaluations: int
    homotopy_min: float


def degenerate_solve(problem: PrescribedProblem, r: float, rho: float, grid: SphereGrid,
                     settings: SolverSettings = DEFAULT_SETTINGS, r_levels: int = 3) -> DegenerateResult:
    """Find tau with |G(r, tau)| <= tol by degree-guided subdivision.

    The root cell is the cube of half-width rho around a small fixed offset
    (so symmetric zeros do not land on cell edges). Before subdividing, the
    degree of G(r, .) on the root boundary is compared with that of G(0, .),
    and |G(s, .)| is checked on the boundary for ``r_levels`` values of s in
    [0, r].
    """
    dim = problem.chart.dim
    offset = ROOT_OFFSET[:dim] * rho
    lo, hi = offset - rho, offset + rho
    u_seed = [solve_u0(problem, grid)]
    inner_of = {}

    def G_at(rr):
        def func(t):
            st = outer_G(problem, rr, t, u_seed[0], grid, settings)
            if st.inner is not None:
                u_seed[0] = st.inner.u
                inner_of[tuple(np.round(t, 15))] = st.inner
            return st.G
        return _CachedField(func)

    G0 = G_at(0.0)
    deg0, _ = cell_degree(G0, lo, hi)
    if deg0 == 0:
        raise ZeroDegreeError("G(0, .) has degree zero on the root cell")
    homotopy_min = math.inf
    for s in np.linspace(0.0, r, r_levels)[1:]:
        Gs = G_at(float(s))
        ds, mn = cell_degree(Gs, lo, hi)
        homotopy_min = min(homotopy_min, mn)
        if ds != deg0:
            raise HomotopyError(f"degree of G(s, .) changes from {deg0} to {ds} at s = {s:g}; r too large")
    Gr = Gs if r > 0 else G0
    res = subdivide_zero(Gr, lo, hi, tol=min(settings.outer_tol, settings.degenerate_tol))
    key = tuple(np.round(res.tau, 15))
    inner = inner_of.get(key)
    if r > 0 and inner is None:
        inner = outer_G(problem, r, res.tau, u_seed[0], grid, settings).inner
    return DegenerateResult(res.tau, float(np.linalg.norm(res.value)), inner, deg0, res.cells,
                            len(Gr.cache), homotopy_min)


# --------------------------------------------------------------------------
# families


@dataclass
class FamilyLeaf:
    r: float
    tau_bar: np.ndarray
    u: SphereField
    residual_sup: float
    inner_iters: int  # largest iteration count of any inner solve for this leaf
    outer_iters: int
    inner_total: int = 0
    G_norm: float = 0.0
    pi_residual: float = 0.0
    kernel_part: float = 0.0

    def graph(self, problem: PrescribedProblem) -> GraphSphere:
        return GraphSphere(self.r, self.tau_bar, self.u, problem.frame(self.tau_bar))


@dataclass
class FamilyResult:
    leaves: list
    mode: str
    failure: str | None = None
    failed_r: float | None = None

    @property
    def complete(self) -> bool:
        return self.failure is None


def _certify(problem, r, tau, inner: InnerResult, settings) -> tuple[float, float]:
    res = residual(problem, r, tau, inner.u)
    return res.sup(), sphereharm.project_K(inner.u).sup()


def build_family(problem: PrescribedProblem, r_grid, mode: str = "nondegenerate", grid: SphereGrid | None = None,
                 settings: SolverSettings = DEFAULT_SETTINGS, rho: float | None = None) -> FamilyResult:
    """Solve one leaf per radius with warm-start continuation in r.

    Seeds for the next radius are extrapolated linearly in r^2 from the two
    previous leaves. A failing leaf stops the sweep; earlier leaves are kept.
    In ``constant`` mode (f constant) tau is held at 0 and only the inner
    equation is solved; the leaf certificate then decides whether the
    sphere exists.
    """
    if mode not in ("nondegenerate", "degenerate", "constant"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = grid or SphereGrid(problem.n)
    r_grid = [float(r) for r in r_grid]
    if any(b <= a for a, b in zip(r_grid, r_grid[1:])) or r_grid[0] <= 0:
        raise ValueError("r_grid must be positive and strictly ascending")
    rho = problem.chart.chart_radius / 16 if rho is None else rho
    leaves: list[FamilyLeaf] = []
    u0 = solve_u0(problem, grid)
    J = model_jacobian(problem, settings) if mode == "nondegenerate" else None
    for r in r_grid:
        if len(leaves) >= 2:
            a, b = leaves[-2], leaves[-1]
            w = (r**2 - b.r**2) / (b.r**2 - a.r**2)
            tau_seed = b.tau_bar + w * (b.tau_bar - a.tau_bar)
            u_seed = b.u + (b.u - a.u) * w
        elif leaves:
            tau_seed, u_seed = leaves[-1].tau_bar, leaves[-1].u
        else:
            tau_seed, u_seed = np.zeros(problem.chart.dim), u0
        try:
            if mode == "nondegenerate":
                nr = newton_tau(problem, r, tau_seed, grid, u_seed, settings, jacobian=J)
                tau, inner, outer_it = nr.tau, nr.inner, nr.iterations
                inner_max, inner_total, gnorm = nr.inner_max, nr.inner_total, nr.G_norm
            elif mode == "constant":
                tau = np.zeros(problem.chart.dim)
                inner = inner_solve(problem, r, tau, u_seed, settings)
                outer_it, inner_max, inner_total = 0, inner.iterations, inner.iterations
                gnorm = float(np.linalg.norm(sphereharm.pi_tilde(inner.residual) / r))
            else:
                dr = degenerate_solve(problem, r, rho, grid, settings)
                tau, inner, outer_it = dr.tau, dr.inner, dr.cells
                inner_max = inner.iterations if inner else 0
                inner_total, gnorm = dr.evaluations, dr.G_norm
            sup, kern = _certify(problem, r, tau, inner, settings)
            if sup > settings.leaf_tol:
                raise ConvergenceError(f"leaf certificate failed at r = {r:g}: sup residual {sup:.3e}", sup)
        except (ConvergenceError, DegreeError, SingularJacobianError, meancurv.EmbeddednessError,
                geometry.GeometryError, sphereharm.KernelObstructionError) as exc:
            return FamilyResult(leaves, mode, f"{type(exc).__name__}: {exc}", r)
        leaves.append(FamilyLeaf(r, np.asarray(tau, float), inner.u, sup, inner_max, outer_it, inner_total,
                                 gnorm, inner.pi_residual, kern))
    return FamilyResult(leaves, mode)


# --------------------------------------------------------------------------
# verification of families


def fixed_directions(dim: int, count: int = 64) -> np.ndarray:
    """Deterministic unit directions: equispaced angles (2D), Fibonacci points (3D)."""
    if dim == 2:
        t = 2 * np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(t), np.sin(t)])
    k = np.arange(count) + 0.5
    z = 1 - 2 * k / count
    phi = np.pi * (1 + math.sqrt(5)) * k
    s = np.sqrt(1 - z**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z])


def ray_radii(problem: PrescribedProblem, leaf: FamilyLeaf, directions: np.ndarray, tol: float = 1e-13,
              max_iter: int = 200) -> np.ndarray:
    """Distance from p to the leaf surface along each chart direction.

    Solves dir(P(x)) = d for x on S^n by the fixed-point update
    x <- normalize(x + d - P(x)/|P(x)|), starting from x = d.
    """
    sphere = leaf.graph(problem)
    n = problem.n
    x = directions.copy()
    for _ in range(max_iter):
        P = sphere.points(problem.chart, sphereharm.angles_of(x))
        dirs = P / np.linalg.norm(P, axis=0)
        err = directions - dirs
        x = x + err
        x /= np.linalg.norm(x, axis=0)
        if np.max(np.abs(err)) < tol:
            break
    P = sphere.points(problem.chart, sphereharm.angles_of(x))
    return np.linalg.norm(P, axis=0)


def dense_points(problem: PrescribedProblem, leaf: FamilyLeaf, factor: int = 2) -> np.ndarray:
    fine = SphereGrid(problem.n, factor * leaf.u.grid.L)
    return leaf.graph(problem).points(problem.chart, fine.angles)


@dataclass
class FoliationReport:
    slope: float | None
    slope_status: str  # "pass", "fail" or "skipped"
    disjoint: bool
    min_gap: float
    monotone: bool
    min_radial_increment: float

    @property
    def passed(self) -> bool:
        return self.slope_status != "fail" and self.disjoint and self.monotone

    def as_dict(self) -> dict:
        return {
            "tau_slope": self.slope,
            "tau_slope_status": self.slope_status,
            "disjoint": self.disjoint,
            "min_gap": self.min_gap,
            "radially_monotone": self.monotone,
            "min_radial_increment": self.min_radial_increment,
        }


def foliation_check(problem: PrescribedProblem, leaves, min_slope: float = 1.9, directions: int = 64,
                    zero_tau: float = 1e-12, check_slope: bool = True) -> FoliationReport:
    """Tau-rate, disjointness and radial monotonicity of a family.

    The rate check is skipped when tau is identically zero or when
    ``check_slope`` is off (degenerate families carry no rate: there tau is
    only determined up to the flatness of G near its zero).
    """
    if len(leaves) < 4:
        raise ValueError("foliation_check needs at least 4 leaves")
    r = np.array([lf.r for lf in leaves])
    if np.any(np.diff(r) < 0):
        raise ValueError("leaves must be in ascending r")
    norms = np.array([np.linalg.norm(lf.tau_bar) for lf in leaves])
    if not check_slope or np.all(norms < zero_tau):
        slope, status = None, "skipped"
    else:
        slope = meancurv.loglog_slope(r, norms)
        status = "pass" if slope >= min_slope else "fail"
    gaps = []
    clouds = [dense_points(problem, lf) for lf in leaves]
    for a, b in zip(clouds, clouds[1:]):
        d2 = np.sum(a**2, axis=0)[:, None] + np.sum(b**2, axis=0)[None, :] - 2 * a.T @ b
        gaps.append(float(np.sqrt(max(0.0, np.min(d2)))))
    D = fixed_directions(problem.chart.dim, directions)
    radii = np.array([ray_radii(problem, lf, D) for lf in leaves])
    inc = np.diff(radii, axis=0)
    min_inc = float(np.min(inc)) if inc.size else math.inf
    return FoliationReport(slope, status, bool(min(gaps) > 0), float(min(gaps)), bool(min_inc > 0), min_inc)


def band_limited_noise(grid: SphereGrid, sup_norm: float, rng: np.random.Generator, degree: int | None = None
                       ) -> SphereField:
    """Random field in K_perp with degrees <= ``degree`` scaled to the given sup norm."""
    degree = min(grid.L, 6) if degree is None else degree
    c = rng.normal(size=grid.ncoeffs)
    c[(grid.degrees == 1) | (grid.degrees > degree)] = 0.0
    f = SphereField.from_coeffs(grid, c)
    return f * (sup_norm / f.sup())


@dataclass
class UniquenessReport:
    r: float
    seeds: int
    converged: int
    rejected: list = field(default_factory=list)
    max_tau_diff: float = math.nan
    max_u_diff: float = math.nan
    tol: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.converged >= 2 and self.max_tau_diff <= self.tol and self.max_u_diff <= self.tol

    def as_dict(self) -> dict:
        return {
            "r": self.r,
            "seeds": self.seeds,
            "converged": self.converged,
            "rejected": self.rejected,
            "max_tau_diff": self.max_tau_diff,
            "max_u_diff": self.max_u_diff,
            "passed": self.passed,
        }


def uniqueness_probe(problem: PrescribedProblem, r: float, n_seeds: int = 5, grid: SphereGrid | None = None,
                     rho: float | None = None, seed: int = 0, noise_scale: float | None = None,
                     settings: SolverSettings = DEFAULT_SETTINGS) -> UniquenessReport:
    """Re-solve from randomized seeds and compare the resulting leaves.

    The u seed is u_0 plus band-limited noise of sup norm
    ``0.3 r^{3/2} |u_0|`` (or ``noise_scale``); tau seeds are drawn uniformly
    from the ball of radius rho/2. For constant f, tau is held at 0 as in
    :func:`build_family` and only u is perturbed.
    """
    if n_seeds < 3:
        raise ValueError("uniqueness_probe needs at least 3 seeds")
    grid = grid or SphereGrid(problem.n)
    rho = problem.chart.chart_radius / 16 if rho is None else rho
    rng = np.random.default_rng(seed)
    u0 = solve_u0(problem, grid)
    scale = 0.3 * r**1.5 * u0.sup() if noise_scale is None else noise_scale
    constant = problem.f.is_constant
    J = None if constant else model_jacobian(problem, settings)
    results, rejected = [], []
    dim = problem.chart.dim
    for k in range(n_seeds):
        noise = band_limited_noise(grid, scale, rng) if scale > 0 else SphereField.zeros(grid)
        direction = rng.normal(size=dim)
        tau0 = direction / np.linalg.norm(direction) * 0.5 * rho * rng.uniform() ** (1 / dim)
        useed = u0 + noise
        try:
            meancurv.check_embedded(useed * r**2, problem.delta0)
            if constant:
                inner = inner_solve(problem, r, np.zeros(dim), useed, settings)
                nr = NewtonResult(np.zeros(dim), inner.u, 0.0, 0, inner.iterations, inner.iterations, inner)
            else:
                nr = newton_tau(problem, r, tau0, grid, useed, settings, jacobian=J)
        except meancurv.EmbeddednessError as exc:
            rejected.append({"seed": k, "reason": f"embeddedness guard: {exc}"})
            continue
        except (ConvergenceError, SingularJacobianError, geometry.GeometryError) as exc:
            rejected.append({"seed": k, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        results.append(nr)
    rep = UniquenessReport(r, n_seeds, len(results), rejected)
    if len(results) >= 2:
        taus = np.array([x.tau for x in results])
        rep.max_tau_diff = float(max(np.max(np.abs(a - b)) for a in taus for b in taus))
        rep.max_u_diff = float(max((a.u - b.u).sup() for a in results for b in results))
    return rep
