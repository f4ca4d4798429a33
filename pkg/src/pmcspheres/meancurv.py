"""Mean curvature of normal graphs over S^n and the rescaled restriction of f.

Surfaces are parametrized in the rescaled ball B_2 as ``x -> (1 - w(x)) x``
for a displacement ``w`` on S^n, and the metric there is the rescaled
pullback ``gbar`` of :mod:`pmcspheres.geometry`. Mean curvature is the sum
of principal curvatures with respect to the inward normal, so the round unit
sphere has H = n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprfield, geometry, sphereharm
from .exprfield import Expr
from .geometry import Frame, MetricChart, RescaledMetric
from .sphereharm import SphereField, SphereGrid

DELTA0 = 0.1
FORM_CONDITION_LIMIT = 1e12


def _einsum(spec, *ops):
    # index ranges here are at most 3, so the plain C loop beats a path search
    return np.einsum(spec, *ops)


class EmbeddednessError(ValueError):
    pass


class DegenerateFormError(ValueError):
    pass


def graph_c1_norm(w: SphereField) -> float:
    """sup |w| + sup |grad w| at the grid nodes."""
    grad = w.grid.gradient_norm(w.coeffs)
    return float(np.max(np.abs(w.values)) + np.max(grad))


def check_embedded(w: SphereField, delta0: float = DELTA0) -> float:
    size = graph_c1_norm(w)
    if not np.isfinite(size) or size >= delta0:
        raise EmbeddednessError(f"graph displacement has C1 size {size:.3g}, guard is {delta0:g}")
    return size


@dataclass(frozen=True, eq=False)
class GraphSphere:
    """The surface S_{r,tau,r^2 u}; ``u`` is the unknown of the reduced equation."""

    r: float
    tau: np.ndarray
    u: SphereField
    frame: Frame

    @property
    def displacement(self) -> SphereField:
        return self.u * self.r**2

    def check(self, delta0: float = DELTA0) -> float:
        return check_embedded(self.displacement, delta0)

    def points(self, chart: MetricChart, angles=None) -> np.ndarray:
        """Chart coordinates of the surface at the grid nodes (or given angles)."""
        grid = self.u.grid
        if angles is None:
            x, w = grid.nodes, self.displacement.values
        else:
            x = sphereharm.embed(grid.n, np.asarray(angles, dtype=float))
            w = grid.evaluate(self.displacement.coeffs, angles)[""]
        return RescaledMetric(chart, self.frame, self.r).psi((1 - w) * x)


@dataclass(frozen=True, eq=False)
class PrescribedProblem:
    """A chart, a positive function f, and caches keyed by (tau, r, grid)."""

    chart: MetricChart
    f: Expr
    delta0: float = DELTA0
    initial_basis: np.ndarray | None = None
    _frames: dict = field(default_factory=dict, repr=False)
    _F: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.f.dim != self.chart.dim:
            raise ValueError("f and the metric live in different dimensions")
        if not self.fp > 0:
            raise ValueError(f"f must be positive at the base point, got f(p) = {self.fp:g}")

    @property
    def n(self) -> int:
        return self.chart.dim - 1

    @property
    def fp(self) -> float:
        return float(self.f(np.zeros(self.chart.dim)))

    @property
    def c_bar(self) -> float:
        return self.n / self.fp

    def frame(self, tau) -> Frame:
        tau = np.asarray(tau, dtype=float).reshape(self.chart.dim)
        key = tau.tobytes()
        if key not in self._frames:
            self._frames[key] = geometry.parallel_transport(self.chart, tau, self.initial_basis)
        return self._frames[key]

    def f_jet(self, point=None, order: int = 3) -> exprfield.Jet3:
        point = np.zeros(self.chart.dim) if point is None else point
        return exprfield.eval_jet(self.f, point, order)

    def clear_cache(self):
        self._frames.clear()
        self._F.clear()


# --------------------------------------------------------------------------
# mean curvature


def _christoffel_bar(gbar: np.ndarray, dgbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ginv = np.moveaxis(np.linalg.inv(np.moveaxis(gbar, -1, 0)), 0, -1)
    # first[l, i, j] = 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
    first = 0.5 * (_einsum("lji...->lij...", dgbar) + dgbar - _einsum("ijl...->lij...", dgbar))
    return ginv, _einsum("kl...,lij...->kij...", ginv, first)


def graph_mean_curvature(rm: RescaledMetric, n: int, angles: np.ndarray, w: dict) -> np.ndarray:
    """Inward mean curvature of ``x -> (1 - w) x`` under gbar at the given angles.

    ``w`` maps derivative labels ('', 't', 'p', 'tt', 'tp', 'pp') to values.
    """
    X = sphereharm.embed_derivatives(n, angles)
    labels = ["t"] if n == 1 else ["t", "p"]
    rho = 1.0 - w[""]
    phi = rho * X[""]
    Pa = [rho * X[a] - w[a] * X[""] for a in labels]

    def second(a, b):
        key = a + b if a + b in X else b + a
        return rho * X[key] - w[key] * X[""] - w[a] * X[b] - w[b] * X[a]

    Pab = [[second(a, b) for b in labels] for a in labels]
    data = rm.evaluate(phi)
    ginv, gam = _christoffel_bar(data.gbar, data.dgbar)
    if n == 1:
        T = Pa[0]
        c = np.stack([T[1], -T[0]])
    else:
        c = np.cross(Pa[0], Pa[1], axis=0)
    norm = np.sqrt(_einsum("k...,kl...,l...->...", c, ginv, c))
    first = np.empty((n, n) + rho.shape)
    sff = np.empty((n, n) + rho.shape)
    for a in range(n):
        for b in range(a, n):
            first[a, b] = first[b, a] = _einsum("k...,kl...,l...->...", Pa[a], data.gbar, Pa[b])
            acc = Pab[a][b] + _einsum("kij...,i...,j...->k...", gam, Pa[a], Pa[b])
            sff[a, b] = sff[b, a] = -_einsum("k...,k...->...", c, acc) / norm
    mats = np.moveaxis(first, -1, 0)
    cond = np.linalg.cond(mats)
    if np.any(~np.isfinite(cond)) or np.any(cond > FORM_CONDITION_LIMIT):
        raise DegenerateFormError(f"first fundamental form condition {np.max(cond):.3e} exceeds 1e12")
    inv = np.linalg.inv(mats)
    return _einsum("zab,zba->z", inv, np.moveaxis(sff, -1, 0))


def mean_curvature(chart: MetricChart, frame: Frame, r: float, u: SphereField, angles=None,
                   delta0: float = DELTA0):
    """H[r, tau, u]: mean curvature of the graph of the displacement ``u``.

    Returns a :class:`SphereField` on the grid of ``u``, or a plain array when
    ``angles`` is given.
    """
    check_embedded(u, delta0)
    grid = u.grid
    rm = RescaledMetric(chart, frame, float(r))
    w = grid.evaluate(u.coeffs, angles, derivs=2)
    ang = grid.angles if angles is None else np.atleast_2d(np.asarray(angles, dtype=float))
    values = graph_mean_curvature(rm, grid.n, ang, w)
    if angles is not None:
        return values
    return SphereField.from_values(grid, values)


def f_restriction(problem: PrescribedProblem, frame: Frame, r: float, grid: SphereGrid) -> SphereField:
    """F[r, tau](x) = f(psi(x)) at the grid nodes, cached per (tau, r, grid)."""
    key = (frame.tau.tobytes(), float(r), grid.n, grid.L, id(frame))
    hit = problem._F.get(key)
    if hit is not None:
        return hit
    if r == 0:
        values = np.full(grid.size, float(problem.f(frame.center)))
    else:
        psi = RescaledMetric(problem.chart, frame, float(r)).psi(grid.nodes)
        values = exprfield.evaluate(problem.f, psi)
    out = SphereField.from_values(grid, values)
    problem._F[key] = out
    return out


# --------------------------------------------------------------------------
# expansion probes


def harmonic_test_function(n: int):
    """A degree-3 harmonic u with its value of (Delta + n) u, as callables of x."""
    if n == 1:
        u = lambda x: x[0] ** 3 - 3 * x[0] * x[1] ** 2
        lam = 1 - 9
    else:
        u = lambda x: x[0] * x[1] * x[2]
        lam = 2 - 12
    return u, (lambda x: lam * u(x))


def covariant_f_derivatives(problem: PrescribedProblem, frame: Frame | None = None):
    """Frame components of df, nabla^2 f and nabla(nabla^2 f) at the frame center."""
    chart = problem.chart
    frame = frame or problem.frame(np.zeros(chart.dim))
    x = frame.center
    jet = problem.f_jet(x, 3)
    data = geometry.metric_data(chart, x[:, None], 1)
    G = data.gamma[..., 0]
    dG = data.dgamma[..., 0]
    hess = jet.hess - _einsum("kij,k->ij", G, jet.grad)
    third = (
        np.transpose(jet.third, (1, 2, 0))
        - _einsum("kijl,k->ijl", dG, jet.grad)
        - _einsum("kij,lk->ijl", G, jet.hess)
        - _einsum("kli,kj->ijl", G, hess)
        - _einsum("klj,ik->ijl", G, hess)
    )
    # third[i, j, l] = (nabla_l nabla^2 f)_ij
    E = frame.basis
    return (
        E.T @ jet.grad,
        E.T @ hess @ E,
        _einsum("ijl,ia,jb,lc->abc", third, E, E, E),
    )


def loglog_slope(r, values) -> float:
    r = np.asarray(r, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        return float("nan")
    return float(np.polyfit(np.log(r), np.log(values), 1)[0])


@dataclass
class ExpansionReport:
    r: np.ndarray
    remainders: dict  # name -> array of sup-norm remainders
    slopes: dict
    floors: dict = field(default_factory=dict)  # name -> level treated as exact zero

    def passed(self, name: str, min_slope: float = 2.9) -> bool:
        rem = self.remainders[name]
        if np.max(rem) <= self.floors.get(name, 1e-12):
            return True
        return bool(self.slopes[name] >= min_slope)

    def as_dict(self) -> dict:
        return {
            "r": self.r.tolist(),
            "remainders": {k: v.tolist() for k, v in self.remainders.items()},
            "slopes": self.slopes,
            "floors": self.floors,
        }


def expansion_residuals(problem: PrescribedProblem, r_list, grid: SphereGrid, u_test=None,
                        tau_step: float = 1e-4) -> ExpansionReport:
    """Remainders of the three small-r expansions of H and F at tau = 0.

    ``u_test`` is a pair ``(u, Lu)`` of callables on unit vectors with
    ``Lu = (Delta + n) u``; by default a degree-3 harmonic. The tau-derivative
    of F uses Richardson-extrapolated central differences.
    """
    r_list = np.asarray(sorted(r_list, reverse=True), dtype=float)
    if r_list.size < 4 or np.any(r_list <= 0) or np.any(r_list > 0.2):
        raise ValueError("need at least 4 radii in (0, 0.2]")
    chart, n, d = problem.chart, problem.n, problem.chart.dim
    u_fn, Lu_fn = u_test or harmonic_test_function(n)
    x = grid.nodes
    u = SphereField.from_function(grid, u_fn)
    Lu = Lu_fn(x)
    frame0 = problem.frame(np.zeros(d))
    R = geometry.ricci_in_frame(chart, frame0)
    Rxx = _einsum("ij,iz,jz->z", R, x, x)
    df, hess, third = covariant_f_derivatives(problem, frame0)
    fp = problem.fp
    rem = {"H": [], "F": [], "dF": []}
    frames = {}
    for sign in (-2, -1, 1, 2):
        for l in range(d):
            tau = np.zeros(d)
            tau[l] = sign * tau_step
            frames[(sign, l)] = problem.frame(tau)
    for r in r_list:
        H = mean_curvature(chart, frame0, r, u * r**2, delta0=problem.delta0).values
        rem["H"].append(np.max(np.abs(H - n - (Lu - Rxx / 3) * r**2)))
        F = f_restriction(problem, frame0, r, grid).values
        model = fp + (df @ x) * r + 0.5 * _einsum("ij,iz,jz->z", hess, x, x) * r**2
        rem["F"].append(np.max(np.abs(F - model)))
        worst = 0.0
        for l in range(d):
            vals = {s: f_restriction(problem, frames[(s, l)], r, grid).values for s in (-2, -1, 1, 2)}
            d1 = (vals[1] - vals[-1]) / (2 * tau_step)
            d2 = (vals[2] - vals[-2]) / (4 * tau_step)
            dF = (4 * d1 - d2) / 3
            model = (df[l] + (hess[l] @ x) * r
                     + 0.5 * _einsum("ij,iz,jz->z", third[:, :, l], x, x) * r**2)
            worst = max(worst, float(np.max(np.abs(dF - model))))
        rem["dF"].append(worst)
    rem = {k: np.array(v) for k, v in rem.items()}
    slopes = {k: loglog_slope(r_list, v) for k, v in rem.items()}
    # rounding in F is amplified by 1/tau_step in the difference quotient
    eps = np.finfo(float).eps
    floors = {"H": 1e-12 * n, "F": 1e-12 * abs(fp), "dF": max(1e-12, 100 * eps * abs(fp) / tau_step)}
    return ExpansionReport(r_list, rem, slopes, floors)
