"""Chart-level Riemannian geometry.

Everything here works in a single coordinate chart whose origin is the base
point p. Metric components are :class:`~pmcspheres.exprfield.Expr` objects;
their derivatives come from Taylor jets, so Christoffel symbols and their
first two derivatives are exact up to rounding.

Geodesics are integrated with classical RK4, once with N steps and once with
2N, and the two endpoints are combined by Richardson extrapolation. The first
(and optionally second) variation with respect to the initial velocity and
any parallel-transported vectors are co-integrated with the geodesic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import exprfield
from .exprfield import Expr

ORTHONORMAL_TOL = 1e-9
DRIFT_FAIL = 1e-8
CONDITION_LIMIT = 1e12


def _einsum(spec, *ops):
    # index ranges are at most 3, so the plain C loop beats any contraction-path search
    return np.einsum(spec, *ops)


class GeometryError(ValueError):
    pass


class SingularMetricError(GeometryError):
    pass


class OutOfDomainError(GeometryError):
    def __init__(self, message: str, exit_time: float | None = None):
        super().__init__(message)
        self.exit_time = exit_time


class IntegrationToleranceError(GeometryError):
    pass


@dataclass(frozen=True)
class IntegratorSettings:
    """RK4 step control: ``steps = max(min_steps, ceil(length / max_step))``."""

    max_step: float = 0.03
    min_steps: int = 2
    richardson: bool = True

    def steps_for(self, length: float) -> int:
        return max(self.min_steps, int(math.ceil(length / self.max_step)))


DEFAULT_INTEGRATOR = IntegratorSettings()


# --------------------------------------------------------------------------
# charts


@dataclass(frozen=True, eq=False)
class MetricChart:
    """Metric components ``g[i][j]`` (shared objects for i, j and j, i)."""

    dim: int
    g: tuple
    chart_radius: float
    name: str = "custom"
    integrator: IntegratorSettings = field(default=DEFAULT_INTEGRATOR)
    check_samples: int = 500

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise GeometryError("chart dimension must be 2 or 3")
        g = tuple(tuple(row) for row in self.g)
        if len(g) != self.dim or any(len(row) != self.dim for row in g):
            raise GeometryError("metric must be a dim x dim array of expressions")
        for i in range(self.dim):
            for j in range(self.dim):
                if g[i][j] is not g[j][i]:
                    raise GeometryError(f"g[{i}][{j}] and g[{j}][{i}] must be the same expression")
                if g[i][j].dim != self.dim:
                    raise GeometryError("metric expression dimension mismatch")
        object.__setattr__(self, "g", g)
        if self.chart_radius <= 0:
            raise GeometryError("chart_radius must be positive")
        self._check_positive_definite()

    def _check_positive_definite(self):
        rng = np.random.default_rng(20240601)
        pts = rng.normal(size=(self.dim, self.check_samples))
        pts /= np.linalg.norm(pts, axis=0)
        pts *= self.chart_radius * rng.uniform(size=self.check_samples) ** (1 / self.dim)
        pts[:, 0] = 0.0
        try:
            G = self.metric(pts)
        except exprfield.DomainError as exc:
            raise GeometryError(f"metric undefined inside the chart ball: {exc}") from exc
        eig = np.linalg.eigvalsh(np.moveaxis(G, -1, 0))
        bad = np.flatnonzero(eig[:, 0] <= 0)
        if bad.size:
            raise GeometryError(f"metric not positive definite at {pts[:, bad[0]].tolist()}")

    @cached_property
    def is_flat(self) -> bool:
        """True when every component is constant (geodesics are straight lines)."""
        return all(self.g[i][j].is_constant for i in range(self.dim) for j in range(i, self.dim))

    def components(self) -> list[Expr]:
        return [self.g[i][j] for i in range(self.dim) for j in range(i, self.dim)]

    def metric(self, x) -> np.ndarray:
        """Metric matrix, shape (dim, dim, *batch)."""
        return _assemble(self, exprfield.jets(self.components(), x, 0), lambda j: j.value)


def _assemble(chart: MetricChart, jets, get):
    d = chart.dim
    vals = [get(j) for j in jets]
    out = np.empty((d, d) + np.shape(vals[0]))
    k = 0
    for i in range(d):
        for j in range(i, d):
            out[i, j] = vals[k]
            out[j, i] = vals[k]
            k += 1
    return out


def chart_from_strings(rows, chart_radius: float, name: str = "explicit", **kw) -> MetricChart:
    """Build a chart from a full or upper-triangular matrix of expression strings."""
    dim = len(rows)
    parsed = {}
    for i in range(dim):
        for j in range(i, dim):
            text = rows[i][j]
            if text is None:
                raise GeometryError(f"missing metric component g{i + 1}{j + 1}")
            if j < len(rows[j]) and i < len(rows[j]) and rows[j][i] not in (None, text) and i != j:
                if exprfield.parse(rows[j][i], dim).to_text() != exprfield.parse(text, dim).to_text():
                    raise GeometryError(f"g{i + 1}{j + 1} and g{j + 1}{i + 1} differ")
            parsed[(i, j)] = exprfield.parse(text, dim)
    g = [[parsed[(min(i, j), max(i, j))] for j in range(dim)] for i in range(dim)]
    return MetricChart(dim, g, chart_radius, name, **kw)


def euclidean(dim: int, chart_radius: float = 1.0, **kw) -> MetricChart:
    one, zero = exprfield.constant(1.0, dim), exprfield.constant(0.0, dim)
    g = [[one if i == j else zero for j in range(dim)] for i in range(dim)]
    return MetricChart(dim, g, chart_radius, "euclidean", **kw)


def conformal(dim: int, epsilon: float, chart_radius: float = 1.0, **kw) -> MetricChart:
    """The metric ``(1 + epsilon |x|^2)^2 I``."""
    r2 = " + ".join(f"x{k + 1}^2" for k in range(dim))
    phi2 = exprfield.parse(f"(1 + {float(epsilon)!r}*({r2}))^2", dim)
    zero = exprfield.constant(0.0, dim)
    g = [[phi2 if i == j else zero for j in range(dim)] for i in range(dim)]
    return MetricChart(dim, g, chart_radius, f"conformal(epsilon={epsilon})", **kw)


def diagonal(exprs, chart_radius: float = 1.0, **kw) -> MetricChart:
    dim = len(exprs)
    diag = [e if isinstance(e, Expr) else exprfield.parse(e, dim) for e in exprs]
    zero = exprfield.constant(0.0, dim)
    g = [[diag[i] if i == j else zero for j in range(dim)] for i in range(dim)]
    return MetricChart(dim, g, chart_radius, "diagonal", **kw)


# --------------------------------------------------------------------------
# curvature


@dataclass
class MetricData:
    """Metric and Christoffel data at a batch of points (batch axis last)."""

    g: np.ndarray
    dg: np.ndarray | None
    gamma: np.ndarray
    dgamma: np.ndarray | None = None
    d2gamma: np.ndarray | None = None


def _metric_tensors(chart: MetricChart, x, order: int) -> list[np.ndarray]:
    """[g, dg, d2g, ...] with derivative indices appended after (i, j)."""
    d = chart.dim
    comps = exprfield.jets(chart.components(), x, order)
    out = []
    for k in range(order + 1):
        t = np.empty((d, d) + (d,) * k + x.shape[1:])
        c = 0
        for i in range(d):
            for j in range(i, d):
                t[i, j] = t[j, i] = comps[c].derivative_tensor(k)
                c += 1
        out.append(t)
    return out


def _first_kind(D: np.ndarray) -> np.ndarray:
    """Gamma_{l,ij} = (d_i g_lj + d_j g_li - d_l g_ij) / 2, extra indices carried along."""
    return 0.5 * (_einsum("lji...->lij...", D) + D - _einsum("ijl...->lij...", D))


def metric_data(chart: MetricChart, x, level: int = 0) -> MetricData:
    """Metric, its first derivatives and Christoffel symbols Gamma[k, i, j].

    ``level`` 1 adds dgamma[k, i, j, m] = d_m Gamma^k_ij, level 2 adds
    d2gamma[k, i, j, m, l]. Metric derivatives come from Taylor jets; the
    inverse metric and its derivatives are assembled with plain tensor algebra.
    """
    x = np.asarray(x, dtype=float)
    d = chart.dim
    batch = x.shape[1:]
    if chart.is_flat:
        g = chart.metric(x)
        out = MetricData(g, np.zeros((d, d, d) + batch), np.zeros((d, d, d) + batch))
        if level >= 1:
            out.dgamma = np.zeros((d,) * 4 + batch)
        if level >= 2:
            out.d2gamma = np.zeros((d,) * 5 + batch)
        return out
    T = _metric_tensors(chart, x, level + 1)
    g, D1 = T[0], T[1]
    A = np.moveaxis(np.linalg.inv(np.moveaxis(g, (0, 1), (-2, -1))), (-2, -1), (0, 1))
    G1 = _first_kind(D1)
    out = MetricData(g, D1, _einsum("kl...,lij...->kij...", A, G1))
    if level >= 1:
        D2 = T[2]
        dG1 = _first_kind(D2)
        dA = -_einsum("kp...,pqm...,ql...->klm...", A, D1, A)
        out.dgamma = _einsum("klm...,lij...->kijm...", dA, G1) + _einsum("kl...,lijm...->kijm...", A, dG1)
    if level >= 2:
        D3 = T[3]
        d2G1 = _first_kind(D3)
        d2A = (
            -_einsum("kpn...,pqm...,ql...->klmn...", dA, D1, A)
            - _einsum("kp...,pqmn...,ql...->klmn...", A, D2, A)
            - _einsum("kp...,pqm...,qln...->klmn...", A, D1, dA)
        )
        out.d2gamma = (
            _einsum("klmn...,lij...->kijmn...", d2A, G1)
            + _einsum("klm...,lijn...->kijmn...", dA, dG1)
            + _einsum("kln...,lijm...->kijmn...", dA, dG1)
            + _einsum("kl...,lijmn...->kijmn...", A, d2G1)
        )
    return out


def _check_conditioning(G: np.ndarray):
    mats = np.moveaxis(G.reshape(G.shape[0], G.shape[1], -1), -1, 0)
    cond = np.linalg.cond(mats)
    if np.any(~np.isfinite(cond)) or np.any(cond > CONDITION_LIMIT):
        raise SingularMetricError(f"metric condition number {np.max(cond):.3e} exceeds {CONDITION_LIMIT:.0e}")


def _in_ball(chart: MetricChart, x):
    r = np.linalg.norm(np.asarray(x, dtype=float), axis=0)
    if np.any(r >= chart.chart_radius):
        raise OutOfDomainError(f"point outside chart ball of radius {chart.chart_radius}")


def christoffel(chart: MetricChart, x) -> np.ndarray:
    """Christoffel symbols Gamma[k, i, j] at x (shape (dim,) or (dim, *batch))."""
    _in_ball(chart, x)
    data = metric_data(chart, x, 0)
    _check_conditioning(data.g)
    return data.gamma


def ricci(chart: MetricChart, x) -> np.ndarray:
    """Ricci tensor R_ij at x (shape (dim, dim, *batch))."""
    _in_ball(chart, x)
    data = metric_data(chart, x, 1)
    _check_conditioning(data.g)
    G, dG = data.gamma, data.dgamma
    term1 = _einsum("kijk...->ij...", dG)
    term2 = _einsum("kikj...->ij...", dG)
    term3 = _einsum("kkl...,lij...->ij...", G, G)
    term4 = _einsum("kjl...,lik...->ij...", G, G)
    R = term1 - term2 + term3 - term4
    return 0.5 * (R + np.swapaxes(R, 0, 1))


# --------------------------------------------------------------------------
# geodesic integration


@dataclass
class GeodesicState:
    x: np.ndarray  # (d, B)
    v: np.ndarray  # (d, B)
    Y: np.ndarray | None = None  # (d, a, B) first variation
    Yd: np.ndarray | None = None
    Z: np.ndarray | None = None  # (d, a, b, B) second variation
    Zd: np.ndarray | None = None
    W: np.ndarray | None = None  # (d, m, B) transported vectors

    def arrays(self):
        return [a for a in (self.x, self.v, self.Y, self.Yd, self.Z, self.Zd, self.W) if a is not None]

    def replace(self, arrays):
        it = iter(arrays)
        vals = [next(it) if a is not None else None for a in (self.x, self.v, self.Y, self.Yd, self.Z, self.Zd, self.W)]
        return GeodesicState(*vals)


def _velocity_data(chart: MetricChart, x, v, level: int):
    """Gamma together with dGamma and d2Gamma contracted with the velocity.

    Returns ``(Gamma[k,i,j], Gv[k,j], dGv[k,j,m], dGvv[k,m], d2Gvv[k,m,n])``
    where ``Gv = Gamma^k_ij v^i``, ``dGv = d_m Gamma^k_ij v^i`` and so on;
    entries beyond ``level`` are None. Contracting early keeps every tensor
    at rank <= 4 per point.
    """
    d = chart.dim
    batch = x.shape[1:]
    if chart.is_flat:
        z = lambda *s: np.zeros(s + batch)
        return (z(d, d, d), z(d, d), z(d, d, d) if level >= 1 else None,
                z(d, d) if level >= 1 else None, z(d, d, d) if level >= 2 else None)
    T = _metric_tensors(chart, x, level + 1)
    g, D1 = T[0], T[1]
    A = np.moveaxis(np.linalg.inv(np.moveaxis(g, (0, 1), (-2, -1))), (-2, -1), (0, 1))
    G1 = _first_kind(D1)
    G1v = _einsum("lij...,i...->lj...", G1, v)
    G1vv = _einsum("lj...,j...->l...", G1v, v)
    gamma = _einsum("kl...,lij...->kij...", A, G1)
    Gv = _einsum("kl...,lj...->kj...", A, G1v)
    if level == 0:
        return gamma, Gv, None, None, None
    D2 = T[2]
    dG1v = _einsum("lijm...,i...->ljm...", _first_kind(D2), v)
    dG1vv = _einsum("ljm...,j...->lm...", dG1v, v)
    AD1 = _einsum("kp...,pqm...->kqm...", A, D1)
    dA = -_einsum("kqm...,ql...->klm...", AD1, A)
    dGv = _einsum("klm...,lj...->kjm...", dA, G1v) + _einsum("kl...,ljm...->kjm...", A, dG1v)
    dGvv = _einsum("kjm...,j...->km...", dGv, v)
    if level == 1:
        return gamma, Gv, dGv, dGvv, None
    D3 = T[3]
    d2G1vv = _einsum("lijmn...,i...,j...->lmn...", _first_kind(D3), v, v)
    a = _einsum("kl...,l...->k...", A, G1vv)  # Gamma^k_ij v^i v^j
    b = _einsum("qln...,l...->qn...", dA, G1vv)
    d2A_G = (
        -_einsum("kpn...,pqm...,q...->kmn...", dA, D1, a)
        - _einsum("kp...,pqmn...,q...->kmn...", A, D2, a)
        - _einsum("kqm...,qn...->kmn...", AD1, b)
    )
    d2Gvv = (
        d2A_G
        + _einsum("klm...,ln...->kmn...", dA, dG1vv)
        + _einsum("kln...,lm...->kmn...", dA, dG1vv)
        + _einsum("kl...,lmn...->kmn...", A, d2G1vv)
    )
    return gamma, Gv, dGv, dGvv, d2Gvv


def _rhs(chart: MetricChart, s: GeodesicState, level: int):
    G, Gv, dGv, dGvv, d2Gvv = _velocity_data(chart, s.x, s.v, level)
    acc = -_einsum("kj...,j...->k...", Gv, s.v)
    out = [s.v, acc]
    if s.Y is not None:
        Ydd = -_einsum("km...,ma...->ka...", dGvv, s.Y) - 2 * _einsum("kj...,ja...->ka...", Gv, s.Yd)
        out += [s.Yd, Ydd]
    if s.Z is not None:
        t1 = _einsum("kml...,ma...,lb...->kab...", d2Gvv, s.Y, s.Y)
        t2 = _einsum("km...,mab...->kab...", dGvv, s.Z)
        t3 = _einsum("kjm...,ma...,jb...->kab...", dGv, s.Y, s.Yd)
        t5 = _einsum("kij...,ia...,jb...->kab...", G, s.Yd, s.Yd)
        t6 = _einsum("kj...,jab...->kab...", Gv, s.Zd)
        Zdd = -t1 - t2 - 2 * t3 - 2 * np.swapaxes(t3, 1, 2) - 2 * t5 - 2 * t6
        out += [s.Zd, Zdd]
    if s.W is not None:
        out.append(-_einsum("kj...,jm...->km...", Gv, s.W))
    return out


def _rk4(chart: MetricChart, state: GeodesicState, steps: int, level: int, monitor=None) -> GeodesicState:
    h = 1.0 / steps
    y = state.arrays()
    for n in range(steps):
        k1 = _rhs(chart, state.replace(y), level)
        k2 = _rhs(chart, state.replace([a + 0.5 * h * b for a, b in zip(y, k1)]), level)
        k3 = _rhs(chart, state.replace([a + 0.5 * h * b for a, b in zip(y, k2)]), level)
        k4 = _rhs(chart, state.replace([a + h * b for a, b in zip(y, k3)]), level)
        y = [a + (h / 6) * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
        radius = np.linalg.norm(y[0], axis=0)
        if np.any(radius >= chart.chart_radius):
            t = (n + 1) * h
            raise OutOfDomainError(f"geodesic leaves the chart ball (|x| >= {chart.chart_radius}) by t = {t:.4g}", t)
        if monitor is not None:
            monitor(state.replace(y))
    return state.replace(y)


@dataclass
class GeodesicResult:
    state: GeodesicState
    steps: int
    halving_error: float  # max |y_N - y_2N| over endpoint positions


def integrate(chart: MetricChart, state: GeodesicState, steps: int | None = None, level: int | None = None,
              monitor=None) -> GeodesicResult:
    """Integrate the geodesic system on t in [0, 1]."""
    if level is None:
        level = 2 if state.Z is not None else (1 if state.Y is not None else 0)
    speed = float(np.max(np.linalg.norm(state.v, axis=0))) if state.v.size else 0.0
    if chart.is_flat:
        # straight lines, and every variation is linear in t
        y = state.arrays()
        end = state.replace(y)
        end.x = state.x + state.v
        if state.Y is not None:
            end.Y = state.Y + state.Yd
        if state.Z is not None:
            end.Z = state.Z + state.Zd
        out = np.linalg.norm(end.x, axis=0) >= chart.chart_radius
        if np.any(out):
            k = int(np.flatnonzero(out)[0])
            x, v = state.x[:, k], state.v[:, k]
            a, b, c = v @ v, 2 * x @ v, x @ x - chart.chart_radius**2
            t = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
            raise OutOfDomainError(f"geodesic leaves the chart ball (|x| >= {chart.chart_radius}) at t = {t:.4g}", t)
        if monitor is not None:
            monitor(end)
        return GeodesicResult(end, 1, 0.0)
    settings = chart.integrator
    if steps is None:
        steps = settings.steps_for(speed)
    coarse = _rk4(chart, state, steps, level)
    if not settings.richardson:
        return GeodesicResult(coarse, steps, float("nan"))
    fine = _rk4(chart, state, 2 * steps, level, monitor)
    err = float(np.max(np.abs(fine.x - coarse.x))) if fine.x.size else 0.0
    combined = [(16 * f - c) / 15 for f, c in zip(fine.arrays(), coarse.arrays())]
    return GeodesicResult(fine.replace(combined), steps, err)


def exp_map(chart: MetricChart, base, v, differential: bool = False, steps: int | None = None):
    """Endpoint of the geodesic from ``base`` with initial velocity ``v``.

    Accepts single vectors (shape (dim,)) or batches (shape (dim, B)). With
    ``differential`` also returns d exp_base at v, shape (dim, dim[, B]).
    """
    base = np.asarray(base, dtype=float)
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    v2 = v[:, None] if single else v
    b2 = np.broadcast_to(base[:, None] if base.ndim == 1 else base, v2.shape).copy()
    _in_ball(chart, b2)
    d, B = v2.shape
    state = GeodesicState(b2, v2.copy())
    if differential:
        state.Y = np.zeros((d, d, B))
        state.Yd = np.repeat(np.eye(d)[:, :, None], B, axis=2)
    res = integrate(chart, state, steps)
    x = res.state.x[:, 0] if single else res.state.x
    if not differential:
        return x
    Y = res.state.Y[:, :, 0] if single else res.state.Y
    return x, Y


def gram_schmidt(G: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Orthonormalize the columns of ``basis`` (default: identity) w.r.t. G."""
    d = G.shape[0]
    B = np.eye(d) if basis is None else np.array(basis, dtype=float)
    out = np.zeros_like(B)
    for i in range(d):
        w = B[:, i].copy()
        for j in range(i):
            w -= (out[:, j] @ G @ w) * out[:, j]
        out[:, i] = w / np.sqrt(w @ G @ w)
    return out


# --------------------------------------------------------------------------
# frames


@dataclass(frozen=True, eq=False)
class Frame:
    """Point c(tau) and the parallel-transported orthonormal basis (columns)."""

    tau: np.ndarray
    center: np.ndarray
    basis: np.ndarray
    drift: float = 0.0

    def gram(self, chart: MetricChart) -> np.ndarray:
        G = chart.metric(self.center)
        return self.basis.T @ G @ self.basis


def initial_frame(chart: MetricChart, initial_basis=None) -> np.ndarray:
    G0 = chart.metric(np.zeros(chart.dim))
    if initial_basis is None:
        return gram_schmidt(G0)
    E = np.asarray(initial_basis, dtype=float)
    if np.max(np.abs(E.T @ G0 @ E - np.eye(chart.dim))) > ORTHONORMAL_TOL:
        raise GeometryError("initial basis is not orthonormal at the origin")
    return E


def _transport_drift(chart: MetricChart, state: GeodesicState) -> float:
    G = chart.metric(state.x)
    gram = _einsum("km...,kl...,ln...->mn...", state.W, G, state.W)
    eye = np.eye(chart.dim).reshape((chart.dim, chart.dim) + (1,) * (gram.ndim - 2))
    return float(np.max(np.abs(gram - eye)))


def transport_batch(chart: MetricChart, taus, initial_basis=None, differential: bool = False):
    """c(tau), transported frames and (optionally) dc/dtau for a batch of tau.

    Returns ``(centers (d, B), bases (d, d, B), dc (d, d, B) or None, drift)``.
    """
    taus = np.asarray(taus, dtype=float)
    d, B = taus.shape
    E0 = initial_frame(chart, initial_basis)
    lim = chart.chart_radius / 8
    if np.any(np.linalg.norm(taus, axis=0) >= lim):
        raise OutOfDomainError(f"|tau| must be below chart_radius/8 = {lim:g}")
    state = GeodesicState(np.zeros((d, B)), E0 @ taus, W=np.repeat(E0[:, :, None], B, axis=2))
    if differential:
        state.Y = np.zeros((d, d, B))
        state.Yd = np.repeat(E0[:, :, None], B, axis=2)
    drift = [0.0]

    def monitor(s):
        drift[0] = max(drift[0], _transport_drift(chart, s))

    res = integrate(chart, state, monitor=monitor)
    drift[0] = max(drift[0], _transport_drift(chart, res.state))
    if drift[0] > DRIFT_FAIL:
        raise IntegrationToleranceError(f"parallel transport drift {drift[0]:.3e} exceeds {DRIFT_FAIL:.0e}")
    return res.state.x, res.state.W, (res.state.Y if differential else None), drift[0]


def parallel_transport(chart: MetricChart, tau, initial_basis=None) -> Frame:
    """Frame at c(tau) = exp_p(tau^i e_i) obtained by transporting e_i(p)."""
    tau = np.asarray(tau, dtype=float).reshape(chart.dim)
    if not np.any(tau):
        E0 = initial_frame(chart, initial_basis)
        return Frame(tau.copy(), np.zeros(chart.dim), E0, 0.0)
    x, W, _, drift = transport_batch(chart, tau[:, None], initial_basis)
    return Frame(tau.copy(), x[:, 0], W[:, :, 0], drift)


def ricci_in_frame(chart: MetricChart, frame: Frame) -> np.ndarray:
    """R^tau_ij(0): Ricci tensor at c(tau) in the basis e_i^tau."""
    R = ricci(chart, frame.center)
    return frame.basis.T @ R @ frame.basis


# --------------------------------------------------------------------------
# rescaled metric


@dataclass
class RescaledData:
    psi: np.ndarray  # chart coordinates of psi(y), (d, B)
    gbar: np.ndarray  # (d, d, B)
    dgbar: np.ndarray | None  # (d, d, d, B), last tensor index is the derivative
    dpsi: np.ndarray  # (d, d, B)


@dataclass(frozen=True, eq=False)
class RescaledMetric:
    """gbar = r^-2 alpha_r^* phi_tau^* g on B_2, with psi(y) = exp_c(r y^k e_k)."""

    chart: MetricChart
    frame: Frame
    r: float

    def __post_init__(self):
        if self.r <= 0:
            raise GeometryError("r must be positive")
        reach = np.linalg.norm(self.frame.center) + 2 * self.r * np.linalg.norm(self.frame.basis, 2)
        if reach >= self.chart.chart_radius:
            raise OutOfDomainError(f"B_2 at r = {self.r} does not fit in the chart ball")

    @property
    def steps(self) -> int:
        # depends on r only, so every batch is integrated with the same map
        speed = 2.2 * self.r * float(np.linalg.norm(self.frame.basis, 2))
        return self.chart.integrator.steps_for(speed)

    def _shoot(self, y, level: int) -> GeodesicResult:
        y = np.asarray(y, dtype=float)
        d, B = y.shape
        E = self.frame.basis
        state = GeodesicState(np.repeat(self.frame.center[:, None], B, axis=1), self.r * (E @ y))
        if level >= 1:
            state.Y = np.zeros((d, d, B))
            state.Yd = np.repeat((self.r * E)[:, :, None], B, axis=2)
        if level >= 2:
            state.Z = np.zeros((d, d, d, B))
            state.Zd = np.zeros((d, d, d, B))
        return integrate(self.chart, state, steps=self.steps, level=level)

    def psi(self, y) -> np.ndarray:
        return self._shoot(y, 0).state.x

    def evaluate(self, y, derivatives: bool = True) -> RescaledData:
        """gbar (and its first derivatives) at points y of shape (d, B)."""
        res = self._shoot(y, 2 if derivatives else 1).state
        r2 = self.r**2
        md = metric_data(self.chart, res.x, 0)
        G = md.g
        gbar = _einsum("ka...,kl...,lb...->ab...", res.Y, G, res.Y) / r2
        gbar = 0.5 * (gbar + np.swapaxes(gbar, 0, 1))
        dgbar = None
        if derivatives:
            ZgY = _einsum("kac...,kl...,lb...->abc...", res.Z, G, res.Y)
            dG = _einsum("klm...,mc...->klc...", md.dg, res.Y)
            mid = _einsum("ka...,klc...,lb...->abc...", res.Y, dG, res.Y)
            dgbar = (ZgY + np.swapaxes(ZgY, 0, 1) + mid) / r2
        return RescaledData(res.x, gbar, dgbar, res.Y)


def rescaled_metric(chart: MetricChart, frame: Frame, r: float) -> RescaledMetric:
    return RescaledMetric(chart, frame, float(r))
