"""Quadrature grids, real spherical harmonics and spectral operators on S^1, S^2."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln, sph_legendre_p

KERNEL_TOL = 1e-9


class KernelObstructionError(ValueError):
    """Right-hand side has a component in the kernel of (Delta + n)."""


def sphere_area(n: int) -> float:
    return 2 * np.pi if n == 1 else 4 * np.pi


def _index(n: int, L: int) -> list[tuple[int, int]]:
    idx = [(0, 0)]
    for ell in range(1, L + 1):
        if n == 1:
            idx += [(ell, -ell), (ell, ell)]
        else:
            idx += [(ell, m) for m in range(-ell, ell + 1)]
    return idx


def _circle_basis(index, theta, derivs: int):
    """Basis values and theta-derivatives on S^1, each of shape (len(theta), M)."""
    out = [np.empty((theta.size, len(index))) for _ in range(derivs + 1)]
    for col, (ell, m) in enumerate(index):
        if ell == 0:
            out[0][:, col] = 1 / np.sqrt(2 * np.pi)
            for d in range(1, derivs + 1):
                out[d][:, col] = 0.0
            continue
        if m < 0:
            vals = [np.sin(ell * theta), ell * np.cos(ell * theta), -(ell**2) * np.sin(ell * theta)]
        else:
            vals = [np.cos(ell * theta), -ell * np.sin(ell * theta), -(ell**2) * np.cos(ell * theta)]
        for d in range(derivs + 1):
            out[d][:, col] = vals[d] / np.sqrt(np.pi)
    return out


def _sphere_basis(index, theta, phi, derivs: int):
    """Real spherical harmonics and their (theta, phi) derivatives.

    Returns a dict keyed by '', 't', 'p', 'tt', 'tp', 'pp' (up to ``derivs``).
    """
    keys = [""] + (["t", "p"] if derivs >= 1 else []) + (["tt", "tp", "pp"] if derivs >= 2 else [])
    out = {k: np.empty((theta.size, len(index))) for k in keys}
    cache = {}
    for col, (ell, m) in enumerate(index):
        am = abs(m)
        if (ell, am) not in cache:
            cache[(ell, am)] = np.asarray(sph_legendre_p(ell, am, theta, diff_n=2))
        P, Pt, Ptt = cache[(ell, am)]
        if m == 0:
            trig, dtrig, ddtrig = np.ones_like(phi), np.zeros_like(phi), np.zeros_like(phi)
            scale = 1.0
        elif m > 0:
            trig, dtrig, ddtrig = np.cos(am * phi), -am * np.sin(am * phi), -(am**2) * np.cos(am * phi)
            scale = np.sqrt(2.0)
        else:
            trig, dtrig, ddtrig = np.sin(am * phi), am * np.cos(am * phi), -(am**2) * np.sin(am * phi)
            scale = np.sqrt(2.0)
        out[""][:, col] = scale * P * trig
        if derivs >= 1:
            out["t"][:, col] = scale * Pt * trig
            out["p"][:, col] = scale * P * dtrig
        if derivs >= 2:
            out["tt"][:, col] = scale * Ptt * trig
            out["tp"][:, col] = scale * Pt * dtrig
            out["pp"][:, col] = scale * P * ddtrig
    return out


def embed(n: int, angles: np.ndarray) -> np.ndarray:
    """Unit vectors (shape (n+1, N)) for angle arrays of shape (n, N)."""
    if n == 1:
        t = angles[0]
        return np.stack([np.cos(t), np.sin(t)])
    t, p = angles
    return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])


def embed_derivatives(n: int, angles: np.ndarray) -> dict:
    """First and second angular derivatives of the embedding S^n -> R^{n+1}."""
    if n == 1:
        t = angles[0]
        x = np.stack([np.cos(t), np.sin(t)])
        xt = np.stack([-np.sin(t), np.cos(t)])
        return {"": x, "t": xt, "tt": -x}
    t, p = angles
    st, ct, sp, cp = np.sin(t), np.cos(t), np.sin(p), np.cos(p)
    zero = np.zeros_like(t)
    return {
        "": np.stack([st * cp, st * sp, ct]),
        "t": np.stack([ct * cp, ct * sp, -st]),
        "p": np.stack([-st * sp, st * cp, zero]),
        "tt": np.stack([-st * cp, -st * sp, -ct]),
        "tp": np.stack([-ct * sp, ct * cp, zero]),
        "pp": np.stack([-st * cp, -st * sp, zero]),
    }


def angles_of(points: np.ndarray) -> np.ndarray:
    """Inverse of :func:`embed` for unit vectors (shape (n+1, N))."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 2:
        return np.mod(np.arctan2(points[1], points[0]), 2 * np.pi)[None]
    t = np.arccos(np.clip(points[2], -1.0, 1.0))
    p = np.mod(np.arctan2(points[1], points[0]), 2 * np.pi)
    return np.stack([t, p])


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """Tensor quadrature grid on S^n together with a truncated harmonic basis.

    S^1 uses 4L+1 equispaced nodes; S^2 uses Gauss-Legendre colatitudes times
    2L+1 equispaced longitudes. Both integrate products of harmonics of
    combined degree <= 2L exactly.
    """

    n: int
    L: int = 16
    angles: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only S^1 and S^2 are supported")
        if self.L < 1:
            raise ValueError("truncation degree must be >= 1")
        if self.n == 1:
            N = 4 * self.L + 1
            angles = (2 * np.pi * np.arange(N) / N)[None]
            weights = np.full(N, 2 * np.pi / N)
        else:
            t, w = np.polynomial.legendre.leggauss(self.L + 1)
            nphi = 2 * self.L + 1
            phi = 2 * np.pi * np.arange(nphi) / nphi
            theta = np.arccos(t)
            T, P = np.meshgrid(theta, phi, indexing="ij")
            angles = np.stack([T.ravel(), P.ravel()])
            weights = np.repeat(w, nphi) * (2 * np.pi / nphi)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def size(self) -> int:
        return self.weights.size

    @cached_property
    def nodes(self) -> np.ndarray:
        return embed(self.n, self.angles)

    @cached_property
    def index(self) -> list[tuple[int, int]]:
        return _index(self.n, self.L)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([ell for ell, _ in self.index])

    @property
    def ncoeffs(self) -> int:
        return len(self.index)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Laplace-Beltrami eigenvalue per coefficient, -l(l+n-1)."""
        ell = self.degrees
        return -(ell * (ell + self.n - 1)).astype(float)

    def basis_at(self, angles: np.ndarray, derivs: int = 0) -> dict:
        """Basis matrices at arbitrary angles, keyed by derivative label."""
        angles = np.atleast_2d(np.asarray(angles, dtype=float))
        if self.n == 1:
            mats = _circle_basis(self.index, angles[0], derivs)
            keys = ["", "t", "tt"][: derivs + 1]
            return dict(zip(keys, mats))
        return _sphere_basis(self.index, angles[0], angles[1], derivs)

    @cached_property
    def basis(self) -> dict:
        return self.basis_at(self.angles, derivs=2)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def evaluate(self, coeffs, angles=None, derivs: int = 0) -> dict:
        """Synthesize a band-limited function and its angular derivatives."""
        mats = self.basis if angles is None else self.basis_at(angles, derivs)
        keys = [k for k in mats if len(k) <= derivs]
        return {k: mats[k] @ coeffs for k in keys}

    def gradient_norm(self, coeffs, angles=None) -> np.ndarray:
        d = self.evaluate(coeffs, angles, derivs=1)
        if self.n == 1:
            return np.abs(d["t"])
        theta = (self.angles if angles is None else np.asarray(angles))[0]
        return np.sqrt(d["t"] ** 2 + (d["p"] / np.sin(theta)) ** 2)


def analyze(grid: SphereGrid, values, return_overflow: bool = False):
    """Harmonic coefficients of nodal ``values`` (exact when band-limited to L).

    With ``return_overflow`` also returns the L2 norm of the part of ``values``
    not representable at degree L.
    """
    values = np.asarray(values, dtype=float)
    coeffs = grid.basis[""].T @ (grid.weights * values)
    if not return_overflow:
        return coeffs
    rest = values - grid.basis[""] @ coeffs
    return coeffs, float(np.sqrt(grid.integrate(rest**2)))


def synthesize(grid: SphereGrid, coeffs) -> np.ndarray:
    return grid.basis[""] @ np.asarray(coeffs, dtype=float)


@dataclass(frozen=True, eq=False)
class SphereField:
    """Nodal values on a grid plus their harmonic coefficients."""

    grid: SphereGrid
    values: np.ndarray
    coeffs: np.ndarray
    overflow: float = 0.0

    @classmethod
    def from_values(cls, grid: SphereGrid, values) -> "SphereField":
        values = np.asarray(values, dtype=float).copy()
        coeffs, overflow = analyze(grid, values, return_overflow=True)
        return cls(grid, values, coeffs, overflow)

    @classmethod
    def from_coeffs(cls, grid: SphereGrid, coeffs) -> "SphereField":
        coeffs = np.asarray(coeffs, dtype=float).copy()
        return cls(grid, synthesize(grid, coeffs), coeffs)

    @classmethod
    def from_function(cls, grid: SphereGrid, func) -> "SphereField":
        """Sample ``func`` (taking unit vectors of shape (n+1, N)) at the nodes."""
        return cls.from_values(grid, func(grid.nodes))

    @classmethod
    def zeros(cls, grid: SphereGrid) -> "SphereField":
        return cls.from_coeffs(grid, np.zeros(grid.ncoeffs))

    def __add__(self, other: "SphereField") -> "SphereField":
        return SphereField(self.grid, self.values + other.values, self.coeffs + other.coeffs)

    def __sub__(self, other: "SphereField") -> "SphereField":
        return SphereField(self.grid, self.values - other.values, self.coeffs - other.coeffs)

    def __mul__(self, s: float) -> "SphereField":
        return SphereField(self.grid, self.values * s, self.coeffs * s)

    __rmul__ = __mul__

    def resample(self, grid: SphereGrid) -> "SphereField":
        """Same band-limited function on another grid (dropping degrees above its L)."""
        if grid.n != self.grid.n:
            raise ValueError("grids live on different spheres")
        slot = {key: k for k, key in enumerate(grid.index)}
        coeffs = np.zeros(grid.ncoeffs)
        for key, c in zip(self.grid.index, self.coeffs):
            if key in slot:
                coeffs[slot[key]] = c
        return SphereField.from_coeffs(grid, coeffs)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def l2(self) -> float:
        return float(np.sqrt(self.grid.integrate(self.values**2)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["l", "m", "coefficient"])
        for (ell, m), c in zip(self.grid.index, self.coeffs):
            w.writerow([ell, m, format(float(c), ".17g")])
        return buf.getvalue()


def quadrature(field: SphereField) -> float:
    return field.grid.integrate(field.values)


def laplace_beltrami(field: SphereField) -> SphereField:
    return SphereField.from_coeffs(field.grid, field.coeffs * field.grid.eigenvalues)


def pi_tilde(field: SphereField) -> np.ndarray:
    """Coordinates of the kernel projection in the basis x^1 .. x^{n+1}."""
    g = field.grid
    return (g.n + 1) / sphere_area(g.n) * (g.nodes @ (g.weights * field.values))


def project_K(field: SphereField) -> SphereField:
    g = field.grid
    return SphereField.from_values(g, pi_tilde(field) @ g.nodes)


def project_Kperp(field: SphereField) -> SphereField:
    g = field.grid
    vals = field.values - pi_tilde(field) @ g.nodes
    return SphereField.from_values(g, vals)


def shifted_inverse_factors(grid: SphereGrid) -> np.ndarray:
    """Per-coefficient inverse of (Delta + n) on the complement of the kernel."""
    shift = grid.n + grid.eigenvalues
    out = np.zeros_like(shift)
    mask = grid.degrees != 1
    out[mask] = 1.0 / shift[mask]
    return out


def solve_shifted(h: SphereField, tol: float = KERNEL_TOL) -> SphereField:
    """Solve (Delta + n) u = h with u orthogonal to the kernel.

    Raises :class:`KernelObstructionError` if h is not L2-orthogonal to the
    degree-one harmonics (relative tolerance ``tol``).
    """
    norm_h = h.l2()
    kern = project_K(h).l2()
    if kern > tol * norm_h:
        raise KernelObstructionError(
            f"right-hand side has kernel component {kern:.3e} (relative {kern / norm_h:.3e})"
        )
    return SphereField.from_coeffs(h.grid, h.coeffs * shifted_inverse_factors(h.grid))


# --------------------------------------------------------------------------
# monomial integrals


def monomial_integral(alpha) -> float:
    """Closed-form integral of prod_j (x^j)^alpha_j over the unit sphere.

    Zero when any exponent is odd, otherwise
    2 prod Gamma(b_j) / Gamma(sum b_j) with b_j = (alpha_j + 1) / 2.
    """
    alpha = np.asarray(alpha, dtype=int)
    if np.any(alpha < 0):
        raise ValueError("exponents must be nonnegative")
    if np.any(alpha % 2):
        return 0.0
    b = 0.5 * (alpha + 1)
    return float(2.0 * np.exp(np.sum(gammaln(b)) - gammaln(np.sum(b))))


def monomial_quadrature(grid: SphereGrid, alpha) -> float:
    vals = np.prod(grid.nodes ** np.asarray(alpha, dtype=int)[:, None], axis=0)
    return grid.integrate(vals)


def exponent_tuples(count: int, max_total: int):
    """All nonnegative integer tuples of length ``count`` with sum <= max_total."""
    for alpha in itertools.product(range(max_total + 1), repeat=count):
        if sum(alpha) <= max_total:
            yield alpha


def monomial_identity_error(n: int, max_total: int = 8, L: int = 16) -> tuple[float, tuple]:
    """Worst quadrature-vs-closed-form gap over all monomials up to ``max_total``.

    Returns the error and the exponent tuple where it occurs.
    """
    grid = SphereGrid(n, L)
    worst, where = 0.0, ()
    for alpha in exponent_tuples(n + 1, max_total):
        err = abs(monomial_quadrature(grid, alpha) - monomial_integral(alpha))
        if err > worst or not where:
            worst, where = err, alpha
    return worst, where
