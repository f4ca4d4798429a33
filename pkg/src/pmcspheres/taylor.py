"""Truncated multivariate Taylor polynomials (forward-mode jets).

A :class:`Jet` stores the Taylor coefficients ``c_alpha = d^alpha f / alpha!``
of a function around a base point, for every monomial ``alpha`` of total
degree ``<= order``. Coefficient arrays carry an arbitrary trailing batch
shape so that one jet evaluation covers many base points at once.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class MonomialTable:
    nvars: int
    order: int
    exponents: tuple[tuple[int, ...], ...]
    index: dict
    degrees: np.ndarray
    # product table, pairs sorted by output slot
    left: np.ndarray
    right: np.ndarray
    starts: np.ndarray
    outputs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.exponents)


@lru_cache(maxsize=None)
def monomials(nvars: int, order: int) -> MonomialTable:
    exps = []
    for deg in range(order + 1):
        # lexicographically descending so x1 comes first within a degree
        block = [a for a in itertools.product(range(deg + 1), repeat=nvars) if sum(a) == deg]
        block.sort(reverse=True)
        exps.extend(block)
    index = {a: i for i, a in enumerate(exps)}
    pairs = []
    for i, a in enumerate(exps):
        for j, b in enumerate(exps):
            s = tuple(x + y for x, y in zip(a, b))
            if sum(s) <= order:
                pairs.append((index[s], i, j))
    pairs.sort()
    out = np.array([p[0] for p in pairs])
    left = np.array([p[1] for p in pairs])
    right = np.array([p[2] for p in pairs])
    outputs, starts = np.unique(out, return_index=True)
    return MonomialTable(
        nvars=nvars,
        order=order,
        exponents=tuple(exps),
        index=index,
        degrees=np.array([sum(a) for a in exps]),
        left=left,
        right=right,
        starts=starts,
        outputs=outputs,
    )


class Jet:
    """Truncated Taylor polynomial with batched coefficients."""

    __slots__ = ("c", "nvars", "order")

    def __init__(self, c: np.ndarray, nvars: int, order: int):
        self.c = c
        self.nvars = nvars
        self.order = order

    # -- construction -----------------------------------------------------
    @classmethod
    def constant(cls, value, nvars: int, order: int, batch_shape=()) -> "Jet":
        table = monomials(nvars, order)
        c = np.zeros((table.size,) + tuple(batch_shape))
        c[0] = value
        return cls(c, nvars, order)

    @classmethod
    def variable(cls, k: int, point, nvars: int, order: int) -> "Jet":
        point = np.asarray(point, dtype=float)
        table = monomials(nvars, order)
        c = np.zeros((table.size,) + point.shape)
        c[0] = point
        if order >= 1:
            c[1 + k] = 1.0
        return cls(c, nvars, order)

    @property
    def table(self) -> MonomialTable:
        return monomials(self.nvars, self.order)

    @property
    def batch_shape(self) -> tuple:
        return self.c.shape[1:]

    @property
    def value(self) -> np.ndarray:
        return self.c[0]

    def _wrap(self, c) -> "Jet":
        return Jet(c, self.nvars, self.order)

    def _coerce(self, other) -> "Jet":
        if isinstance(other, Jet):
            return other
        out = np.zeros_like(self.c)
        out[0] = other
        return self._wrap(out)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Jet):
            return self._wrap(self.c + other.c)
        c = self.c.copy()
        c[0] = c[0] + other
        return self._wrap(c)

    __radd__ = __add__

    def __neg__(self):
        return self._wrap(-self.c)

    def __sub__(self, other):
        if isinstance(other, Jet):
            return self._wrap(self.c - other.c)
        c = self.c.copy()
        c[0] = c[0] - other
        return self._wrap(c)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return self._wrap(self.c * other)
        t = self.table
        prod = self.c[t.left] * other.c[t.right]
        summed = np.add.reduceat(prod, t.starts, axis=0)
        if len(t.outputs) == t.size:
            return self._wrap(summed)
        out = np.zeros_like(self.c)
        out[t.outputs] = summed
        return self._wrap(out)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet":
        a0 = self.c[0]
        if np.any(a0 == 0):
            raise ZeroDivisionError("reciprocal of a jet with zero value")
        derivs = [(-1.0) ** k * math.factorial(k) / a0 ** (k + 1) for k in range(self.order + 1)]
        return self.compose(derivs)

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return self._wrap(self.c / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, n: int) -> "Jet":
        if not isinstance(n, (int, np.integer)):
            raise TypeError("only integer powers are supported")
        if n < 0:
            return (self ** (-n)).reciprocal()
        result = self._coerce(1.0)
        base = self
        while n:
            if n & 1:
                result = result * base
            n >>= 1
            if n:
                base = base * base
        return result

    def compose(self, derivs) -> "Jet":
        """Apply a univariate function given its derivatives at ``self.value``.

        ``derivs[k]`` is the k-th derivative of the outer function evaluated at
        the constant term; the Taylor series is truncated at ``self.order``.
        """
        nil = self.c.copy()
        nil[0] = 0.0
        nil = self._wrap(nil)
        out = np.zeros_like(self.c)
        out[0] = derivs[0]
        power = None
        for k in range(1, self.order + 1):
            power = nil if power is None else power * nil
            out = out + power.c * (derivs[k] / math.factorial(k))
        return self._wrap(out)

    # -- calculus -----------------------------------------------------------
    def deriv(self, k: int) -> "Jet":
        """Partial derivative in variable ``k``; the result has order - 1."""
        if self.order == 0:
            raise ValueError("cannot differentiate an order-0 jet")
        src, factor = _deriv_map(self.nvars, self.order, k)
        factor = factor.reshape((-1,) + (1,) * len(self.batch_shape))
        return Jet(self.c[src] * factor, self.nvars, self.order - 1)

    def truncate(self, order: int) -> "Jet":
        if order > self.order:
            raise ValueError("cannot raise the order of a jet")
        size = monomials(self.nvars, order).size
        return Jet(self.c[:size], self.nvars, order)

    def derivative_tensor(self, k: int) -> np.ndarray:
        """Full symmetric array of k-th partial derivatives, batch axes last.

        Each distinct entry is computed once and mirrored, so the result is
        exactly symmetric under index permutations.
        """
        out = np.zeros((self.nvars**k,) + self.batch_shape)
        if k <= self.order:
            flat, coef, scale = _tensor_map(self.nvars, k)
            out[flat] = self.c[coef] * scale.reshape((-1,) + (1,) * len(self.batch_shape))
        return out.reshape((self.nvars,) * k + self.batch_shape)


@lru_cache(maxsize=None)
def _deriv_map(nvars: int, order: int, k: int):
    src = monomials(nvars, order)
    dst = monomials(nvars, order - 1)
    idx, factor = [], []
    for a in dst.exponents:
        b = list(a)
        b[k] += 1
        idx.append(src.index[tuple(b)])
        factor.append(a[k] + 1.0)
    return np.array(idx), np.array(factor)


@lru_cache(maxsize=None)
def _tensor_map(nvars: int, k: int):
    t = monomials(nvars, k)
    flat, coef, scale = [], [], []
    for i, a in enumerate(t.exponents):
        if sum(a) != k:
            continue
        s = float(np.prod([math.factorial(e) for e in a]))
        idx = sum(([v] * e for v, e in enumerate(a)), [])
        for perm in sorted(set(itertools.permutations(idx))):
            flat.append(int(np.ravel_multi_index(perm, (nvars,) * k)) if k else 0)
            coef.append(i)
            scale.append(s)
    return np.array(flat, dtype=int), np.array(coef, dtype=int), np.array(scale)


def stack_value(jets) -> np.ndarray:
    return np.stack([j.value for j in jets])
