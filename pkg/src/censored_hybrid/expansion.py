"""Linear re-parameterisation of the constant-bias mechanism.

With the bias held constant, the mechanism value is linear in an expanded
parameter vector::

    mechanism_core(mech, case, e) == build_phi(case) @ build_theta(mech)

Both vectors have length ``2**m1 * (3 + 3*m2)`` and are laid out as six
blocks (0-based offsets, ``K = 2**m1``)::

    [0, K)                  a  * phi1            (1+e) * vt1
    [K, K(1+m2))            a  * (u kron phi1)   q kron vt1
    [K(1+m2), K(2+m2))      x1 * phi1            b(1+e) * vt1
    [K(2+m2), K(2+2m2))     x1 * (u kron phi1)   b * (q kron vt1)
    [K(2+2m2), K(3+2m2))    x2 * phi1            c(1+e) * vt1
    [K(3+2m2), K(3+3m2))    x2 * (u kron phi1)   c * (q kron vt1)

``phi1`` holds all subset products of the primary factors ``v`` and ``vt1``
the matching subset products of ``p``. Subsets are ordered by size, then
lexicographically, so the empty subset comes first and the singletons
occupy positions ``1..m1``.

Expanded vectors are plain 1-d float arrays; :class:`IndexMap` carries the
layout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .model import CaseRecord, MechanismParams

TOL_DIV = 1e-6


class DegenerateLeadingEntry(ArithmeticError):
    """Raised when the leading entry of theta is too small to divide by."""


def subset_order(m1: int) -> list[tuple[int, ...]]:
    """All subsets of ``range(m1)``, by size then lexicographic."""
    out: list[tuple[int, ...]] = [()]
    for size in range(1, m1 + 1):
        out.extend(itertools.combinations(range(m1), size))
    return out


@dataclass(frozen=True)
class IndexMap:
    m1: int
    m2: int

    def __post_init__(self):
        if self.m1 < 0 or self.m2 < 0:
            raise ValueError(f"m1, m2 must be nonnegative, got {self.m1}, {self.m2}")

    @property
    def k(self) -> int:
        return 1 << self.m1

    @property
    def p(self) -> int:
        return self.k * (3 + 3 * self.m2)

    @cached_property
    def subsets(self) -> list[tuple[int, ...]]:
        return subset_order(self.m1)

    @property
    def block_offsets(self) -> tuple[int, ...]:
        k, m2 = self.k, self.m2
        return (0, k, k * (1 + m2), k * (2 + m2), k * (2 + 2 * m2), k * (3 + 2 * m2), k * (3 + 3 * m2))

    # 0-based positions of the slots used for parameter recovery
    @property
    def lead(self) -> int:
        return 0

    @property
    def b_slot(self) -> int:
        return self.k * (1 + self.m2)

    @property
    def c_slot(self) -> int:
        return self.k * (2 + 2 * self.m2)

    def p_slot(self, i: int) -> int:
        return 1 + i

    def q_slot(self, j: int) -> int:
        return self.k * (j + 1)

    def check(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.p,):
            raise ValueError(f"expanded vector has shape {vec.shape}, expected ({self.p},)")
        return vec


def subset_products(v) -> np.ndarray:
    """Products over every subset of ``v`` (empty product is 1).

    ``v`` may be a vector of length ``m1`` or an ``(n, m1)`` array, in which
    case the result has shape ``(n, 2**m1)``.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    V = v[None, :] if single else v
    m1 = V.shape[1]
    subsets = subset_order(m1)
    pos = {s: i for i, s in enumerate(subsets)}
    out = np.empty((V.shape[0], len(subsets)))
    out[:, 0] = 1.0
    for i, s in enumerate(subsets[1:], start=1):
        out[:, i] = out[:, pos[s[:-1]]] * V[:, s[-1]]
    return out[0] if single else out


def kron(a, b) -> np.ndarray:
    """Kronecker product of two vectors: block ``i`` holds ``a[i] * b``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    return (a[:, None] * b[None, :]).reshape(-1)


def _assemble(bench_rows, first, second) -> np.ndarray:
    # bench_rows: (n, 3) scalars multiplying [first, second] for each of the three terms
    n = first.shape[0]
    pieces = []
    for t in range(3):
        s = bench_rows[:, t : t + 1]
        pieces.append(s * first)
        pieces.append(s * second)
    return np.concatenate(pieces, axis=1).reshape(n, -1)


def build_phi_rows(a, x1, x2, V, U) -> np.ndarray:
    """Expanded regressors for ``n`` cases given as arrays; shape ``(n, p)``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n = V.shape[0]
    phi1 = subset_products(V)
    phi21 = (U[:, :, None] * phi1[:, None, :]).reshape(n, -1)
    bench = np.column_stack([np.broadcast_to(a, n), np.broadcast_to(x1, n), np.broadcast_to(x2, n)]).astype(float)
    return _assemble(bench, phi1, phi21)


def build_phi(case: CaseRecord, m1: int, m2: int) -> np.ndarray:
    if case.v.size != m1 or case.u.size != m2:
        raise ValueError(f"case has m1={case.v.size}, m2={case.u.size}; expected {m1}, {m2}")
    return build_phi_rows(case.a, case.x1, case.x2, case.v[None, :], case.u[None, :])[0]


def build_theta(mech: MechanismParams) -> np.ndarray:
    vt1 = subset_products(mech.p)
    vt21 = kron(mech.q, vt1)
    s = 1.0 + mech.e
    return np.concatenate([s * vt1, vt21, mech.b * s * vt1, mech.b * vt21, mech.c * s * vt1, mech.c * vt21])


class Recovered(NamedTuple):
    b0: float
    c0: float
    ebar: float
    p0: np.ndarray
    q0: np.ndarray

    def mechanism(self) -> MechanismParams:
        return MechanismParams(self.b0, self.c0, self.p0, self.q0, self.ebar)


def recover_params(theta, m1: int, m2: int, tol_div: float = TOL_DIV) -> Recovered:
    """Read mechanism coefficients back out of an expanded parameter vector.

    ``q0`` is read without dividing by the leading entry because the
    ``q kron vt1`` block carries no ``(1 + e)`` factor.
    """
    idx = IndexMap(m1, m2)
    theta = idx.check(theta)
    lead = theta[idx.lead]
    if not abs(lead) >= tol_div:
        raise DegenerateLeadingEntry(
            f"|theta[0]| = {abs(lead):.3g} < {tol_div:g}; stage-1 estimate is unusable"
        )
    p0 = np.array([theta[idx.p_slot(i)] / lead for i in range(m1)])
    q0 = np.array([theta[idx.q_slot(j)] for j in range(m2)])
    return Recovered(
        b0=float(theta[idx.b_slot] / lead),
        c0=float(theta[idx.c_slot] / lead),
        ebar=float(lead - 1.0),
        p0=p0,
        q0=q0,
    )
