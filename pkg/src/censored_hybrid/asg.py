"""Adaptive stochastic-gradient (ASG) estimator for the expanded parameter.

One step, with ``G`` the censored mean and ``g`` the gradient scale::

    r     <- base(k) + sum_{i<=k} g_i**2 * ||phi_i||**2
    theta <- theta + mu * g * phi * (z - G(theta @ phi)) / (sqrt(r) * ln(r)**(alpha/2))

``base(k) = M**4 * p**2`` in the bounded regime. In the growing-regressor
regime (``epsilon_growth > 0``) the bound becomes ``M * k**eps`` and
``base(k) = M**4 * k**(4*eps) * p**2`` with ``k`` counted from 1 at the
first update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

import numpy as np

from .model import NoiseModel, SaturationBounds, censored_mean, censored_mean_deriv

GbarMode = Literal["constant_one", "analytic_sup"]


@dataclass(frozen=True)
class ASGConfig:
    M: float
    mu: float = 1.0
    alpha: float = 1.02
    L_norm: Optional[float] = None
    gbar_mode: GbarMode = "constant_one"
    epsilon_growth: float = 0.0

    def __post_init__(self):
        if not (0 < self.mu <= 1):
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if not self.alpha > 1:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if not self.M > math.e:
            raise ValueError(f"M must exceed e = {math.e:.6f}, got {self.M}")
        if self.gbar_mode not in ("constant_one", "analytic_sup"):
            raise ValueError(f"unknown gbar_mode {self.gbar_mode!r}")
        if self.gbar_mode == "analytic_sup" and not (self.L_norm is not None and self.L_norm > 0):
            raise ValueError("analytic_sup mode needs a positive L_norm")
        if not (0 <= self.epsilon_growth < 0.5):
            raise ValueError(f"epsilon_growth must lie in [0, 0.5), got {self.epsilon_growth}")


def default_M(max_component: float, safety: float = 1.1) -> float:
    """Component bound used when none is configured."""
    return max(math.e + 0.01, safety * float(max_component))


@dataclass
class ASGState:
    theta: np.ndarray
    r: float
    k: int
    config: ASGConfig
    base: float
    energy: float = 0.0  # running sum of g**2 * ||phi||**2
    Mk: float = 0.0

    @property
    def p(self) -> int:
        return self.theta.size

    @property
    def denominator(self) -> float:
        return math.sqrt(self.r) * math.log(self.r) ** (self.config.alpha / 2)


def asg_init(p: int, config: ASGConfig, theta0=None) -> ASGState:
    if p < 1:
        raise ValueError(f"p must be at least 1, got {p}")
    theta = np.zeros(p) if theta0 is None else np.array(theta0, dtype=float, copy=True)
    if theta.shape != (p,):
        raise ValueError(f"theta0 has shape {theta.shape}, expected ({p},)")
    base = config.M**4 * float(p) ** 2
    return ASGState(theta=theta, r=base, k=0, config=config, base=base, Mk=config.M)


def corollary_bound_update(state: ASGState, k: int) -> ASGState:
    """Set the growth-regime bound ``M * k**eps`` and the matching base of ``r``.

    ``k`` is the 1-based update count. With ``eps = 0`` nothing changes.
    """
    eps = state.config.epsilon_growth
    scale = float(k) ** eps if eps > 0 else 1.0
    state.Mk = state.config.M * scale
    state.base = state.config.M**4 * scale**4 * float(state.p) ** 2
    return state


def gbar(state: ASGState, bounds: SaturationBounds, noise: NoiseModel) -> float:
    """Supremum of ``G'`` over ``|x| <= max(Mk*L, Mk*||theta||_1)``, or 1."""
    cfg = state.config
    if cfg.gbar_mode == "constant_one":
        return 1.0
    radius = max(state.Mk * cfg.L_norm, state.Mk * float(np.abs(state.theta).sum()))
    mid = 0.5 * (bounds.lower + bounds.upper)
    # G' is unimodal with its peak at the midpoint of the bounds
    x = mid if abs(mid) <= radius else math.copysign(radius, mid)
    return censored_mean_deriv(x, bounds, noise)


def adaptive_predict(state: ASGState, phi, bounds: SaturationBounds, noise: NoiseModel) -> float:
    return censored_mean(float(state.theta @ phi), bounds, noise)


def asg_step(state: ASGState, phi, z_next: float, bounds: SaturationBounds, noise: NoiseModel) -> ASGState:
    """Advance the estimator by one observation, in place.

    ``r`` absorbs the current regressor before ``theta`` moves.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != state.theta.shape:
        raise ValueError(f"phi has shape {phi.shape}, theta has {state.theta.shape}")
    if state.config.epsilon_growth > 0:
        corollary_bound_update(state, state.k + 1)
    g = gbar(state, bounds, noise)
    state.energy += g * g * float(phi @ phi)
    state.r = state.base + state.energy
    innovation = z_next - censored_mean(float(state.theta @ phi), bounds, noise)
    gain = state.config.mu * g * innovation / state.denominator
    state.theta += gain * phi
    state.k += 1
    if not (math.isfinite(state.r) and math.isfinite(gain)):
        raise FloatingPointError(f"non-finite ASG update at step {state.k}; check M and data scaling")
    return state


@dataclass
class RegretTracker:
    alpha: float = 1.02
    epsilon_growth: float = 0.0
    cumulative: float = 0.0
    ks: list = field(default_factory=list)
    regrets: list = field(default_factory=list)
    cums: list = field(default_factory=list)

    def normalized(self, cum: float, n: int) -> float:
        """``cum / (n**(1/2+eps) * ln(n)**(alpha/2))``; undefined (nan) for n < 2."""
        if n < 2:
            return math.nan
        return cum / (n ** (0.5 + self.epsilon_growth) * math.log(n) ** (self.alpha / 2))

    def at(self, n: int) -> tuple[float, float]:
        """Averaged and normalized cumulative regret after ``n`` steps."""
        cum = self.cums[n - 1]
        return cum / n, self.normalized(cum, n)

    def rows(self) -> Iterable[tuple]:
        for k, R, cum in zip(self.ks, self.regrets, self.cums):
            yield k, R, cum, self.normalized(cum, k + 1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "R_k", "cum", "cum_normalized"])
            for k, R, cum, norm in self.rows():
                w.writerow([k, repr(R), repr(cum), repr(norm)])


def regret_step(
    tracker: RegretTracker, state: ASGState, phi, theta_true, bounds: SaturationBounds, noise: NoiseModel
) -> RegretTracker:
    """Record the squared gap between best and adaptive predictions at ``state.k``."""
    best = censored_mean(float(np.dot(theta_true, phi)), bounds, noise)
    R = (best - adaptive_predict(state, phi, bounds, noise)) ** 2
    tracker.cumulative += R
    tracker.ks.append(state.k)
    tracker.regrets.append(R)
    tracker.cums.append(tracker.cumulative)
    return tracker


def run(dataset, config: ASGConfig, noise: NoiseModel, theta0=None, theta_true=None,
        chunk_bytes: int = 1 << 25) -> tuple[ASGState, Optional[RegretTracker]]:
    """Single chronological pass of :func:`asg_step` over ``dataset``.

    ``dataset`` needs ``__len__``, ``phi_rows(start, stop)``, ``bounds(i)``
    and a ``z`` array. Regressors are built in chunks of about
    ``chunk_bytes`` so the full design matrix is never held in memory.
    When ``theta_true`` is given the regret of every step is tracked.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("ASG needs at least one training case")
    first = dataset.phi_rows(0, 1)
    p = first.shape[1]
    state = asg_init(p, config, theta0)
    tracker = None
    if theta_true is not None:
        tracker = RegretTracker(alpha=config.alpha, epsilon_growth=config.epsilon_growth)
    rows = max(1, chunk_bytes // (8 * p))
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        block = dataset.phi_rows(start, stop)
        for off in range(stop - start):
            i = start + off
            phi = block[off]
            bounds = dataset.bounds(i)
            if tracker is not None:
                regret_step(tracker, state, phi, theta_true, bounds, noise)
            asg_step(state, phi, float(dataset.z[i]), bounds, noise)
    return state, tracker
