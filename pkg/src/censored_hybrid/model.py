"""Case and parameter types, the saturation map, and the hybrid forward pass.

The hybrid model predicts a saturated sentence

    z = S([a + b*x1 + c*x2] * prod_i(1 + p_i v_i) * [1 + sum_j q_j u_j + e] + w)

where ``S`` clamps to ``[lower, upper]`` and the bias ``e`` is either a
constant or the output of a two-hidden-layer ReLU network evaluated on the
residual-factor vector ``eta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SaturationBounds:
    """Closed interval ``[lower, upper]`` the observed sentence is clamped to.

    Negative lower bounds are accepted here; the relative-error loss and RAD
    separately require positive observed sentences.
    """

    lower: float
    upper: float

    def __post_init__(self):
        if not (self.lower < self.upper):
            raise ValueError(f"bounds must satisfy lower < upper, got {self.lower} >= {self.upper}")


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian observation noise with standard deviation ``sigma``."""

    sigma: float = 5.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass
class CaseRecord:
    index: int
    a: float
    x1: float
    x2: float
    v: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    bounds: SaturationBounds
    z: Optional[float] = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if self.a <= 0:
            raise ValueError(f"starting point a must be positive, got {self.a}")
        if self.z is not None and not (self.bounds.lower <= self.z <= self.bounds.upper):
            raise ValueError(f"sentence z={self.z} outside bounds {self.bounds}")


@dataclass
class MechanismParams:
    """Interpretable coefficients of the sentencing mechanism."""

    b: float
    c: float
    p: np.ndarray
    q: np.ndarray
    e: float = 0.0

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        vals = np.concatenate([[self.b, self.c, self.e], self.p, self.q])
        if not np.all(np.isfinite(vals)):
            raise ValueError("mechanism parameters must be finite")

    @property
    def m1(self) -> int:
        return self.p.size

    @property
    def m2(self) -> int:
        return self.q.size


@dataclass
class BiasNetworkParams:
    """Weights of ``Gamma relu(B relu(A eta + b1) + b2) + b3``."""

    Gamma: np.ndarray
    B: np.ndarray
    A: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: float

    def __post_init__(self):
        self.Gamma = np.asarray(self.Gamma, dtype=float).reshape(1, -1)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b1 = np.asarray(self.b1, dtype=float).reshape(-1)
        self.b2 = np.asarray(self.b2, dtype=float).reshape(-1)
        self.b3 = float(self.b3)
        m = self.Gamma.shape[1]
        if self.B.shape != (m, m) or self.A.shape[0] != m or self.b1.size != m or self.b2.size != m:
            raise ValueError(
                f"inconsistent network shapes: Gamma {self.Gamma.shape}, B {self.B.shape}, "
                f"A {self.A.shape}, b1 {self.b1.shape}, b2 {self.b2.shape}"
            )
        for arr in (self.Gamma, self.B, self.A, self.b1, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("network parameters must be finite")
        if not math.isfinite(self.b3):
            raise ValueError("network parameters must be finite")

    @property
    def m(self) -> int:
        return self.Gamma.shape[1]

    @property
    def m3(self) -> int:
        return self.A.shape[1]

    @classmethod
    def zeros(cls, m: int, m3: int, b3: float = 0.0) -> "BiasNetworkParams":
        return cls(np.zeros((1, m)), np.zeros((m, m)), np.zeros((m, m3)), np.zeros(m), np.zeros(m), b3)


@dataclass
class HybridModel:
    """Mechanism plus bias; ``net is None`` selects the constant-bias mode."""

    mech: MechanismParams
    net: Optional[BiasNetworkParams] = None
    m3: int = field(default=0)

    def __post_init__(self):
        if self.net is not None:
            if self.m3 and self.m3 != self.net.m3:
                raise ValueError(f"m3={self.m3} does not match network input width {self.net.m3}")
            self.m3 = self.net.m3

    @property
    def m1(self) -> int:
        return self.mech.m1

    @property
    def m2(self) -> int:
        return self.mech.m2

    @property
    def m(self) -> int:
        return 0 if self.net is None else self.net.m

    def bias(self, eta) -> float:
        if self.net is None:
            return self.mech.e
        return bias_forward(self.net, eta)


def saturate(x, bounds: SaturationBounds):
    """Clamp ``x`` to the closed interval ``[bounds.lower, bounds.upper]``."""
    if np.ndim(x) == 0:
        return min(max(float(x), bounds.lower), bounds.upper)
    return np.clip(x, bounds.lower, bounds.upper)


def relu(x):
    return np.maximum(x, 0.0)


def bias_forward(net: BiasNetworkParams, eta) -> float:
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != net.m3:
        raise ValueError(f"eta has length {eta.size}, network expects {net.m3}")
    h1 = relu(net.A @ eta + net.b1)
    h2 = relu(net.B @ h1 + net.b2)
    return float(net.Gamma[0] @ h2 + net.b3)


def bias_forward_batch(net: BiasNetworkParams, eta: np.ndarray) -> np.ndarray:
    """Row-wise :func:`bias_forward` over an ``(n, m3)`` array."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if eta.shape[1] != net.m3:
        raise ValueError(f"eta has width {eta.shape[1]}, network expects {net.m3}")
    h1 = relu(eta @ net.A.T + net.b1)
    h2 = relu(h1 @ net.B.T + net.b2)
    return h2 @ net.Gamma[0] + net.b3


def mechanism_core(mech: MechanismParams, case: CaseRecord, e: float) -> float:
    """Noiseless, unsaturated mechanism value for one case with bias ``e``."""
    if case.v.size != mech.m1 or case.u.size != mech.m2:
        raise ValueError(
            f"case has m1={case.v.size}, m2={case.u.size}; params have m1={mech.m1}, m2={mech.m2}"
        )
    benchmark = case.a + mech.b * case.x1 + mech.c * case.x2
    primary = float(np.prod(1.0 + mech.p * case.v))
    other = 1.0 + float(mech.q @ case.u) + e
    return benchmark * primary * other


def hybrid_predict(model: HybridModel, case: CaseRecord) -> float:
    e = model.bias(case.eta)
    return saturate(mechanism_core(model.mech, case, e), case.bounds)


def _phi_cdf(t: float) -> float:
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


def _check_sigma(noise: NoiseModel) -> float:
    if noise.sigma <= 0:
        raise ValueError(f"sigma must be positive, got {noise.sigma}")
    return noise.sigma


def censored_mean(x, bounds: SaturationBounds, noise: NoiseModel):
    """E[saturate(x + w)] for ``w ~ N(0, sigma^2)``.

    Accepts a scalar or an array of pre-noise values.
    """
    s = _check_sigma(noise)
    L, N = bounds.lower, bounds.upper
    if np.ndim(x) == 0:
        x = float(x)
        lo, hi = (L - x) / s, (N - x) / s
        cdf_lo, cdf_hi, sf_hi = _phi_cdf(lo), _phi_cdf(hi), _phi_cdf(-hi)
        pdf_lo = _INV_SQRT_2PI * math.exp(-0.5 * lo * lo)
        pdf_hi = _INV_SQRT_2PI * math.exp(-0.5 * hi * hi)
        return L * cdf_lo + N * sf_hi + x * (cdf_hi - cdf_lo) + s * (pdf_lo - pdf_hi)
    x = np.asarray(x, dtype=float)
    lo, hi = (L - x) / s, (N - x) / s
    cdf_lo, cdf_hi = ndtr(lo), ndtr(hi)
    pdf_lo = _INV_SQRT_2PI * np.exp(-0.5 * lo * lo)
    pdf_hi = _INV_SQRT_2PI * np.exp(-0.5 * hi * hi)
    return L * cdf_lo + N * ndtr(-hi) + x * (cdf_hi - cdf_lo) + s * (pdf_lo - pdf_hi)


def censored_mean_deriv(x, bounds: SaturationBounds, noise: NoiseModel):
    """Derivative of :func:`censored_mean`: probability of landing strictly inside."""
    s = _check_sigma(noise)
    L, N = bounds.lower, bounds.upper
    # upper tail uses complements to keep precision
    if np.ndim(x) == 0:
        lo, hi = (L - float(x)) / s, (N - float(x)) / s
        if hi < 0:
            return _phi_cdf(-lo) - _phi_cdf(-hi)
        return _phi_cdf(hi) - _phi_cdf(lo)
    x = np.asarray(x, dtype=float)
    lo, hi = (L - x) / s, (N - x) / s
    return np.where(hi < 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def predict_batch(model: HybridModel, batch) -> np.ndarray:
    """Vectorised :func:`hybrid_predict` over a column batch (e.g. a Dataset)."""
    if batch.V.shape[1] != model.m1 or batch.U.shape[1] != model.m2:
        raise ValueError(
            f"data has m1={batch.V.shape[1]}, m2={batch.U.shape[1]}; model has m1={model.m1}, m2={model.m2}"
        )
    if model.net is None:
        e = np.full(batch.z.shape[0] if hasattr(batch, "z") else batch.V.shape[0], model.mech.e)
    else:
        e = bias_forward_batch(model.net, batch.Eta)
    mech = model.mech
    core = (batch.a + mech.b * batch.x1 + mech.c * batch.x2) * np.prod(1.0 + batch.V * mech.p, axis=1) * (
        1.0 + batch.U @ mech.q + e
    )
    return np.clip(core, batch.lower, batch.upper)
