"""Batch loss of the hybrid model and its exact (sub)gradient.

The loss over a batch of ``T`` cases is::

    (1/T) sum_k |z_k - zhat_k| / z_k  +  gamma * |(1/T) sum_k ehat_k - ebar|

Subgradient conventions: ``d|t|/dt = sign(t)`` with ``sign(0) = 0``; the
clamp has slope 1 on the closed interval ``[L, N]`` and 0 outside; ReLU has
slope 0 at 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .model import BiasNetworkParams, MechanismParams


@dataclass(frozen=True)
class ParamLayout:
    """Flat ordering ``[b, c, p, q, vec(Gamma), vec(B), vec(A), b1, b2, b3]``.

    ``vec`` stacks columns (column-major), as in the usual matrix notation.
    """

    m1: int
    m2: int
    m: int
    m3: int

    @property
    def sizes(self) -> dict[str, int]:
        m = self.m
        return {"b": 1, "c": 1, "p": self.m1, "q": self.m2, "Gamma": m, "B": m * m,
                "A": m * self.m3, "b1": m, "b2": m, "b3": 1}

    @property
    def size(self) -> int:
        return sum(self.sizes.values())

    @property
    def slices(self) -> dict[str, slice]:
        out, o = {}, 0
        for name, s in self.sizes.items():
            out[name] = slice(o, o + s)
            o += s
        return out

    @property
    def mechanism_slice(self) -> slice:
        return slice(0, 2 + self.m1 + self.m2)

    @property
    def network_slice(self) -> slice:
        return slice(2 + self.m1 + self.m2, self.size)

    def unpack_arrays(self, values: np.ndarray) -> dict[str, np.ndarray]:
        sl, m = self.slices, self.m
        return {
            "b": values[sl["b"]][0], "c": values[sl["c"]][0], "p": values[sl["p"]], "q": values[sl["q"]],
            "Gamma": values[sl["Gamma"]].reshape(1, m),
            "B": values[sl["B"]].reshape(m, m, order="F"),
            "A": values[sl["A"]].reshape(m, self.m3, order="F"),
            "b1": values[sl["b1"]], "b2": values[sl["b2"]], "b3": values[sl["b3"]][0],
        }

    def pack_arrays(self, b, c, p, q, Gamma, B, A, b1, b2, b3) -> np.ndarray:
        return np.concatenate([
            [float(b), float(c)], np.asarray(p, float).reshape(-1), np.asarray(q, float).reshape(-1),
            np.asarray(Gamma, float).reshape(-1), np.asarray(B, float).reshape(-1, order="F"),
            np.asarray(A, float).reshape(-1, order="F"), np.asarray(b1, float).reshape(-1),
            np.asarray(b2, float).reshape(-1), [float(b3)],
        ])


@dataclass
class FlatParams:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise ValueError(f"flat vector has shape {self.values.shape}, layout needs ({self.layout.size},)")

    @classmethod
    def pack(cls, mech: MechanismParams, net: BiasNetworkParams) -> "FlatParams":
        layout = ParamLayout(mech.m1, mech.m2, net.m, net.m3)
        return cls(layout.pack_arrays(mech.b, mech.c, mech.p, mech.q, net.Gamma, net.B, net.A,
                                      net.b1, net.b2, net.b3), layout)

    def unpack(self) -> tuple[MechanismParams, BiasNetworkParams]:
        d = self.layout.unpack_arrays(self.values)
        mech = MechanismParams(d["b"], d["c"], d["p"].copy(), d["q"].copy(), 0.0)
        net = BiasNetworkParams(d["Gamma"].copy(), d["B"].copy(), d["A"].copy(), d["b1"].copy(),
                                d["b2"].copy(), d["b3"])
        return mech, net

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), self.layout)


@dataclass
class BatchLossReport:
    loss: float
    relerr_term: float
    reg_term: float
    mean_ehat: float


def as_batch(cases) -> SimpleNamespace:
    """Column view of a batch: a Dataset slice passes through, a list of CaseRecord is stacked."""
    if hasattr(cases, "Eta") and hasattr(cases, "z"):
        return cases
    cases = list(cases)
    if not cases:
        raise ValueError("batch must be nonempty")
    if any(c.z is None for c in cases):
        raise ValueError("every case in a training batch needs an observed sentence z")
    col = lambda f: np.array([f(c) for c in cases], dtype=float)  # noqa: E731
    return SimpleNamespace(
        a=col(lambda c: c.a), x1=col(lambda c: c.x1), x2=col(lambda c: c.x2),
        V=np.stack([c.v for c in cases]).astype(float), U=np.stack([c.u for c in cases]).astype(float),
        Eta=np.stack([c.eta for c in cases]).astype(float),
        lower=col(lambda c: c.bounds.lower), upper=col(lambda c: c.bounds.upper), z=col(lambda c: c.z),
    )


def network_forward(Gamma, B, A, b1, b2, b3, X):
    h1 = X @ A.T + b1
    s1 = np.maximum(h1, 0.0)
    h2 = s1 @ B.T + b2
    s2 = np.maximum(h2, 0.0)
    out = s2 @ Gamma[0] + b3
    return out, (X, h1, s1, h2, s2)


def network_backward(Gamma, B, cache, dout):
    """Gradients of ``sum_k dout_k * out_k`` w.r.t. the network weights."""
    X, h1, s1, h2, s2 = cache
    dGamma = (dout @ s2)[None, :]
    db3 = dout.sum()
    dh2 = np.outer(dout, Gamma[0]) * (h2 > 0)
    dB = dh2.T @ s1
    db2 = dh2.sum(axis=0)
    dh1 = (dh2 @ B) * (h1 > 0)
    dA = dh1.T @ X
    db1 = dh1.sum(axis=0)
    return dGamma, dB, dA, db1, db2, db3


def _check_z(z):
    if np.any(z <= 0):
        raise ValueError("relative-error loss needs every observed sentence z > 0")


def loss_and_grad(theta_hat: FlatParams, batch, gamma: float, ebar: float, need_grad: bool = True):
    batch = as_batch(batch)
    z = np.asarray(batch.z, dtype=float)
    T = z.size
    if T == 0:
        raise ValueError("batch must be nonempty")
    _check_z(z)
    lay = theta_hat.layout
    prm = lay.unpack_arrays(theta_hat.values)
    if batch.V.shape[1] != lay.m1 or batch.U.shape[1] != lay.m2 or batch.Eta.shape[1] != lay.m3:
        raise ValueError("batch factor widths do not match the parameter layout")

    ehat, cache = network_forward(prm["Gamma"], prm["B"], prm["A"], prm["b1"], prm["b2"], prm["b3"], batch.Eta)
    bench = batch.a + prm["b"] * batch.x1 + prm["c"] * batch.x2
    factors = 1.0 + batch.V * prm["p"]
    primary = np.prod(factors, axis=1)
    other = 1.0 + batch.U @ prm["q"] + ehat
    core = bench * primary * other
    zhat = np.clip(core, batch.lower, batch.upper)

    relerr = float(np.mean(np.abs(z - zhat) / z))
    mean_e = float(np.mean(ehat))
    reg = gamma * abs(mean_e - ebar)
    report = BatchLossReport(loss=relerr + reg, relerr_term=relerr, reg_term=reg, mean_ehat=mean_e)
    if not need_grad:
        return report, None

    inside = (core >= batch.lower) & (core <= batch.upper)
    dcore = np.sign(zhat - z) / (z * T) * inside
    g_bench = dcore * primary * other
    grad_b = g_bench @ batch.x1
    grad_c = g_bench @ batch.x2
    grad_p = np.empty(lay.m1)
    for i in range(lay.m1):
        others = np.prod(np.delete(factors, i, axis=1), axis=1)
        grad_p[i] = (dcore * bench * others * other) @ batch.V[:, i]
    g_other = dcore * bench * primary
    grad_q = g_other @ batch.U
    dehat = g_other + gamma * np.sign(mean_e - ebar) / T
    dGamma, dB, dA, db1, db2, db3 = network_backward(prm["Gamma"], prm["B"], cache, dehat)
    grad = lay.pack_arrays(grad_b, grad_c, grad_p, grad_q, dGamma, dB, dA, db1, db2, db3)
    return report, grad


def batch_loss(theta_hat: FlatParams, batch, gamma: float, ebar: float) -> BatchLossReport:
    return loss_and_grad(theta_hat, batch, gamma, ebar, need_grad=False)[0]


def batch_grad(theta_hat: FlatParams, batch, gamma: float, ebar: float) -> np.ndarray:
    """True gradient of :func:`batch_loss` (the ascent direction), flat layout."""
    return loss_and_grad(theta_hat, batch, gamma, ebar)[1]


# --- saturated free-standing network (baseline) ------------------------------

def snn_loss_and_grad(values: np.ndarray, layout: ParamLayout, X: np.ndarray, lower, upper, z,
                      need_grad: bool = True):
    """Relative-error loss of ``saturate(net(X))`` and its gradient over network slots.

    ``layout`` must have ``m1 = m2 = 0``; ``values`` holds only ``[b, c]``
    placeholders plus the network block.
    """
    z = np.asarray(z, dtype=float)
    _check_z(z)
    T = z.size
    prm = layout.unpack_arrays(values)
    out, cache = network_forward(prm["Gamma"], prm["B"], prm["A"], prm["b1"], prm["b2"], prm["b3"], X)
    zhat = np.clip(out, lower, upper)
    loss = float(np.mean(np.abs(z - zhat) / z))
    if not need_grad:
        return loss, None
    inside = (out >= lower) & (out <= upper)
    dout = np.sign(zhat - z) / (z * T) * inside
    dGamma, dB, dA, db1, db2, db3 = network_backward(prm["Gamma"], prm["B"], cache, dout)
    grad = layout.pack_arrays(0.0, 0.0, [], [], dGamma, dB, dA, db1, db2, db3)
    return loss, grad

