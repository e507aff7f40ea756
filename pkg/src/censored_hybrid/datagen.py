"""Synthetic sentencing cases with known ground truth.

Every draw comes from ``numpy.random.Generator`` streams keyed by
``SeedSequence([seed, stream])`` with fixed stream ids (truth, cases), so a
dataset is a pure function of its config.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Literal, Optional, Sequence

import numpy as np

from .expansion import build_phi_rows, build_theta
from .model import (
    BiasNetworkParams,
    CaseRecord,
    MechanismParams,
    NoiseModel,
    SaturationBounds,
    bias_forward_batch,
)

SCHEMA_VERSION = 1

REGIMES = {
    "minor": {"lower": 6.0, "upper": 36.0, "a": 10.0, "x1_max": 2, "x2_max": 4},
    "serious": {"lower": 36.0, "upper": 120.0, "a": 40.0, "x1_max": 9, "x2_max": 9},
}

STREAM_TRUTH = 1
STREAM_CASES = 2


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Counter-style RNG: one independent stream per ``(seed, *stream)`` key."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


@dataclass
class GeneratorConfig:
    m1: int = 2
    m2: int = 3
    m3: int = 4
    n: int = 1000
    regime: Literal["minor", "serious"] = "minor"
    sigma: float = 5.0
    seed: int = 0
    a: Optional[float] = None
    b: float = 6.0
    c: float = 3.0
    p: Optional[list] = None
    q: Optional[list] = None
    e: float = 0.1
    bias_mode: Literal["constant", "network"] = "constant"
    truth_width: int = 8
    bias_std: float = 0.15
    factor_prob: float = 0.15
    u_signed: bool = True
    x1_max: Optional[int] = None
    x2_max: Optional[int] = None
    growth_epsilon: float = 0.0
    growth_scale: float = 1000.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {sorted(REGIMES)}")
        if self.bias_mode not in ("constant", "network"):
            raise ValueError(f"unknown bias_mode {self.bias_mode!r}")
        for name in ("m1", "m2", "m3", "n"):
            if getattr(self, name) < 0 or int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be a nonnegative integer")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.bias_mode == "network" and self.m3 < 1:
            raise ValueError("network bias needs m3 >= 1")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (0 <= self.factor_prob <= 1):
            raise ValueError(f"factor_prob must lie in [0, 1], got {self.factor_prob}")
        if not (0 <= self.growth_epsilon < 0.5):
            raise ValueError(f"growth_epsilon must lie in [0, 0.5), got {self.growth_epsilon}")
        if self.p is not None and len(self.p) != self.m1:
            raise ValueError(f"p has length {len(self.p)}, expected m1={self.m1}")
        if self.q is not None and len(self.q) != self.m2:
            raise ValueError(f"q has length {len(self.q)}, expected m2={self.m2}")

    @property
    def bounds(self) -> SaturationBounds:
        r = REGIMES[self.regime]
        return SaturationBounds(r["lower"], r["upper"])

    def resolved(self) -> dict:
        """Config with every regime default filled in."""
        d = asdict(self)
        r = REGIMES[self.regime]
        for key in ("a", "x1_max", "x2_max"):
            if d[key] is None:
                d[key] = r[key]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Truth:
    mech: MechanismParams
    net: Optional[BiasNetworkParams] = None

    @property
    def theta(self) -> np.ndarray:
        """Expanded parameter of the constant-bias truth."""
        return build_theta(self.mech)

    def to_dict(self) -> dict:
        out = {"mech": {"b": self.mech.b, "c": self.mech.c, "p": self.mech.p.tolist(),
                        "q": self.mech.q.tolist(), "e": self.mech.e}}
        if self.net is not None:
            out["net"] = net_to_dict(self.net)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Truth":
        net = net_from_dict(d["net"]) if d.get("net") else None
        return cls(MechanismParams(**d["mech"]), net)


def net_to_dict(net: BiasNetworkParams) -> dict:
    return {"Gamma": net.Gamma.tolist(), "B": net.B.tolist(), "A": net.A.tolist(),
            "b1": net.b1.tolist(), "b2": net.b2.tolist(), "b3": net.b3}


def net_from_dict(d: dict) -> BiasNetworkParams:
    return BiasNetworkParams(np.array(d["Gamma"]), np.array(d["B"]), np.array(d["A"]).reshape(len(d["b1"]), -1),
                             np.array(d["b1"]), np.array(d["b2"]), d["b3"])


_COLUMNS = ("index", "a", "x1", "x2")


@dataclass
class Dataset:
    """Chronologically ordered cases stored column-wise."""

    index: np.ndarray
    a: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    V: np.ndarray
    U: np.ndarray
    Eta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    z: np.ndarray
    truth: Optional[Truth] = None
    fingerprint: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.index.size
        for name in ("a", "x1", "x2", "lower", "upper", "z"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column {name} has shape {getattr(self, name).shape}, expected ({n},)")
        for name in ("V", "U", "Eta"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValueError(f"column block {name} has shape {arr.shape}, expected ({n}, .)")
        if n > 1 and np.any(np.diff(self.index) <= 0):
            raise ValueError("case indices must be strictly increasing")
        if np.any(self.lower >= self.upper):
            raise ValueError("every case needs lower < upper")

    def __len__(self) -> int:
        return self.index.size

    @property
    def m1(self) -> int:
        return self.V.shape[1]

    @property
    def m2(self) -> int:
        return self.U.shape[1]

    @property
    def m3(self) -> int:
        return self.Eta.shape[1]

    def bounds(self, i: int) -> SaturationBounds:
        return SaturationBounds(float(self.lower[i]), float(self.upper[i]))

    def case(self, i: int) -> CaseRecord:
        return CaseRecord(
            index=int(self.index[i]), a=float(self.a[i]), x1=float(self.x1[i]), x2=float(self.x2[i]),
            v=self.V[i], u=self.U[i], eta=self.Eta[i], bounds=self.bounds(i), z=float(self.z[i]),
        )

    def __iter__(self):
        return (self.case(i) for i in range(len(self)))

    def take(self, sl) -> "Dataset":
        return Dataset(
            self.index[sl], self.a[sl], self.x1[sl], self.x2[sl], self.V[sl], self.U[sl], self.Eta[sl],
            self.lower[sl], self.upper[sl], self.z[sl], self.truth, self.fingerprint, self.config,
        )

    def phi_rows(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        sl = slice(start, stop)
        return build_phi_rows(self.a[sl], self.x1[sl], self.x2[sl], self.V[sl], self.U[sl])

    def max_component(self) -> float:
        """Largest |phi| entry over all cases (subset products of [-1, 1] factors never exceed 1)."""
        if np.any(np.abs(self.V) > 1) or np.any(np.abs(self.U) > 1):
            return float(max(np.abs(self.phi_rows(i, i + 1)).max() for i in range(len(self))))
        return float(np.max(np.abs(np.column_stack([self.a, self.x1, self.x2]))))

    def growth_bound(self, eps: float) -> float:
        """Smallest ``M`` with ``|phi_k| <= M * (k+1)**eps`` for every case ``k``."""
        comp = np.max(np.abs(np.column_stack([self.a, self.x1, self.x2])), axis=1)
        k1 = np.arange(1, len(self) + 1, dtype=float)
        return float(np.max(comp / k1**eps))

    def censoring_fraction(self) -> float:
        return float(np.mean((self.z <= self.lower) | (self.z >= self.upper)))

    # --- persistence -------------------------------------------------------

    def _header(self) -> list[str]:
        return (list(_COLUMNS) + [f"v{i + 1}" for i in range(self.m1)] + [f"u{j + 1}" for j in range(self.m2)]
                + [f"eta{j + 1}" for j in range(self.m3)] + ["lower", "upper", "z"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION} fingerprint={self.fingerprint} "
                  f"m1={self.m1} m2={self.m2} m3={self.m3}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self._header())
        for i in range(len(self)):
            row = [int(self.index[i]), repr(float(self.a[i])), int(self.x1[i]), int(self.x2[i])]
            row += [repr(float(x)) for x in self.V[i]] + [repr(float(x)) for x in self.U[i]]
            row += [repr(float(x)) for x in self.Eta[i]]
            row += [repr(float(self.lower[i])), repr(float(self.upper[i])), repr(float(self.z[i]))]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("dataset CSV is missing its '# schema_version=...' header line")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema_version {meta.get('schema_version')}")
        m1, m2, m3 = int(meta["m1"]), int(meta["m2"]), int(meta["m3"])
        rows = list(csv.reader(lines[1:]))
        body = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, 4 + m1 + m2 + m3 + 3)
        o = 4
        return cls(
            index=body[:, 0].astype(np.int64), a=body[:, 1], x1=body[:, 2], x2=body[:, 3],
            V=body[:, o:o + m1], U=body[:, o + m1:o + m1 + m2], Eta=body[:, o + m1 + m2:o + m1 + m2 + m3],
            lower=body[:, -3], upper=body[:, -2], z=body[:, -1], fingerprint=meta.get("fingerprint", ""),
        )

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": "dataset",
            "fingerprint": self.fingerprint,
            "config": self.config,
            "truth": self.truth.to_dict() if self.truth is not None else None,
            "columns": {
                "index": self.index.tolist(), "a": self.a.tolist(), "x1": self.x1.tolist(),
                "x2": self.x2.tolist(), "V": self.V.tolist(), "U": self.U.tolist(), "Eta": self.Eta.tolist(),
                "lower": self.lower.tolist(), "upper": self.upper.tolist(), "z": self.z.tolist(),
            },
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "dataset":
            raise ValueError("not a dataset document of a supported schema_version")
        c = doc["columns"]
        n = len(c["index"])

        def block(name):
            return np.array(c[name], dtype=float).reshape(n, -1)

        return cls(
            index=np.array(c["index"], dtype=np.int64), a=np.array(c["a"], float), x1=np.array(c["x1"], float),
            x2=np.array(c["x2"], float), V=block("V"), U=block("U"), Eta=block("Eta"),
            lower=np.array(c["lower"], float), upper=np.array(c["upper"], float), z=np.array(c["z"], float),
            truth=Truth.from_dict(doc["truth"]) if doc.get("truth") else None,
            fingerprint=doc.get("fingerprint", ""), config=doc.get("config", {}),
        )


def _truth(cfg: GeneratorConfig) -> Truth:
    rng = rng_for(cfg.seed, STREAM_TRUTH)
    p = np.asarray(cfg.p, float) if cfg.p is not None else rng.uniform(-0.3, 0.4, cfg.m1)
    q = np.asarray(cfg.q, float) if cfg.q is not None else rng.uniform(-0.2, 0.2, cfg.m2)
    mech = MechanismParams(cfg.b, cfg.c, p, q, cfg.e)
    if cfg.bias_mode == "constant":
        return Truth(mech)
    w = cfg.truth_width
    A = rng.standard_normal((w, cfg.m3)) / math.sqrt(cfg.m3)
    b1 = 0.5 * rng.standard_normal(w)
    B = rng.standard_normal((w, w)) / math.sqrt(w)
    b2 = 0.5 * rng.standard_normal(w)
    Gamma = rng.standard_normal((1, w)) / math.sqrt(w)
    raw = BiasNetworkParams(Gamma, B, A, b1, b2, 0.0)
    calib = bias_forward_batch(raw, rng.standard_normal((4096, cfg.m3)))
    spread = float(calib.std())
    if spread == 0.0:
        raise ValueError("truth network is constant on the calibration sample; change seed")
    scale = cfg.bias_std / spread
    net = BiasNetworkParams(scale * Gamma, B, A, b1, b2, cfg.e - scale * float(calib.mean()))
    return Truth(mech, net)


def generate(cfg: GeneratorConfig) -> Dataset:
    res = cfg.resolved()
    truth = _truth(cfg)
    mech = truth.mech
    if np.any(mech.p <= -1):
        raise ValueError("every p_i must exceed -1 so that 1 + p_i v_i stays positive")
    rng = rng_for(cfg.seed, STREAM_CASES)
    n, m1, m2, m3 = cfg.n, cfg.m1, cfg.m2, cfg.m3
    V = (rng.random((n, m1)) < cfg.factor_prob).astype(float)
    U = (rng.random((n, m2)) < cfg.factor_prob).astype(float)
    signs = rng.choice([-1.0, 1.0], size=(n, m2))
    if cfg.u_signed:
        U = U * signs
    Eta = rng.standard_normal((n, m3))
    x1 = rng.integers(0, res["x1_max"] + 1, n).astype(float)
    x2 = rng.integers(0, res["x2_max"] + 1, n).astype(float)
    w = cfg.sigma * rng.standard_normal(n)

    k = np.arange(n, dtype=float)
    a = np.full(n, float(res["a"]))
    if cfg.growth_epsilon > 0:
        a = a * (1.0 + k / cfg.growth_scale) ** cfg.growth_epsilon
    e_k = np.full(n, mech.e) if truth.net is None else bias_forward_batch(truth.net, Eta)

    benchmark = a + mech.b * x1 + mech.c * x2
    primary = np.prod(1.0 + mech.p * V, axis=1)
    other = 1.0 + U @ mech.q + e_k
    if np.any(benchmark <= 0) or np.any(primary <= 0) or np.any(other <= 0):
        raise ValueError("configuration produces a nonpositive benchmark, primary or other-factor term")
    bounds = cfg.bounds
    z = np.clip(benchmark * primary * other + w, bounds.lower, bounds.upper)
    fp = fingerprint(res)
    return Dataset(
        index=np.arange(n, dtype=np.int64), a=a, x1=x1, x2=x2, V=V, U=U, Eta=Eta,
        lower=np.full(n, bounds.lower), upper=np.full(n, bounds.upper), z=z,
        truth=truth, fingerprint=fp, config=res,
    )


def split(ds: Dataset, ratio: Sequence[int] = (4, 1)) -> tuple[Dataset, Dataset]:
    """Chronological prefix/suffix split (no shuffling)."""
    n = len(ds)
    head, tail = ratio
    n_train = (n * head) // (head + tail)
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"cannot split {n} cases {head}:{tail} into two nonempty parts")
    return ds.take(slice(0, n_train)), ds.take(slice(n_train, n))


def mc_case_mean(cfg: GeneratorConfig, case_index: int, draws: int, seed: int = 12345) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of ``z`` at one fixed case, re-drawing only the noise."""
    ds = generate(cfg)
    truth = ds.truth
    i = case_index
    core = float(ds.phi_rows(i, i + 1)[0] @ truth.theta)
    w = NoiseModel(cfg.sigma).sigma * np.random.default_rng(seed).standard_normal(draws)
    zs = np.clip(core + w, ds.lower[i], ds.upper[i])
    return float(zs.mean()), float(zs.std(ddof=1) / math.sqrt(draws))
