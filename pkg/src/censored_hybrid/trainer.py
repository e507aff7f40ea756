"""Adam, the two-stage pipeline, and the three comparison baselines.

Stage 1 runs ASG once over the training cases and reads the mechanism
coefficients back out of the expanded estimate. Stage 2 refines mechanism
and bias network together with Adam on chronological mini-batches, starting
from several random network initialisations and keeping the one with the
best training RAD.

Randomness is keyed as ``SeedSequence([seed, STREAM_RESTART, r])`` for
restart ``r`` (and ``STREAM_SMNN`` / ``STREAM_SNN`` for the baselines), so a
restart's result does not depend on how many worker threads ran it.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from types import SimpleNamespace
from typing import Callable, Literal, Optional, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .asg import ASGConfig, RegretTracker, default_M, run as asg_run
from .datagen import SCHEMA_VERSION, Dataset, fingerprint, net_from_dict, net_to_dict, rng_for
from .evaluation import rad
from .expansion import Recovered, recover_params
from .gradients import FlatParams, ParamLayout, loss_and_grad, snn_loss_and_grad
from .model import BiasNetworkParams, HybridModel, MechanismParams, NoiseModel, bias_forward_batch, predict_batch

STREAM_RESTART = 10
STREAM_SMNN = 11
STREAM_SNN = 12

THREADS_ENV = "CENSORED_HYBRID_THREADS"

GAMMA_DEFAULT = {"minor": 0.2, "serious": 1.4}

Method = Literal["tsl", "sm-asg", "snn-adam", "smnn-adam"]
METHODS = ("tsl", "sm-asg", "snn-adam", "smnn-adam")


@dataclass
class TrainConfig:
    eta1: float = 0.001
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    T: int = 245
    N_epochs: int = 30
    gamma: Optional[float] = None
    restarts: int = 10
    seed: int = 0
    regime: Literal["minor", "serious"] = "minor"
    width: int = 128
    threads: Optional[int] = None
    # stage 1
    sigma: float = 5.0
    M: Optional[float] = None
    mu: float = 1.0
    alpha: float = 1.02
    gbar_mode: str = "constant_one"
    L_norm: Optional[float] = None
    epsilon_growth: float = 0.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"beta1, beta2 must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.eta1 > 0:
            raise ValueError(f"eta1 must be positive, got {self.eta1}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.T < 1 or self.N_epochs < 0 or self.restarts < 1 or self.width < 1:
            raise ValueError("T, restarts and width must be >= 1 and N_epochs >= 0")
        if self.regime not in GAMMA_DEFAULT:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def gamma_value(self) -> float:
        return GAMMA_DEFAULT[self.regime] if self.gamma is None else float(self.gamma)

    def asg_config(self, train: Dataset) -> ASGConfig:
        M = self.M
        if M is None:
            comp = train.growth_bound(self.epsilon_growth) if self.epsilon_growth > 0 else train.max_component()
            M = default_M(comp)
        return ASGConfig(M=M, mu=self.mu, alpha=self.alpha, L_norm=self.L_norm,
                         gbar_mode=self.gbar_mode, epsilon_growth=self.epsilon_growth)

    def resolved(self) -> dict:
        """Every setting that can change the result; ``threads`` cannot, so it is left out."""
        d = asdict(self)
        d["gamma"] = self.gamma_value
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def worker_count(cfg: TrainConfig) -> int:
    if cfg.threads is not None:
        return cfg.threads
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    h: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.h)


def adam_step(state: AdamState, g, params: FlatParams, cfg: TrainConfig) -> tuple[AdamState, FlatParams]:
    """One Adam move *along* ``g`` (callers pass the negative loss gradient).

    ``h`` is global: it keeps counting across epochs together with the moments.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {params.values.shape}")
    h = state.h + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**h)
    v_hat = v / (1.0 - cfg.beta2**h)
    new = params.values + cfg.eta1 * m_hat / (cfg.eps + np.sqrt(v_hat))
    return AdamState(m, v, h), FlatParams(new, params.layout)


# --- stage 1 ------------------------------------------------------------------

@dataclass
class Stage1Result:
    theta: np.ndarray
    recovered: Recovered
    regret: Optional[RegretTracker]
    M: float


def stage1_run(train: Dataset, cfg: TrainConfig, track_regret: bool = False) -> Stage1Result:
    if len(train) == 0:
        raise ValueError("stage 1 needs a nonempty training set")
    asg_cfg = cfg.asg_config(train)
    theta_true = None
    if track_regret:
        if train.truth is None:
            raise ValueError("regret tracking needs a dataset with a known truth")
        theta_true = train.truth.theta
    state, tracker = asg_run(train, asg_cfg, NoiseModel(cfg.sigma), theta_true=theta_true)
    rec = recover_params(state.theta, train.m1, train.m2)
    return Stage1Result(state.theta.copy(), rec, tracker, asg_cfg.M)


# --- stage 2 ------------------------------------------------------------------

def _batches(train, T: int) -> list[SimpleNamespace]:
    n = len(train)
    if T > n:
        raise ValueError(f"batch size T={T} exceeds the {n} training cases")
    out = []
    for h in range(n // T):
        sl = slice(h * T, (h + 1) * T)
        out.append(SimpleNamespace(a=train.a[sl], x1=train.x1[sl], x2=train.x2[sl], V=train.V[sl],
                                   U=train.U[sl], Eta=train.Eta[sl], lower=train.lower[sl],
                                   upper=train.upper[sl], z=train.z[sl]))
    return out


EpochHook = Callable[[int, AdamState, FlatParams, float], None]


def _adam_loop(params: FlatParams, batches, cfg: TrainConfig, grad_fn, on_epoch_end: Optional[EpochHook]):
    state = AdamState.zeros(params.values.size)
    for epoch in range(cfg.N_epochs):
        total = 0.0
        for batch in batches:
            loss, grad = grad_fn(params, batch)
            total += loss
            # the update adds g, and g is the negative gradient
            state, params = adam_step(state, -grad, params, cfg)
        if not np.all(np.isfinite(params.values)):
            raise FloatingPointError(f"non-finite parameters after epoch {epoch + 1}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, state, params, total / len(batches))
    return params


def stage2_run(init: FlatParams, ebar: float, train, cfg: TrainConfig, gamma: Optional[float] = None,
               on_epoch_end: Optional[EpochHook] = None) -> FlatParams:
    """Adam over ``N_epochs`` passes of the ``floor(n/T)`` chronological batches.

    The ``n mod T`` trailing cases are never used. Moments and ``h`` carry
    over from one epoch to the next. ``on_epoch_end(epoch, state, params,
    mean_batch_loss)`` is called after every epoch.
    """
    gamma = cfg.gamma_value if gamma is None else gamma
    batches = _batches(train, cfg.T)
    if cfg.N_epochs == 0:
        return init.copy()

    def grad_fn(params, batch):
        report, grad = loss_and_grad(params, batch, gamma, ebar)
        return report.loss, grad

    return _adam_loop(init.copy(), batches, cfg, grad_fn, on_epoch_end)


def init_network(rng: np.random.Generator, m: int, m3: int, b3: float = 0.0) -> BiasNetworkParams:
    """Uniform in ``+-1/sqrt(fan_in)`` per weight matrix, zero hidden biases, output bias ``b3``."""
    A = rng.uniform(-1.0, 1.0, (m, m3)) / math.sqrt(m3)
    B = rng.uniform(-1.0, 1.0, (m, m)) / math.sqrt(m)
    Gamma = rng.uniform(-1.0, 1.0, (1, m)) / math.sqrt(m)
    return BiasNetworkParams(Gamma, B, A, np.zeros(m), np.zeros(m), b3)


def training_loss(params: FlatParams, train, gamma: float, ebar: float) -> float:
    return loss_and_grad(params, train, gamma, ebar, need_grad=False)[0].loss


# --- fitted models ------------------------------------------------------------

@dataclass
class SNNModel:
    """Saturated free-standing network on standardised ``[a, x1, x2, v, u, eta]``."""

    values: np.ndarray
    layout: ParamLayout
    mean: np.ndarray
    scale: np.ndarray

    def features(self, batch) -> np.ndarray:
        return (_snn_raw(batch) - self.mean) / self.scale

    def predict(self, batch) -> np.ndarray:
        prm = self.layout.unpack_arrays(self.values)
        net = BiasNetworkParams(prm["Gamma"], prm["B"], prm["A"], prm["b1"], prm["b2"], prm["b3"])
        return np.clip(bias_forward_batch(net, self.features(batch)), batch.lower, batch.upper)


def _snn_raw(batch) -> np.ndarray:
    return np.column_stack([batch.a, batch.x1, batch.x2, batch.V, batch.U, batch.Eta]).astype(float)


@dataclass
class RestartRecord:
    restart: int
    train_rad: float
    train_loss: float
    selected: bool = False


@dataclass
class FittedModel:
    method: str
    model: Union[HybridModel, SNNModel]
    dims: dict
    recovered: Optional[Recovered] = None
    restarts: list = field(default_factory=list)
    dataset_fingerprint: str = ""
    config: dict = field(default_factory=dict)

    def predict(self, batch) -> np.ndarray:
        if (batch.V.shape[1], batch.U.shape[1], batch.Eta.shape[1]) != (self.dims["m1"], self.dims["m2"],
                                                                         self.dims["m3"]):
            raise ValueError(f"data dimensions do not match the model's {self.dims}")
        if isinstance(self.model, SNNModel):
            return self.model.predict(batch)
        return predict_batch(self.model, batch)

    @property
    def fingerprint(self) -> str:
        return fingerprint({"method": self.method, "config": self.config, "dataset": self.dataset_fingerprint})

    # --- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION, "kind": "model", "method": self.method, "dims": self.dims,
            "dataset_fingerprint": self.dataset_fingerprint, "config": self.config,
            "fingerprint": self.fingerprint,
        }
        if self.recovered is not None:
            r = self.recovered
            doc["stage1"] = {"b0": r.b0, "c0": r.c0, "ebar": r.ebar, "p0": r.p0.tolist(), "q0": r.q0.tolist()}
        if isinstance(self.model, SNNModel):
            s = self.model
            doc["snn"] = {"layout": asdict(s.layout), "values": s.values.tolist(), "mean": s.mean.tolist(),
                          "scale": s.scale.tolist()}
        else:
            mech = self.model.mech
            doc["mechanism"] = {"b": mech.b, "c": mech.c, "p": mech.p.tolist(), "q": mech.q.tolist(), "e": mech.e}
            if self.model.net is not None:
                doc["network"] = net_to_dict(self.model.net)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "model":
            raise ValueError("not a model document of a supported schema_version")
        rec = None
        if "stage1" in doc:
            s = doc["stage1"]
            rec = Recovered(s["b0"], s["c0"], s["ebar"], np.array(s["p0"], float), np.array(s["q0"], float))
        if "snn" in doc:
            s = doc["snn"]
            model = SNNModel(np.array(s["values"], float), ParamLayout(**s["layout"]), np.array(s["mean"], float),
                             np.array(s["scale"], float))
        else:
            net = net_from_dict(doc["network"]) if doc.get("network") else None
            model = HybridModel(MechanismParams(**doc["mechanism"]), net)
        out = cls(doc["method"], model, doc["dims"], rec, [], doc.get("dataset_fingerprint", ""),
                  doc.get("config", {}))
        if doc.get("fingerprint") and doc["fingerprint"] != out.fingerprint:
            raise ValueError("model document fingerprint does not match its contents")
        return out


def write_restarts_csv(records: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["restart", "train_rad", "train_loss", "selected"])
        for r in records:
            w.writerow([r.restart, repr(r.train_rad), repr(r.train_loss), int(r.selected)])


def select_restart(records: list) -> int:
    """Index of the best training RAD; ties go to the earliest restart."""
    best = 0
    for i, r in enumerate(records):
        if r.train_rad > records[best].train_rad:
            best = i
    return best


def _dims(train: Dataset, m: int = 0) -> dict:
    return {"m1": train.m1, "m2": train.m2, "m3": train.m3, "m": m}


def _hybrid_from_flat(params: FlatParams) -> HybridModel:
    mech, net = params.unpack()
    return HybridModel(mech, net)


def _run_parallel(fn, items, workers: int) -> list:
    # one BLAS thread per call keeps every matmul bit-identical whatever the worker count
    with threadpool_limits(limits=1):
        if workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))


# --- trainers -----------------------------------------------------------------

def tsl_train(train: Dataset, cfg: TrainConfig, stage1: Optional[Stage1Result] = None) -> FittedModel:
    """Two-stage learning: ASG initialisation, then Adam from ``restarts`` network draws."""
    s1 = stage1 if stage1 is not None else stage1_run(train, cfg)
    rec = s1.recovered
    mech0 = MechanismParams(rec.b0, rec.c0, rec.p0, rec.q0, 0.0)
    gamma = cfg.gamma_value

    def one(r: int):
        net0 = init_network(rng_for(cfg.seed, STREAM_RESTART, r), cfg.width, train.m3)
        params = stage2_run(FlatParams.pack(mech0, net0), rec.ebar, train, cfg, gamma)
        model = _hybrid_from_flat(params)
        score = rad(predict_batch(model, train), train.z).rad
        return params, RestartRecord(r, score, training_loss(params, train, gamma, rec.ebar))

    results = _run_parallel(one, list(range(cfg.restarts)), worker_count(cfg))
    records = [rec_ for _, rec_ in results]
    best = select_restart(records)
    records[best].selected = True
    return FittedModel("tsl", _hybrid_from_flat(results[best][0]), _dims(train, cfg.width), rec, records,
                       train.fingerprint, cfg.resolved())


def train_sm_asg(train: Dataset, cfg: TrainConfig, stage1: Optional[Stage1Result] = None) -> FittedModel:
    """Constant-bias mechanism with the stage-1 estimate and no refinement."""
    s1 = stage1 if stage1 is not None else stage1_run(train, cfg)
    return FittedModel("sm-asg", HybridModel(s1.recovered.mechanism()), _dims(train), s1.recovered, [],
                       train.fingerprint, cfg.resolved())


def train_smnn_adam_random(train: Dataset, cfg: TrainConfig) -> FittedModel:
    """Stage 2 alone from a fully random start; no anchor, so ``gamma = 0``."""
    rng = rng_for(cfg.seed, STREAM_SMNN)
    mech0 = MechanismParams(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1, train.m1),
                            rng.uniform(-1, 1, train.m2), 0.0)
    net0 = init_network(rng, cfg.width, train.m3)
    with threadpool_limits(limits=1):
        params = stage2_run(FlatParams.pack(mech0, net0), 0.0, train, cfg, gamma=0.0)
    return FittedModel("smnn-adam", _hybrid_from_flat(params), _dims(train, cfg.width), None, [],
                       train.fingerprint, cfg.resolved())


def snn_standardizer(train) -> tuple[np.ndarray, np.ndarray]:
    """Training mean and std per input; constant inputs pass through unscaled."""
    X = _snn_raw(train)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    const = std == 0
    return np.where(const, 0.0, mean), np.where(const, 1.0, std)


def train_snn_adam(train: Dataset, cfg: TrainConfig,
                   on_epoch_end: Optional[EpochHook] = None) -> FittedModel:
    mean, scale = snn_standardizer(train)
    layout = ParamLayout(0, 0, cfg.width, 3 + train.m1 + train.m2 + train.m3)
    # with a zero output bias every prediction starts clamped at the lower bound, where the
    # clamp passes no gradient; start from the mean training sentence instead
    net0 = init_network(rng_for(cfg.seed, STREAM_SNN), cfg.width, layout.m3, b3=float(np.mean(train.z)))
    values = layout.pack_arrays(0.0, 0.0, [], [], net0.Gamma, net0.B, net0.A, net0.b1, net0.b2, net0.b3)
    batches = _batches(train, cfg.T)
    for b in batches:
        b.X = (_snn_raw(b) - mean) / scale

    def grad_fn(params, batch):
        return snn_loss_and_grad(params.values, layout, batch.X, batch.lower, batch.upper, batch.z)

    with threadpool_limits(limits=1):
        params = _adam_loop(FlatParams(values, layout), batches, cfg, grad_fn, on_epoch_end) \
            if cfg.N_epochs else FlatParams(values, layout)
    return FittedModel("snn-adam", SNNModel(params.values, layout, mean, scale), _dims(train, cfg.width), None,
                       [], train.fingerprint, cfg.resolved())


def train_method(method: str, train: Dataset, cfg: TrainConfig, stage1: Optional[Stage1Result] = None) -> FittedModel:
    if method == "tsl":
        return tsl_train(train, cfg, stage1)
    if method == "sm-asg":
        return train_sm_asg(train, cfg, stage1)
    if method == "smnn-adam":
        return train_smnn_adam_random(train, cfg)
    if method == "snn-adam":
        return train_snn_adam(train, cfg)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
