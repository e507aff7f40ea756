"""Command-line entry point: ``censored-hybrid {gen,train,eval,regret,compare}``.

A run config is one JSON document::

    {"schema_version": 1, "seed": 0,
     "generator": {...GeneratorConfig fields except seed...},
     "train": {...TrainConfig fields except seed...},
     "method": "tsl", "methods": [...], "split": [4, 1], "curve_points": 10}

Everything is optional except ``schema_version``. The top-level seed feeds
both the generator and the trainer (they draw from different streams).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from pathlib import Path
from typing import Optional

from .asg import run as asg_run
from .datagen import SCHEMA_VERSION, Dataset, GeneratorConfig, fingerprint, generate, split
from .evaluation import (
    compare,
    geometric_checkpoints,
    prefix_curve,
    rad,
    regret_svg,
    svg_line_chart,
    write_curves_csv,
    write_table_csv,
)
from .expansion import DegenerateLeadingEntry
from .model import NoiseModel
from .trainer import METHODS, FittedModel, TrainConfig, stage1_run, train_method, write_restarts_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_TOP_KEYS = {"schema_version", "seed", "generator", "train", "method", "methods", "split", "curve_points"}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --- config -------------------------------------------------------------------

def _line_of(text: str, key: str) -> Optional[int]:
    pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return i
    return None


def _where(source: str, text: str, key: str) -> str:
    line = _line_of(text, key)
    return f"{source}:{line}" if line else source


class RunConfig:
    """Parsed and fully resolved run configuration."""

    def __init__(self, doc: dict, text: str = "", source: str = "<config>"):
        self.source, self.text = source, text
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}:1: config must be a JSON object")
        unknown = sorted(set(doc) - _TOP_KEYS)
        if unknown:
            raise ConfigError(f"{_where(source, text, unknown[0])}: unknown config key {unknown[0]!r}")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{_where(source, text, 'schema_version')}: schema_version must be {SCHEMA_VERSION}")
        self.seed = self._int(doc, "seed", 0)
        self.generator = self._section(doc, "generator", GeneratorConfig)
        self.train = self._section(doc, "train", TrainConfig)
        self.method = doc.get("method", "tsl")
        if self.method not in METHODS:
            raise ConfigError(f"{_where(source, text, 'method')}: unknown method {self.method!r}; "
                              f"expected one of {list(METHODS)}")
        self.methods = list(doc.get("methods", METHODS))
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"{_where(source, text, 'methods')}: bad method list {self.methods}")
        sp = doc.get("split", [4, 1])
        if not (isinstance(sp, list) and len(sp) == 2 and all(isinstance(x, int) and x > 0 for x in sp)):
            raise ConfigError(f"{_where(source, text, 'split')}: split must be two positive integers")
        self.split = tuple(sp)
        self.curve_points = self._int(doc, "curve_points", 10)
        if self.curve_points < 0:
            raise ConfigError(f"{_where(source, text, 'curve_points')}: curve_points must be >= 0")

    def _int(self, doc, key, default):
        val = doc.get(key, default)
        if not isinstance(val, int) or isinstance(val, bool):
            raise ConfigError(f"{_where(self.source, self.text, key)}: {key} must be an integer")
        return val

    def _section(self, doc, name, cls):
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{_where(self.source, self.text, name)}: {name} must be an object")
        if "seed" in sec:
            raise ConfigError(f"{_where(self.source, self.text, name)}: put the seed at top level, "
                              f"not inside {name!r}")
        try:
            return cls.from_dict({**sec, "seed": self.seed})
        except (TypeError, ValueError) as exc:
            key = _offending_key(str(exc), sec)
            where = _where(self.source, self.text, key) if key else _where(self.source, self.text, name)
            raise ConfigError(f"{where}: invalid {name} config: {exc}") from None

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.generator.seed = seed
        self.train.seed = seed
        return self

    def resolved(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "generator": self.generator.resolved(),
                "train": self.train.resolved(), "method": self.method, "methods": self.methods,
                "split": list(self.split), "curve_points": self.curve_points}


def _offending_key(msg: str, sec: dict) -> Optional[str]:
    for key in sorted(sec, key=len, reverse=True):
        if re.search(r"\b" + re.escape(key) + r"\b", msg):
            return key
    return None


def load_config(path: str, seed_override: Optional[int] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    cfg = RunConfig(doc, text, path)
    if seed_override is not None:
        cfg.with_seed(seed_override)
    return cfg


def _default_config(seed_override: Optional[int]) -> RunConfig:
    cfg = RunConfig({"schema_version": SCHEMA_VERSION})
    if seed_override is not None:
        cfg.with_seed(seed_override)
    return cfg


# --- artifacts ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, resolved: dict, artifacts: list[Path], extra: Optional[dict] = None):
    doc = {
        "schema_version": SCHEMA_VERSION, "kind": "manifest", "command": command, "config": resolved,
        "config_fingerprint": fingerprint(resolved),
        "artifacts": {p.name: sha256_file(p) for p in sorted(artifacts)},
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_dataset(path: str) -> Dataset:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read dataset: {exc.strerror}") from None
    try:
        ds = Dataset.from_csv(text) if p.suffix == ".csv" else Dataset.from_json(text)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid dataset file: {exc}") from None
    if p.suffix == ".csv" and ds.fingerprint:
        sibling = p.with_suffix(".json")
        if sibling.exists():
            full = Dataset.from_json(sibling.read_text())
            if full.fingerprint != ds.fingerprint:
                raise DataError(f"{path}: fingerprint {ds.fingerprint} disagrees with {sibling.name}")
    return ds


def load_model(path: str) -> FittedModel:
    try:
        return FittedModel.from_json(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read model: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid model file: {exc}") from None


def _outdir(path: Optional[str]) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(ds: Dataset, ratio) -> tuple[Dataset, Dataset]:
    try:
        return split(ds, ratio)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _train_config_for(cfg: RunConfig, ds: Dataset) -> TrainConfig:
    """Trainer settings with the regime and noise level taken from the dataset when it records them."""
    tc = cfg.train
    gen = ds.config or {}
    updates = {}
    if "regime" in gen and "regime" not in _explicit(cfg, "train"):
        updates["regime"] = gen["regime"]
    if "sigma" in gen and "sigma" not in _explicit(cfg, "train"):
        updates["sigma"] = gen["sigma"]
    if updates:
        tc = TrainConfig(**{**vars(tc), **updates})
    return tc


def _explicit(cfg: RunConfig, section: str) -> set:
    if not cfg.text:
        return set()
    try:
        return set(json.loads(cfg.text).get(section, {}))
    except (json.JSONDecodeError, AttributeError):
        return set()


# --- commands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    try:
        ds = generate(cfg.generator)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: generator config is not usable: {exc}") from None
    out = _outdir(args.out)
    (out / "dataset.json").write_text(ds.to_json() + "\n")
    (out / "dataset.csv").write_text(ds.to_csv())
    write_manifest(out, "gen", cfg.resolved(), [out / "dataset.json", out / "dataset.csv"],
                   {"dataset_fingerprint": ds.fingerprint, "censoring_fraction": ds.censoring_fraction()})
    print(f"wrote {len(ds)} cases to {out} (fingerprint {ds.fingerprint})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed_override) if args.config else _default_config(args.seed_override)
    method = args.method or cfg.method
    ds = load_dataset(args.dataset)
    train, _ = _split(ds, cfg.split)
    tc = _train_config_for(cfg, ds)
    if method not in ("sm-asg",) and tc.T > len(train):
        raise ConfigError(f"batch size T={tc.T} exceeds the {len(train)} training cases")
    model = train_method(method, train, tc)
    out = _outdir(args.out)
    paths = [out / "model.json"]
    (out / "model.json").write_text(model.to_json() + "\n")
    if model.restarts:
        write_restarts_csv(model.restarts, out / "restarts.csv")
        paths.append(out / "restarts.csv")
    resolved = cfg.resolved()
    resolved["method"] = method
    resolved["train"] = tc.resolved()
    write_manifest(out, "train", resolved, paths, {"dataset_fingerprint": ds.fingerprint,
                                                   "model_fingerprint": model.fingerprint})
    if model.recovered is not None:
        r = model.recovered
        print(f"stage 1: b0={r.b0:.6g} c0={r.c0:.6g} ebar={r.ebar:.6g} p0={r.p0.tolist()} q0={r.q0.tolist()}")
    print(f"trained {method} on {len(train)} cases -> {out / 'model.json'}")
    return EXIT_OK


def _eval_split(ds: Dataset, which: str, ratio) -> Dataset:
    if which == "all":
        return ds
    train, test = _split(ds, ratio)
    return test if which == "test" else train


def cmd_eval(args) -> int:
    if not args.model or not args.dataset:
        raise ConfigError("eval needs --model and --dataset")
    cfg = load_config(args.config, args.seed_override) if args.config else _default_config(args.seed_override)
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    if model.dataset_fingerprint and ds.fingerprint and model.dataset_fingerprint != ds.fingerprint:
        raise DataError(f"model was trained on dataset {model.dataset_fingerprint}, "
                        f"but {args.dataset} has fingerprint {ds.fingerprint}")
    part = _eval_split(ds, args.split, cfg.split)
    try:
        preds = model.predict(part)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = rad(preds, part.z, model.method)
    out = _outdir(args.out)
    report.to_csv(out / "eval_cases.csv")
    summary = {"schema_version": SCHEMA_VERSION, "kind": "eval", "method": model.method, "split": args.split,
               "n2": report.n2, "rad": report.rad, "triggered": int(report.triggered.sum()),
               "dataset_fingerprint": ds.fingerprint, "model_fingerprint": model.fingerprint}
    (out / "eval.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    write_manifest(out, "eval", cfg.resolved(), [out / "eval.json", out / "eval_cases.csv"],
                   {"dataset_fingerprint": ds.fingerprint, "model_fingerprint": model.fingerprint})
    print(f"RAD({model.method}, {args.split}) = {report.rad:.6f} over {report.n2} cases")
    return EXIT_OK


def cmd_regret(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    ds = load_dataset(args.dataset) if args.dataset else _generate(cfg)
    if ds.truth is None:
        raise DataError("regret tracking needs a synthetic dataset with its truth block")
    tc = _train_config_for(cfg, ds)
    asg_cfg = tc.asg_config(ds)
    _, tracker = asg_run(ds, asg_cfg, NoiseModel(tc.sigma), theta_true=ds.truth.theta)
    out = _outdir(args.out)
    tracker.to_csv(out / "regret.csv")
    (out / "regret.svg").write_text(regret_svg(tracker, eps=asg_cfg.epsilon_growth))
    write_manifest(out, "regret", cfg.resolved(), [out / "regret.csv", out / "regret.svg"],
                   {"dataset_fingerprint": ds.fingerprint, "M": asg_cfg.M})
    n = len(ds)
    avg, norm = tracker.at(n)
    print(f"n={n} averaged regret {avg:.6g}, normalised cumulative {norm:.6g}")
    return EXIT_OK


def _generate(cfg: RunConfig) -> Dataset:
    try:
        return generate(cfg.generator)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: generator config is not usable: {exc}") from None


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    ds = load_dataset(args.dataset) if args.dataset else _generate(cfg)
    train, test = _split(ds, cfg.split)
    tc = _train_config_for(cfg, ds)
    s1 = stage1_run(train, tc) if {"tsl", "sm-asg"} & set(cfg.methods) else None
    models = {m: train_method(m, train, tc, s1) for m in cfg.methods}
    rows = compare(models, test)
    out = _outdir(args.out)
    write_table_csv(rows, out / "comparison.csv")
    paths = [out / "comparison.csv"]
    if cfg.curve_points > 0:
        n_min = min(len(train), max(tc.T, len(train) // 50))
        sizes = geometric_checkpoints(n_min, len(train), cfg.curve_points)
        curves = [prefix_curve(m, lambda part, m=m: train_method(m, part, tc), train, test, sizes)
                  for m in sorted(cfg.methods)]
        write_curves_csv(curves, out / "curves.csv")
        svg = svg_line_chart({c.method: (c.sizes, c.rads) for c in curves}, "Test RAD by training size",
                             "training cases", "RAD", logx=True)
        (out / "curves.svg").write_text(svg)
        paths += [out / "curves.csv", out / "curves.svg"]
    write_manifest(out, "compare", cfg.resolved(), paths, {"dataset_fingerprint": ds.fingerprint})
    for name, n2, score in rows:
        print(f"{name:10s} RAD {score:.6f} (n={n2})")
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="censored-hybrid", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed-override", type=int, default=None, help="replace the config's top-level seed")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit one method on the training split")
    common(p, False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=METHODS, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model with RAD")
    common(p, False)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("regret", help="stage-1 regret curve on synthetic data")
    common(p, True)
    p.add_argument("--dataset", default=None, help="use this dataset instead of generating one")
    p.set_defaults(func=cmd_regret)

    p = sub.add_parser("compare", help="train every method and tabulate test RAD")
    common(p, True)
    p.add_argument("--dataset", default=None, help="use this dataset instead of generating one")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DegenerateLeadingEntry as exc:
        print(f"numeric failure: {exc}. Stage 1 did not move the leading coefficient; check that the bound "
              f"M is not far too large and that the training set has enough cases.", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures come from settings
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
