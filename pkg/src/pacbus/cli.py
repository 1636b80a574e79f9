"""Command-line front end: configuration, orchestration and reports.

Verbs: gen-tasks, train, certify, evaluate, replay.  Every verb is a pure
function of the config file, the seed and its input files, so reruns give
byte-identical outputs.

Exit codes: 0 success, 1 replay mismatch, 2 validation error, 3 numerical
divergence, 4 IO or parse error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselearn import StabilityBudget
from .bounds import MIN_TASKS, BoundReport, certify
from .core import PosteriorParams, RngStream
from .meta import (GRADIENT_MODES, TrainConfig, TrainingDivergence, evaluate_posterior, pacbus_h_train,
                   pacbus_train, pacbus_train_minibatch, train_prior)
from .models import (ModelSpec, certified_linear_constants, certified_network_constants,
                     estimate_network_constants, init_params)
from .tasks import (ROLES, StoreFormatError, TaskPool, gen_circle_tasks, load_embedded_dataset, load_pool,
                    make_cluster_store, make_kway_tasks, make_nme_pool, save_pool)

log = logging.getLogger("pacbus")

EXIT_OK, EXIT_MISMATCH, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4
MODES = ("pacbus", "pacbus-minibatch", "pacbus-h", "maml-like")
GENERATORS = ("circle", "cluster", "nme", "embedded")
HEURISTIC_MODES = ("pacbus-h",)

# Large-scale values from the original experiments (10000 tasks, multi-day
# runs).  They are printed for orientation and are not reproduced here.
REFERENCE_LINES = (
    ("circle-class bound, 10000 tasks", "0.2213 +/- 0.0012"),
    ("4-way text embeddings bound, 1-shot", "0.4999 +/- 0.0003"),
    ("4-way text embeddings bound, 3-shot", "0.5058 +/- 0.0002"),
    ("4-way text embeddings bound, 5-shot", "0.5101 +/- 0.0002"),
)

# section -> key -> (type, default).  "ints" and "floats" are comma lists;
# a default of None marks an optional value.
SCHEMA = {
    "run": {
        "seed": ("int", 0),
        "mode": ("str", "pacbus"),
        "out": ("str", "pacbus-run"),
    },
    "tasks": {
        "generator": ("str", "circle"),
        "prior_count": ("int", 50),
        "train_count": ("int", 500),
        "test_count": ("int", 200),
        "m": ("int", 10),                 # circle: training samples per task
        "n": ("int", 50),                 # circle: validation samples per task
        "test_n": ("int", 200),           # circle: held-out samples per test task
        "way": ("int", 4),                # k-way generators
        "shots": ("int", 1),
        "queries": ("int", 5),
        "test_queries": ("int", 5),
        "d": ("int", 16),
        "classes": ("int", 100),
        "spread": ("float", 0.2),
        "per_class": ("int", 20),
        "groups": ("int", 10),
        "split": ("floats", (0.2, 0.5, 0.3)),   # class fractions: prior, train, test
        "permute_at_test": ("bool", True),
        "path": ("str", ""),
    },
    "model": {
        "arch": ("str", "mlp"),
        "widths": ("ints", (2, 16, 16, 2)),
        "r": ("float", 2.0),
        "r_z": ("float", 1.0),
    },
    "base": {
        "algorithm": ("str", "sgd"),
        "steps": ("int", 1),
        "lr": ("float", 0.05),
        "schedule": ("str", "inverse-t"),
        "heuristic_lr": ("float", None),
    },
    "prior": {
        "iterations": ("int", 300),
        "lr": ("float", 2.0),
        "variance": ("float", 0.01),
        "batch_size": ("int", 0),
        "init_scale": ("float", 1.0),
    },
    "meta": {
        "meta_lr": ("float", 1e-3),
        "iterations": ("int", 200),
        "batch_size": ("int", 0),
        "gradient_mode": ("str", "first-order"),
        "lambda1": ("float", 1.0),
        "lambda2": ("float", 1.0),
        "constant_samples": ("int", 1),
        "samples_per_step": ("int", 1),
        "learn_variance": ("bool", True),
        "early_stop": ("bool", False),
        "early_stop_tol": ("float", 1e-6),
        "early_stop_patience": ("int", 50),
        "checkpoint_every": ("int", 0),
    },
    "bound": {
        "delta": ("float", 0.005),
        "delta_prime": ("float", 0.005),
        "N": ("int", 1000),
        "union_bound": ("bool", False),
        "validation": ("bool", True),
    },
    "eval": {
        "draws": ("int", 20),
    },
}
UNHASHED = {"run.out"}


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config error in {key}: {msg}")
        self.key = key


class ConfigSyntaxError(ConfigError):
    """Malformed configuration text (reported with exit code 4)."""

    def __init__(self, path: str, line: int | None, msg: str):
        where = f"{path}:{line}" if line else path
        ValueError.__init__(self, f"cannot parse {where}: {msg}")
        self.key, self.path, self.line = "file", path, line


class LockHeld(OSError):
    pass


class ReplayMismatch(RuntimeError):
    pass


# ------------------------------------------------------------- config

def _convert(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "ints":
            return tuple(int(x) for x in raw.split(","))
        if kind == "floats":
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot read {raw!r} as {kind}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration: every schema key with its value.  Index with
    dotted names, e.g. ``cfg["meta.iterations"]``."""

    values: dict
    explicit: frozenset = field(default_factory=frozenset)

    def __getitem__(self, key: str):
        sec, name = key.split(".")
        return self.values[sec][name]

    # derived quantities -------------------------------------------------
    @property
    def heuristic(self) -> bool:
        return self["run.mode"] in HEURISTIC_MODES

    @property
    def out(self) -> Path:
        return Path(self["run.out"])

    @property
    def way(self) -> int:
        g = self["tasks.generator"]
        return 2 if g == "circle" else self["tasks.groups"] if g == "nme" else self["tasks.way"]

    @property
    def input_dim(self) -> int:
        return 2 if self["tasks.generator"] == "circle" else self["tasks.d"]

    def split_sizes(self, role: str) -> tuple:
        """(m, n) of the pools of ``role``."""
        if self["tasks.generator"] == "circle":
            return self["tasks.m"], self["tasks.test_n"] if role == "meta-test" else self["tasks.n"]
        q = self["tasks.test_queries"] if role == "meta-test" else self["tasks.queries"]
        return self.way * self["tasks.shots"], self.way * q

    @property
    def base_lr(self) -> float:
        h = self["base.heuristic_lr"]
        return self["base.lr"] if h is None else h

    def canonical(self) -> dict:
        return {sec: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()
                      if f"{sec}.{k}" not in UNHASHED}
                for sec, kv in self.values.items()}

    @property
    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def tasks_hash(self) -> str:
        text = json.dumps({"seed": self["run.seed"], "tasks": self.canonical()["tasks"]}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def spec(self) -> ModelSpec:
        w = self["model.widths"]
        if self["model.arch"] == "linear":
            return ModelSpec.linear(w[0], w[-1], self["model.r"], self["model.r_z"])
        return ModelSpec.mlp(w, self["model.r"], self["model.r_z"])

    def budget(self, spec: ModelSpec, m: int, n: int) -> StabilityBudget:
        """Certified stability budget of the projected base learner."""
        if spec.arch == "linear":
            constants = certified_linear_constants(spec)
        else:
            constants = certified_network_constants(spec)
        schedule = self["base.schedule"] == "inverse-t"
        lr = self["base.lr"]
        return StabilityBudget(self["base.algorithm"], self["base.steps"], constants, m, n,
                               step_size=None if schedule else lr, schedule_c=lr if schedule else None,
                               convex=spec.arch == "linear")

    def train_config(self) -> TrainConfig:
        b = self["meta.batch_size"]
        return TrainConfig(
            self["meta.meta_lr"], self["meta.iterations"], b or None, self["meta.gradient_mode"],
            self["meta.lambda1"], self["meta.lambda2"], self["meta.constant_samples"], self["run.seed"],
            self["meta.samples_per_step"], self["bound.delta"], self["meta.early_stop"],
            self["meta.early_stop_tol"], self["meta.early_stop_patience"], self["meta.learn_variance"])


def parse_config(text: str, overrides: dict | None = None, source: str = "<config>") -> ExperimentConfig:
    """Parse INI text, apply ``overrides`` (dotted key -> raw value) and
    validate.  Raises ConfigError naming the offending key."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        errors = getattr(e, "errors", None)
        if isinstance(e, configparser.ParsingError) and errors:
            line, content = errors[0]
            raise ConfigSyntaxError(source, line, f"cannot read line {content}") from None
        raise ConfigSyntaxError(source, getattr(e, "lineno", None), str(e).splitlines()[0]) from None
    values, explicit = {}, set()
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(sec, f"unknown section; expected one of {sorted(SCHEMA)}")
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        given = dict(parser.items(sec)) if parser.has_section(sec) else {}
        for key in given:
            if key not in keys:
                raise ConfigError(f"{sec}.{key}", "unknown key")
        for key, (kind, default) in keys.items():
            name = f"{sec}.{key}"
            raw = (overrides or {}).get(name, given.get(key))
            if raw is None:
                values[sec][key] = default
            else:
                values[sec][key] = raw if not isinstance(raw, str) else _convert(kind, raw, name)
                explicit.add(name)
    cfg = ExperimentConfig(values, frozenset(explicit))
    cfg = _normalize_mode(cfg)
    validate_config(cfg)
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_config(text, overrides, str(path))


def _normalize_mode(cfg: ExperimentConfig) -> ExperimentConfig:
    mode = cfg["run.mode"]
    if mode not in MODES:
        raise ConfigError("run.mode", f"must be one of {MODES}, got {mode!r}")
    if mode != "maml-like":
        return cfg
    # the alias is the heuristic with both regularizers switched off
    for key in ("meta.lambda1", "meta.lambda2"):
        if key in cfg.explicit and cfg[key] != 0:
            raise ConfigError(key, "maml-like mode fixes both weights to 0")
    values = {sec: dict(kv) for sec, kv in cfg.values.items()}
    values["run"]["mode"] = "pacbus-h"
    values["meta"]["lambda1"] = values["meta"]["lambda2"] = 0.0
    return ExperimentConfig(values, cfg.explicit)


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(key, msg)


def validate_config(cfg: ExperimentConfig) -> None:
    """Reject every downstream precondition violation before any compute."""
    mode = cfg["run.mode"]
    gen = cfg["tasks.generator"]
    _require(cfg["run.seed"] >= 0, "run.seed", "must be non-negative")
    _require(gen in GENERATORS, "tasks.generator", f"must be one of {GENERATORS}")
    _require(cfg["tasks.prior_count"] >= 0, "tasks.prior_count", "must be non-negative")
    _require(cfg["tasks.train_count"] >= MIN_TASKS, "tasks.train_count",
             f"the bound needs at least {MIN_TASKS} meta-training tasks")
    _require(cfg["tasks.test_count"] >= 1, "tasks.test_count", "must be at least 1")
    if gen == "circle":
        _require(cfg["tasks.m"] >= 1, "tasks.m", "must be at least 1")
        _require(cfg["tasks.n"] >= 0, "tasks.n", "must be non-negative")
        _require(cfg["tasks.test_n"] >= 1, "tasks.test_n", "evaluation needs held-out samples")
    else:
        _require(cfg["tasks.shots"] >= 1, "tasks.shots", "must be at least 1")
        _require(cfg["tasks.queries"] >= 0, "tasks.queries", "must be non-negative")
        _require(cfg["tasks.test_queries"] >= 1, "tasks.test_queries", "evaluation needs held-out samples")
        split = cfg["tasks.split"]
        _require(len(split) == 3 and all(f >= 0 for f in split) and math.isclose(sum(split), 1.0),
                 "tasks.split", "needs three non-negative fractions (prior, train, test) summing to 1")
        _require(cfg["tasks.way"] >= 2, "tasks.way", "must be at least 2")
        _require(cfg["tasks.groups"] >= 2, "tasks.groups", "must be at least 2")
        if gen == "embedded":
            _require(bool(cfg["tasks.path"]), "tasks.path", "the embedded generator needs a store file")
        else:
            _require(cfg["tasks.d"] >= 1, "tasks.d", "must be at least 1")
            _require(cfg["tasks.classes"] >= cfg.way, "tasks.classes", "fewer classes than the task way")
            _require(cfg["tasks.spread"] > 0, "tasks.spread", "must be positive")
            need = cfg["tasks.shots"] + max(cfg["tasks.queries"], cfg["tasks.test_queries"])
            _require(cfg["tasks.per_class"] >= need, "tasks.per_class",
                     f"each class needs at least shots + queries = {need} samples")

    arch = cfg["model.arch"]
    widths = cfg["model.widths"]
    _require(arch in ("linear", "mlp"), "model.arch", "must be 'linear' or 'mlp'")
    _require(all(w >= 1 for w in widths) and len(widths) >= 2, "model.widths", "needs at least two positive widths")
    if arch == "linear":
        _require(len(widths) == 2, "model.widths", "a linear model has exactly two widths (d, k)")
    _require(widths[-1] == cfg.way, "model.widths", f"last width must equal the task way {cfg.way}")
    if gen != "embedded":
        _require(widths[0] == cfg.input_dim, "model.widths", f"first width must equal the input dimension {cfg.input_dim}")
    _require(cfg["model.r"] > 0, "model.r", "must be positive")
    _require(cfg["model.r_z"] >= 1, "model.r_z", "generated inputs have norm up to 1")

    _require(cfg["base.algorithm"] in ("gd", "sgd"), "base.algorithm", "must be 'gd' or 'sgd'")
    _require(cfg["base.schedule"] in ("fixed", "inverse-t"), "base.schedule", "must be 'fixed' or 'inverse-t'")
    _require(cfg["base.steps"] >= 0, "base.steps", "must be non-negative")
    _require(cfg["base.lr"] >= 0, "base.lr", "must be non-negative")
    m, n = cfg.split_sizes("meta-train")

    _require(cfg["prior.iterations"] >= 0, "prior.iterations", "must be non-negative")
    if cfg["prior.iterations"] > 0:
        _require(cfg["tasks.prior_count"] >= 1, "tasks.prior_count", "prior training needs prior tasks")
    _require(cfg["prior.lr"] > 0, "prior.lr", "must be positive")
    _require(cfg["prior.variance"] > 0, "prior.variance", "must be positive")
    _require(0 <= cfg["prior.batch_size"], "prior.batch_size", "must be non-negative")
    _require(cfg["prior.init_scale"] > 0, "prior.init_scale", "must be positive")

    _require(cfg["meta.meta_lr"] > 0, "meta.meta_lr", "must be positive")
    _require(cfg["meta.iterations"] >= 0, "meta.iterations", "must be non-negative")
    _require(0 <= cfg["meta.batch_size"] <= cfg["tasks.train_count"], "meta.batch_size",
             "must lie in [0, train_count] (0 uses every task)")
    _require(cfg["meta.gradient_mode"] in GRADIENT_MODES, "meta.gradient_mode", f"must be one of {GRADIENT_MODES}")
    for key in ("meta.lambda1", "meta.lambda2"):
        _require(cfg[key] >= 0, key, "must be non-negative")
    _require(cfg["meta.constant_samples"] >= 1, "meta.constant_samples", "must be at least 1")
    _require(cfg["meta.samples_per_step"] >= 1, "meta.samples_per_step", "must be at least 1")
    _require(cfg["meta.checkpoint_every"] >= 0, "meta.checkpoint_every", "must be non-negative")
    if mode in ("pacbus", "pacbus-minibatch"):
        for key in ("meta.lambda1", "meta.lambda2"):
            _require(cfg[key] == 1.0, key, f"mode {mode} minimizes the bound itself; weights must be 1")
    if mode == "pacbus-minibatch":
        _require(cfg["meta.batch_size"] >= 1, "meta.batch_size", "pacbus-minibatch needs a batch size")
    if mode == "pacbus":
        _require(cfg["meta.batch_size"] == 0, "meta.batch_size", "pacbus uses every task; use pacbus-minibatch")
    if cfg["meta.gradient_mode"] == "exact-linear":
        _require(arch == "linear" and not cfg.heuristic, "meta.gradient_mode",
                 "exact-linear needs the linear model in a bound-minimizing mode")

    delta, dprime = cfg["bound.delta"], cfg["bound.delta_prime"]
    _require(0 < delta < 1, "bound.delta", "must lie in (0, 1)")
    _require(0 < dprime < 1, "bound.delta_prime", "must lie in (0, 1)")
    _require(delta + dprime < 1, "bound.delta_prime", "delta + delta_prime must be below 1")
    _require(cfg["bound.N"] >= 1, "bound.N", "must be at least 1")
    _require(cfg["eval.draws"] >= 1, "eval.draws", "must be at least 1")

    if cfg.heuristic:
        _require(arch == "mlp", "model.arch", "the heuristic estimates network constants; use the mlp")
        _require(cfg.base_lr > 0, "base.heuristic_lr", "the heuristic needs a positive step")
        _require(m >= 2, "tasks.m", "the one-step stability term needs at least 2 training samples")
        return
    # bound-minimizing modes: the stability budget must be admissible
    try:
        spec = cfg.spec()
        cfg.budget(spec, m, n if cfg["bound.validation"] else 0)
    except ValueError as e:
        key = "base.lr" if "2/c_S" in str(e) else "base.schedule" if "schedule" in str(e) \
            else "base.algorithm" if "SGD" in str(e) else "tasks.m" if "m >=" in str(e) else "base"
        raise ConfigError(key, str(e)) from None


# ------------------------------------------------------------ file IO

def _dump(obj) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@contextmanager
def run_lock(out: Path):
    """Exclusive lock on an output directory for the duration of a verb."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".pacbus.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(f"{out} is in use by another run (remove {lock} if that run is gone)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def psi_to_dict(psi: PosteriorParams) -> dict:
    return {"mean": [float(x) for x in psi.mean], "log_var": [float(x) for x in psi.log_var]}


def psi_from_dict(d: dict) -> PosteriorParams:
    return PosteriorParams(np.array(d["mean"], dtype=np.float64), np.array(d["log_var"], dtype=np.float64))


def write_checkpoint(path: Path, cfg: ExperimentConfig, psi: PosteriorParams, psi0: PosteriorParams,
                     iteration: int, kind: str = "posterior"):
    _write(path, _dump({"kind": kind, "config_hash": cfg.hash, "mode": cfg["run.mode"],
                        "heuristic": cfg.heuristic, "iteration": iteration,
                        "psi": psi_to_dict(psi), "psi0": psi_to_dict(psi0)}))


def read_checkpoint(path: Path, cfg: ExperimentConfig) -> dict:
    ck = json.loads(Path(path).read_text())
    if ck.get("config_hash") != cfg.hash:
        raise ConfigError("checkpoint", f"{path} was written under config hash {ck.get('config_hash')}, "
                                        f"the current config hashes to {cfg.hash}")
    ck["psi"] = psi_from_dict(ck["psi"])
    ck["psi0"] = psi_from_dict(ck["psi0"])
    return ck


# ------------------------------------------------------------- tasks

def build_pools(cfg: ExperimentConfig) -> dict:
    """role -> TaskPool for every role with a positive count."""
    root = RngStream(cfg["run.seed"])
    gen = cfg["tasks.generator"]
    counts = {"prior": cfg["tasks.prior_count"], "meta-train": cfg["tasks.train_count"],
              "meta-test": cfg["tasks.test_count"]}
    pools = {}
    if gen == "circle":
        for role in ROLES:
            if counts[role]:
                m, n = cfg.split_sizes(role)
                pools[role] = gen_circle_tasks(counts[role], m, n, role, root)
        return pools
    if gen == "embedded":
        store = load_embedded_dataset(cfg["tasks.path"])
        w = cfg["model.widths"][0]
        if store.d != w:
            raise ConfigError("model.widths", f"first width {w} differs from the store dimension {store.d}")
    else:
        store = make_cluster_store(cfg["tasks.d"], cfg["tasks.classes"], cfg["tasks.spread"],
                                   cfg["tasks.per_class"], root, cfg.way)
    parts = dict(zip(ROLES, store.split(cfg["tasks.split"])))
    for role in ROLES:
        if not counts[role]:
            continue
        part = parts[role]
        if part is None or len(part) < cfg.way:
            raise ConfigError("tasks.split", f"the {role} share holds {0 if part is None else len(part)} "
                                             f"classes, tasks need {cfg.way}")
        shots = cfg["tasks.shots"]
        q = cfg["tasks.test_queries"] if role == "meta-test" else cfg["tasks.queries"]
        if gen == "nme":
            pools[role] = make_nme_pool(part, cfg.way, counts[role], shots, q, root, role,
                                        cfg["tasks.permute_at_test"])
        else:
            pools[role] = make_kway_tasks(part, cfg.way, shots, q, counts[role], root, role)
    return pools


def pools_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "pools"


def write_pools(cfg: ExperimentConfig) -> list:
    pools = build_pools(cfg)
    directory = pools_dir(cfg)
    written = []
    for pool in pools.values():
        written.extend(save_pool(pool, directory))
    source = {"tasks_hash": cfg.tasks_hash(), "roles": sorted(pools),
              "counts": {role: pool.l for role, pool in sorted(pools.items())}}
    _write(directory / "source.json", _dump(source))
    return written


def read_pools(cfg: ExperimentConfig, roles, create: bool = False) -> dict:
    directory = pools_dir(cfg)
    source_path = directory / "source.json"
    if not source_path.exists():
        if not create:
            raise FileNotFoundError(f"{source_path} missing; run gen-tasks first")
        write_pools(cfg)
    source = json.loads(source_path.read_text())
    if source["tasks_hash"] != cfg.tasks_hash():
        raise ConfigError("tasks", f"pools in {directory} come from a different task configuration; "
                                   "rerun gen-tasks")
    return {role: load_pool(directory, role) for role in roles}


# ------------------------------------------------------------- verbs

def cmd_gen_tasks(cfg: ExperimentConfig) -> list:
    with run_lock(cfg.out):
        written = write_pools(cfg)
    for p in written:
        log.info("wrote %s", p)
    return written


def _train_pool(cfg: ExperimentConfig, pool: TaskPool) -> TaskPool:
    return pool if cfg["bound.validation"] else pool.without_validation()


def _prior(cfg: ExperimentConfig, pools: dict, spec: ModelSpec) -> PosteriorParams:
    rng = RngStream(cfg["run.seed"]).child("prior")
    init = init_params(spec, rng.child("init"), cfg["prior.init_scale"])
    if cfg["prior.iterations"] == 0:
        return PosteriorParams.isotropic(init, cfg["prior.variance"])
    pool = pools["prior"]
    budget = None if cfg.heuristic else cfg.budget(spec, pool.m, pool.n)
    records = []
    psi0 = train_prior(pool, spec, budget, cfg["prior.iterations"], cfg["prior.lr"], rng,
                       cfg["prior.variance"], init=init,
                       heuristic_lr=cfg.base_lr if cfg.heuristic else None,
                       batch_size=cfg["prior.batch_size"] or None, log=records)
    _write(cfg.out / "prior.log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return psi0


def cmd_train(cfg: ExperimentConfig, checkpoint: Path | None = None) -> Path:
    """Prior training (unless resuming) followed by meta-training.  Writes
    prior.json, train.log.jsonl, checkpoint.json and, with
    ``meta.checkpoint_every``, checkpoints/iter-XXXXXX.json."""
    out = cfg.out
    with run_lock(out):
        roles = ["meta-train"] + (["prior"] if cfg["prior.iterations"] > 0 else [])
        pools = read_pools(cfg, roles, create=True)
        spec = cfg.spec()
        pool = _train_pool(cfg, pools["meta-train"])
        log_path = out / "train.log.jsonl"
        if checkpoint is not None:
            ck = read_checkpoint(checkpoint, cfg)
            psi0, psi, start = ck["psi0"], ck["psi"], int(ck["iteration"])
            kept = []
            if log_path.exists():
                kept = [ln for ln in log_path.read_text().splitlines(keepends=True)
                        if json.loads(ln)["iteration"] < start]
            log.info("resuming from %s at iteration %d", checkpoint, start)
        else:
            psi0 = _prior(cfg, pools, spec)
            write_checkpoint(out / "prior.json", cfg, psi0, psi0, 0, kind="prior")
            psi, start, kept = psi0, 0, []
        _write(log_path, "".join(kept))
        tc = cfg.train_config()
        budget = None if cfg.heuristic else cfg.budget(spec, pool.m, pool.n)
        every = cfg["meta.checkpoint_every"] or tc.iterations
        with open(log_path, "a") as fh:
            def sink(rec):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            it = start
            while it < tc.iterations:
                stop = min(tc.iterations, (it // every + 1) * every) if every else tc.iterations
                count = []
                def counted(rec):
                    count.append(1)
                    sink(rec)
                psi = _train_segment(cfg, tc, pool, psi0, spec, budget, counted, psi, it, stop)
                it_done = it + len(count)
                fh.flush()
                if cfg["meta.checkpoint_every"] and it_done == stop:
                    write_checkpoint(out / "checkpoints" / f"iter-{stop:06d}.json", cfg, psi, psi0, stop)
                if it_done < stop:          # early stop inside the segment
                    break
                it = stop
        path = out / "checkpoint.json"
        write_checkpoint(path, cfg, psi, psi0, max(it, start))
    log.info("wrote %s", path)
    return path


def _train_segment(cfg, tc, pool, psi0, spec, budget, sink, psi, start, stop):
    mode = cfg["run.mode"]
    kw = dict(log=sink, psi=psi, start=start, stop_after=stop)
    if mode == "pacbus":
        return pacbus_train(tc, pool, psi0, spec, budget, **kw)
    if mode == "pacbus-minibatch":
        return pacbus_train_minibatch(tc, pool, psi0, spec, budget, **kw)
    return pacbus_h_train(tc, pool, psi0, spec, cfg.base_lr, **kw)


def _certify_budget(cfg: ExperimentConfig, spec: ModelSpec, psi: PosteriorParams, pool: TaskPool):
    n = pool.n
    if not cfg.heuristic:
        return cfg.budget(spec, pool.m, n)
    rng = RngStream(cfg["run.seed"]).child("certify-constants")
    constants = estimate_network_constants(spec, psi, cfg["meta.constant_samples"], rng)
    return StabilityBudget("sgd", 1, constants, pool.m, n, schedule_c=cfg.base_lr, convex=False)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_certify(cfg: ExperimentConfig, checkpoint: Path | None = None) -> BoundReport:
    out = cfg.out
    checkpoint = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    with run_lock(out):
        ck = read_checkpoint(checkpoint, cfg)
        pool = _train_pool(cfg, read_pools(cfg, ["meta-train"])["meta-train"])
        spec = cfg.spec()
        budget = _certify_budget(cfg, spec, ck["psi"], pool)
        report = certify(ck["psi"], ck["psi0"], pool, spec, budget, cfg["bound.N"], cfg["bound.delta"],
                         cfg["bound.delta_prime"], RngStream(cfg["run.seed"]).child("base"),
                         union_bound=cfg["bound.union_bound"], validation=cfg["bound.validation"],
                         heuristic=cfg.heuristic)
        BoundReport.from_dict(report.to_dict())       # sum invariant at the IO boundary
        doc = {"config_hash": cfg.hash, "mode": cfg["run.mode"], "checkpoint_sha256": _sha256(checkpoint),
               "checkpoint_iteration": ck["iteration"], "report": report.to_dict(),
               "interpretation": interpretation(report),
               "reference": [{"setting": s, "value": v} for s, v in REFERENCE_LINES]}
        _write(out / "report.json", _dump(doc))
        _write(out / "report.txt", report_text(report, cfg))
    log.info("bound %.6f (%s), wrote %s", report.total_bound, report.flag, out / "report.json")
    return report


def interpretation(report: BoundReport) -> list:
    lines = [f"with probability at least {report.confidence:.4g} over the training tasks and the "
             f"{report.N} posterior draws, the expected scaled loss on a new task is at most "
             f"{report.total_bound:.6f}"]
    if not report.guarantee_valid:
        lines = ["no guarantee: " + "; ".join(n for n in report.notes if "m - 1" not in n)]
    if report.total_bound >= 1:
        lines.append("the bound is vacuous (>= 1 on a loss bounded by 1)")
    return lines


def report_text(report: BoundReport, cfg: ExperimentConfig) -> str:
    rows = [("empirical term (sample-corrected)", report.empirical_term),
            ("PAC-Bayes regularizer", report.pac_bayes_regularizer),
            ("stability term", report.stability_term),
            ("total bound", report.total_bound),
            ("KL(posterior || prior)", report.kl_value),
            ("beta (base learner)", report.beta)]
    out = [f"pacbus certificate   config {cfg.hash[:16]}   mode {cfg['run.mode']}",
           f"status: {report.flag}", ""]
    out += [f"  {name:<36}{value:>14.6f}" for name, value in rows]
    out += ["", f"  tasks l={report.l}  m={report.m}  n={report.n}  draws N={report.N}",
            f"  delta={report.delta}  delta'={report.delta_prime}  confidence={report.confidence:.4g}  "
            f"({report.confidence_mode} sample correction)", ""]
    out += [f"note: {n}" for n in report.notes]
    out += [f"reading: {ln}" for ln in interpretation(report)]
    out += ["", "reference values at full scale (not reproduced by desk runs):"]
    out += [f"  {s:<40}{v}" for s, v in REFERENCE_LINES]
    return "\n".join(out) + "\n"


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: Path | None = None) -> dict:
    out = cfg.out
    checkpoint = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    with run_lock(out):
        ck = read_checkpoint(checkpoint, cfg)
        pool = read_pools(cfg, ["meta-test"])["meta-test"]
        spec = cfg.spec()
        budget = None if cfg.heuristic else cfg.budget(spec, pool.m, pool.n)
        summary = evaluate_posterior(ck["psi"], pool, spec, budget, cfg["eval.draws"],
                                     RngStream(cfg["run.seed"]).child("evaluate"),
                                     heuristic_lr=cfg.base_lr if cfg.heuristic else None)
        summary = {"config_hash": cfg.hash, "mode": cfg["run.mode"],
                   "loss": "raw cross-entropy" if cfg.heuristic else "scaled cross-entropy", **summary}
        report_path = out / "report.json"
        if report_path.exists():
            rep = json.loads(report_path.read_text())
            if rep.get("config_hash") == cfg.hash:
                bound = rep["report"]["total_bound"]
                summary["certified_bound"] = bound
                summary["loss_below_bound"] = bool(summary["loss_mean"] <= bound)
        _write(out / "evaluation.json", _dump(summary))
        lines = [f"meta-test evaluation   config {cfg.hash[:16]}   mode {cfg['run.mode']}",
                 f"  loss ({summary['loss']})  {summary['loss_mean']:.6f} +/- {summary['loss_std']:.6f}",
                 f"  accuracy  {summary['accuracy_mean']:.4f} +/- {summary['accuracy_std']:.4f}",
                 f"  over {summary['tasks']} tasks, {summary['draws']} posterior draws each"]
        if "certified_bound" in summary:
            lines.append(f"  certified bound {summary['certified_bound']:.6f}  "
                         f"loss below bound: {summary['loss_below_bound']}")
        _write(out / "evaluation.txt", "\n".join(lines) + "\n")
    log.info("meta-test loss %.6f, accuracy %.4f", summary["loss_mean"], summary["accuracy_mean"])
    return summary


REPLAY_FILES = ("prior.json", "prior.log.jsonl", "train.log.jsonl", "checkpoint.json",
                "report.json", "report.txt")


def cmd_replay(cfg: ExperimentConfig) -> dict:
    """Rerun train and certify in a scratch directory and compare every
    artifact with the recorded one byte for byte."""
    recorded = cfg.out
    if not (recorded / "checkpoint.json").exists():
        raise FileNotFoundError(f"{recorded / 'checkpoint.json'} missing; nothing to replay")
    scratch = Path(tempfile.mkdtemp(prefix="pacbus-replay-"))
    try:
        values = {sec: dict(kv) for sec, kv in cfg.values.items()}
        values["run"]["out"] = str(scratch)
        twin = ExperimentConfig(values, cfg.explicit)
        shutil.copytree(pools_dir(cfg), pools_dir(twin))
        cmd_train(twin)
        cmd_certify(twin)
        result = {}
        for name in REPLAY_FILES:
            a, b = recorded / name, scratch / name
            if not a.exists() and not b.exists():
                continue
            result[name] = a.exists() and b.exists() and a.read_bytes() == b.read_bytes()
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    for name, same in result.items():
        log.info("%-18s %s", name, "identical" if same else "DIFFERS")
    if not all(result.values()):
        raise ReplayMismatch(", ".join(n for n, s in result.items() if not s))
    return result


# --------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacbus", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {"gen-tasks": "generate prior, meta-train and meta-test pools",
             "train": "train the prior, then the posterior",
             "certify": "compute the certificate for a checkpoint",
             "evaluate": "meta-test loss and accuracy for a checkpoint",
             "replay": "rerun train and certify and compare outputs byte for byte"}
    for verb, text in helps.items():
        p = sub.add_parser(verb, help=text)
        p.add_argument("--config", required=True, type=Path, help="INI configuration file")
        p.add_argument("--seed", type=str, help="override run.seed")
        p.add_argument("--out", type=str, help="override run.out (output directory)")
        p.add_argument("--mode", type=str, help="override run.mode")
        if verb in ("train", "certify", "evaluate"):
            p.add_argument("--checkpoint", type=Path, help="checkpoint to resume from or to certify")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    overrides = {f"run.{k}": getattr(args, k) for k in ("seed", "out", "mode") if getattr(args, k) is not None}
    try:
        cfg = load_config(args.config, overrides)
        if args.verb == "gen-tasks":
            cmd_gen_tasks(cfg)
        elif args.verb == "train":
            cmd_train(cfg, args.checkpoint)
        elif args.verb == "certify":
            cmd_certify(cfg, args.checkpoint)
        elif args.verb == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        else:
            cmd_replay(cfg)
    except ReplayMismatch as e:
        log.error("replay differs: %s", e)
        return EXIT_MISMATCH
    except (TrainingDivergence, FloatingPointError) as e:
        log.error("numerical divergence: %s", e)
        return EXIT_DIVERGENCE
    except (StoreFormatError, ConfigSyntaxError) as e:
        log.error("%s", e)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError, KeyError) as e:
        log.error("io error: %s", e)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
