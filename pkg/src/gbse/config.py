"""Experiment configuration: strict TOML parsing into model-level objects.

The file is a single TOML document with [model], [window], optional
[attack], [detector], [run] and optional [sweep] tables.  Unknown keys are
rejected so that typos in experiment definitions fail loudly.  Matrices are
nested row-major arrays; per-sensor quantities (C, R) are lists of
matrices, one per sensor.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .model import AttackSpec, SystemModel


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


_SCHEMA = {
    "model": {"n", "m", "M", "A", "C", "Q", "R", "P0", "x0_mean"},
    "window": {"N"},
    "attack": {"kind", "targets", "R_tilde", "mu", "t_start", "mu_max"},
    "detector": {"alpha", "tau", "eps", "delta_ref", "alpha_threshold", "solver"},
    "run": {"trials", "master_seed", "workers", "output", "timing", "bench_reps"},
    "sweep": {"parameter", "values"},
}

_SWEEPABLE_PREFIXES = ("attack.", "detector.")


@dataclass
class ExperimentConfig:
    """Validated experiment description."""

    model: SystemModel
    N: int
    attack: AttackSpec
    alpha: float = 6.0
    tau: int = 3
    eps: float | None = None
    delta_ref: float = 0.5
    alpha_threshold: float = 6.0
    solver: str = "auto"
    trials: int = 1
    master_seed: int = 0
    workers: int = 1
    output: str | None = None
    timing: bool = False
    bench_reps: int = 5
    sweep_parameter: str | None = None
    sweep_values: list[Any] = field(default_factory=list)
    raw: dict = field(default_factory=dict, repr=False)


def _reject_unknown(raw: dict) -> None:
    for table, keys in raw.items():
        if table not in _SCHEMA:
            raise ConfigError(f"unknown config table [{table}]")
        if not isinstance(keys, dict):
            raise ConfigError(f"[{table}] must be a table")
        extra = set(keys) - _SCHEMA[table]
        if extra:
            raise ConfigError(f"unknown key(s) in [{table}]: {', '.join(sorted(extra))}")


def _need(raw: dict, table: str, key: str):
    if table not in raw or key not in raw[table]:
        raise ConfigError(f"missing required key {table}.{key}")
    return raw[table][key]


def _build_model(raw: dict) -> SystemModel:
    mt = raw.get("model")
    if mt is None:
        raise ConfigError("missing required table [model]")
    try:
        model = SystemModel(
            A=_need(raw, "model", "A"),
            C=_need(raw, "model", "C"),
            Q=_need(raw, "model", "Q"),
            R=_need(raw, "model", "R"),
            P0=_need(raw, "model", "P0"),
            x0_mean=mt.get("x0_mean"),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [model]: {exc}") from exc
    for key, got in (("n", model.n), ("m", model.m), ("M", model.M)):
        if key in mt and int(mt[key]) != got:
            raise ConfigError(f"model.{key} = {mt[key]} but matrices imply {got}")
    return model


def _build_attack(raw: dict) -> AttackSpec:
    at = raw.get("attack")
    if not at:
        return AttackSpec(kind="none")
    kw: dict[str, Any] = {"kind": at.get("kind", "none")}
    if "targets" in at:
        kw["targets"] = at["targets"]
    for key in ("R_tilde", "mu", "mu_max", "t_start"):
        if key in at:
            kw[key] = at[key]
    try:
        return AttackSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [attack]: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping into an ExperimentConfig."""
    _reject_unknown(raw)
    model = _build_model(raw)
    N = int(_need(raw, "window", "N"))
    if N < 0:
        raise ConfigError("window.N must be >= 0")
    attack = _build_attack(raw)
    try:
        attack.validate_for(N, model.M, model.m)
    except ValueError as exc:
        raise ConfigError(f"invalid [attack]: {exc}") from exc

    det = raw.get("detector", {})
    run = raw.get("run", {})
    sweep = raw.get("sweep", {})
    if sweep:
        param = sweep.get("parameter")
        values = sweep.get("values")
        if not param or not isinstance(values, list) or not values:
            raise ConfigError("[sweep] requires 'parameter' and a non-empty 'values' list")
        if not str(param).startswith(_SWEEPABLE_PREFIXES):
            raise ConfigError(
                f"sweep.parameter must start with one of {_SWEEPABLE_PREFIXES}, got {param!r}"
            )
        table, key = str(param).split(".", 1)
        if key not in _SCHEMA[table]:
            raise ConfigError(f"sweep.parameter targets unknown key {param!r}")

    solver = det.get("solver", "auto")
    if solver not in ("direct", "iterative", "auto"):
        raise ConfigError(f"detector.solver must be direct|iterative|auto, got {solver!r}")

    cfg = ExperimentConfig(
        model=model,
        N=N,
        attack=attack,
        alpha=float(det.get("alpha", 6.0)),
        tau=int(det.get("tau", 3)),
        eps=float(det["eps"]) if "eps" in det else None,
        delta_ref=float(det.get("delta_ref", 0.5)),
        alpha_threshold=float(det.get("alpha_threshold", 6.0)),
        solver=solver,
        trials=int(run.get("trials", 1)),
        master_seed=int(run.get("master_seed", 0)),
        workers=int(run.get("workers", 1)),
        output=run.get("output"),
        timing=bool(run.get("timing", False)),
        bench_reps=int(run.get("bench_reps", 5)),
        sweep_parameter=sweep.get("parameter"),
        sweep_values=list(sweep.get("values", [])),
        raw=copy.deepcopy(raw),
    )
    if cfg.trials < 0:
        raise ConfigError("run.trials must be >= 0")
    if cfg.workers < 1:
        raise ConfigError("run.workers must be >= 1")
    if not cfg.alpha > 0:
        raise ConfigError("detector.alpha must be > 0")
    if cfg.tau < 0:
        raise ConfigError("detector.tau must be >= 0")
    if not 0 < cfg.bench_reps:
        raise ConfigError("run.bench_reps must be >= 1")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    return parse_config(raw)


def with_override(cfg: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    """Config with one dotted-path value replaced (used by sweeps)."""
    raw = copy.deepcopy(cfg.raw)
    table, key = parameter.split(".", 1)
    raw.setdefault(table, {})[key] = value
    raw.pop("sweep", None)
    out = parse_config(raw)
    out.trials = cfg.trials
    out.master_seed = cfg.master_seed
    out.workers = cfg.workers
    out.output = cfg.output
    out.timing = cfg.timing
    out.bench_reps = cfg.bench_reps
    return out
