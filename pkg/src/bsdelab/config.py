"""Flat, typed run configuration with dotted keys.

Config files are TOML; nested tables are flattened to dotted keys
(``model.steps``), so ``[model]\\nsteps = 8`` and ``"model.steps" = 8`` are the
same thing.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

EXPERIMENTS = ("solve", "picard-diagnose", "linear-check", "compare", "apriori-sweep", "refine")


class ConfigError(ValueError):
    pass


_PROBLEM_KEYS = {
    "generator": str,
    "eta": str,          # constant | normal | call | digital
    "eta_value": float,
    "eta_scale": float,
    "D": str,            # zero | random | increasing | decreasing
    "D_scale": float,
}

SCHEMA: dict[str, type | tuple] = {
    "experiment": str,
    "seed": int,
    "run_id": str,
    "model.kind": str,   # canonical | uniform | random | chain
    "model.steps": int,
    "model.horizon": float,
    "model.dims": int,
    "model.branching": int,
    "model.min_prob": float,
    "model.scale": float,
    "model.channels": list,
    "solver.tol": float,
    "solver.beta": float,
    "solver.bound_target": float,
    "solver.max_iters": int,
    "compare.scenario": str,   # custom | single-default | random
    "compare.zeta": str,       # zero | psi | lambda
    "compare.psi": float,
    "compare.kappa": float,
    "sweep.trials": int,
    "refine.steps": list,
    "refine.rate": float,
    "apriori.eps": list,
    "linear.random": bool,
}
for _p in ("problem", "problem2"):
    for _k, _t in _PROBLEM_KEYS.items():
        SCHEMA[f"{_p}.{_k}"] = _t

# generator parameters are free-form: problem.params.<name>
WILDCARDS = ("problem.params.", "problem2.params.")

DEFAULTS = {
    "run_id": "run",
    "model.kind": "canonical",
    "model.steps": 6,
    "model.horizon": 1.0,
    "model.dims": 1,
    "model.branching": 2,
    "model.min_prob": 0.1,
    "model.scale": 1.0,
    "model.channels": [],
    "solver.tol": 1e-12,
    "solver.bound_target": 0.5,
    "solver.max_iters": 200,
    "compare.scenario": "custom",
    "compare.zeta": "zero",
    "compare.psi": 0.0,
    "compare.kappa": 0.0,
    "sweep.trials": 1,
    "refine.steps": [10, 20, 40, 80, 160],
    "refine.rate": 0.1,
    "apriori.eps": [1e-3, 1e-2, 1e-1],
    "linear.random": True,
}
for _p in ("problem", "problem2"):
    DEFAULTS.update({f"{_p}.generator": "zero", f"{_p}.eta": "constant", f"{_p}.eta_value": 1.0,
                     f"{_p}.eta_scale": 1.0, f"{_p}.D": "zero", f"{_p}.D_scale": 0.1})


def flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {type(value).__name__}")
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def experiment(self) -> str:
        return self.values["experiment"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def trials(self) -> int:
        return self.values["sweep.trials"]

    def params(self, which: str = "problem") -> dict:
        pre = f"{which}.params."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def snapshot(self) -> dict:
        return dict(sorted(self.values.items()))

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)


def validate(raw: dict, seed: int | None = None, trials: int | None = None) -> RunConfig:
    flat = flatten(raw)
    for key in flat:
        if key not in SCHEMA and not key.startswith(WILDCARDS):
            raise ConfigError(f"unknown key {key!r}")
    vals = dict(DEFAULTS)
    for key, v in flat.items():
        vals[key] = _coerce(key, v, SCHEMA[key]) if key in SCHEMA else v
    if seed is not None:
        vals["seed"] = int(seed)
    if trials is not None:
        vals["sweep.trials"] = int(trials)
    for req in ("experiment", "seed"):
        if req not in vals:
            raise ConfigError(f"missing required key {req!r}")
    if vals["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {vals['experiment']!r}")
    if not 0 <= vals["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if vals["sweep.trials"] < 1:
        raise ConfigError("sweep.trials must be >= 1")
    if vals["model.kind"] not in ("canonical", "uniform", "random", "chain"):
        raise ConfigError(f"unknown model.kind {vals['model.kind']!r}")
    if vals["model.steps"] < 1:
        raise ConfigError("model.steps must be >= 1")
    for ch in vals["model.channels"]:
        if not isinstance(ch, str) or ":" not in ch:
            raise ConfigError(f"channel spec {ch!r} must look like 'default:0.5'")
    return RunConfig(vals)


def load(path, seed: int | None = None, trials: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return validate(raw, seed, trials)
