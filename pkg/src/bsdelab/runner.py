"""Experiment orchestration: config -> trials -> CSV, detail files and manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import comparison as cmp
from . import sampling
from .calculus import weighted_norms
from .config import ConfigError, RunConfig
from .generators import make_generator
from .linear import weighted_martingale_check, linear_solution
from .models import MartingaleModel, block_model, build_brownian_proxy, null_model
from .solver import (BSDEProblem, apriori_check, contraction_bound, picard_iterate, solve_backward_exact,
                     stability_ladder)
from .tree import JumpChannel, random_tree, uniform_tree

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

COLUMNS = {
    "solve": ["run_id", "trial", "steps", "branching", "Y0", "residual", "s2_norm", "h2_norm", "l2m_norm"],
    "picard-diagnose": ["run_id", "trial", "beta", "bound", "iterations", "max_ratio", "monotone",
                        "converged", "picard_gap"],
    "linear-check": ["run_id", "trial", "Y0_closed", "Y0_exact", "max_gap", "gamma_gap", "martingale_residual",
                     "min_jump", "joint_discrepancy"],
    "compare": ["run_id", "trial", "verdict", "min_gap", "gap0", "D_nonincreasing", "eta_order",
                "jump_condition", "b_nonnegative", "linearization_residual", "strict"],
    "apriori-sweep": ["run_id", "trial", "L1", "beta", "C", "lhs", "J", "ratio", "ok"],
    "refine": ["run_id", "steps", "Y0", "exact", "error", "error_ratio", "bound", "ok"],
}


class TrialCrash(RuntimeError):
    def __init__(self, trial: int, seed_key, cause: BaseException):
        super().__init__(f"trial {trial} (seed {seed_key}) crashed: {cause!r}")
        self.trial = trial
        self.seed_key = seed_key


@dataclass
class TrialResult:
    rows: list
    checks: dict
    details: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    config: dict
    version: str
    wallclock_s: float
    verdicts: dict
    files: list
    hashes: dict
    passed: bool
    error: str | None = None

    def to_dict(self) -> dict:
        return {"config": self.config, "version": self.version, "wallclock_s": self.wallclock_s,
                "verdicts": self.verdicts, "files": self.files, "hashes": self.hashes,
                "passed": self.passed, "error": self.error}


# -- formatting -----------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) for c in columns])
    return buf.getvalue()


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# -- building blocks ------------------------------------------------------


def parse_channels(specs, steps) -> list[JumpChannel]:
    out = []
    for s in specs:
        kind, _, lam = s.partition(":")
        try:
            out.append(JumpChannel(kind.strip(), tuple([float(lam)] * steps)))
        except ValueError:
            raise ConfigError(f"bad channel intensity in {s!r}") from None
    return out


def build_model(cfg: RunConfig, rng: np.random.Generator) -> MartingaleModel:
    kind = cfg["model.kind"]
    steps, T = cfg["model.steps"], cfg["model.horizon"]
    if kind == "chain":
        return null_model(uniform_tree(steps, T, branching=1))
    if kind == "canonical":
        return block_model(steps, T, cfg["model.dims"], parse_channels(cfg["model.channels"], steps),
                           cfg["model.scale"])
    # plain trees carry a (branching - 1)-dimensional proxy; model.dims is ignored there
    b = cfg["model.branching"]
    if b < 2:
        raise ConfigError("model.branching must be >= 2 for uniform and random trees")
    space = uniform_tree(steps, T, b) if kind == "uniform" else random_tree(rng, steps, b, T, cfg["model.min_prob"])
    return build_brownian_proxy(space, b - 1, cfg["model.scale"])


def _state(model: MartingaleModel) -> np.ndarray:
    sp = model.space
    leaves = sp.slice(sp.steps)
    return 1.0 + model.M.values[leaves].sum(axis=1) if model.n else np.ones(leaves.stop - leaves.start)


def build_problem(cfg: RunConfig, model: MartingaleModel, rng: np.random.Generator,
                  which: str = "problem") -> BSDEProblem:
    name = cfg[f"{which}.generator"]
    if name == "random":
        g = sampling.random_generator(rng, model)
    else:
        try:
            g = make_generator(name, **cfg.params(which))
        except TypeError as exc:
            raise ConfigError(f"{which}.params: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    ek, ev = cfg[f"{which}.eta"], cfg[f"{which}.eta_value"]
    if ek == "constant":
        eta = ev
    elif ek == "normal":
        eta = ev + sampling.random_terminal(rng, model, cfg[f"{which}.eta_scale"])
    elif ek == "call":
        eta = np.maximum(_state(model) - ev, 0.0)
    elif ek == "digital":
        eta = (_state(model) > ev).astype(float)
    else:
        raise ConfigError(f"unknown {which}.eta {ek!r}")
    dk, ds = cfg[f"{which}.D"], cfg[f"{which}.D_scale"]
    if dk == "zero":
        D = None
    elif dk == "random":
        D = sampling.random_D(rng, model, ds)
    elif dk == "increasing":
        D = sampling.monotone_increase(rng, model, ds)
    elif dk == "decreasing":
        D = -sampling.monotone_increase(rng, model, ds)
    else:
        raise ConfigError(f"unknown {which}.D {dk!r}")
    return BSDEProblem(model, g, eta, D)


# -- experiments ----------------------------------------------------------


def trial_solve(cfg, rng, trial) -> TrialResult:
    model = build_model(cfg, rng)
    p = build_problem(cfg, model, rng)
    s = solve_backward_exact(p, tol=cfg["solver.tol"])
    sp = model.space
    row = {"run_id": cfg["run_id"], "trial": trial, "steps": sp.steps, "branching": int(sp.n_children.max()),
           "Y0": s.Y0, "residual": s.pathwise_residual, "s2_norm": s.norms.s2, "h2_norm": s.norms.h2,
           "l2m_norm": s.norms.l2m}
    return TrialResult([row], {"residual": s.pathwise_residual < 1e-10})


def picard_beta(cfg, L, C_Q) -> float:
    if "solver.beta" in cfg.values:
        return cfg["solver.beta"]
    if L <= 0:
        return 1.0
    return 1158.0 * L * L * (C_Q + 1.0) / cfg["solver.bound_target"]


def trial_picard(cfg, rng, trial) -> TrialResult:
    model = build_model(cfg, rng)
    p = build_problem(cfg, model, rng)
    L = p.generator.lipschitz(model) or 0.0
    beta = picard_beta(cfg, L, model.C_Q)
    sol, tr = picard_iterate(p, beta, max_iters=cfg["solver.max_iters"], tol=cfg["solver.tol"])
    exact = solve_backward_exact(p)
    n = weighted_norms(sol.Y.values - exact.Y.values, sol.Z.values - exact.Z.values, model, 0.0)
    gap = float(np.sqrt(n.h2) + np.sqrt(n.l2m))
    bound = contraction_bound(beta, L, model.C_Q) if L > 0 else 0.0
    row = {"run_id": cfg["run_id"], "trial": trial, "beta": beta, "bound": bound, "iterations": tr.iterations,
           "max_ratio": tr.max_ratio, "monotone": tr.monotone, "converged": tr.converged, "picard_gap": gap}
    trace_rows = []
    for i, (db, d0) in enumerate(zip(tr.deltas_beta, tr.deltas_0)):
        trace_rows.append({"iteration": i + 1, "delta_beta": db, "delta_0": d0})
    detail = csv_text(["iteration", "delta_beta", "delta_0"], trace_rows)
    checks = {"converged": tr.converged, "picard_gap": gap <= 1e-8}
    if bound < 1.0:
        checks["bound_respected"] = tr.bound_respected
        checks["monotone"] = tr.monotone
    return TrialResult([row], checks, {f"picard_trace_{trial}.csv": detail})


def trial_linear(cfg, rng, trial) -> TrialResult:
    model = build_model(cfg, rng)
    p, coeffs = sampling.random_linear_problem(rng, model)
    exact = solve_backward_exact(p)
    ls = linear_solution(model, coeffs, p.eta, p.D)
    if ls.Y is None:
        gap, gg, lem = np.inf, np.inf, np.inf
    else:
        gap = float(np.abs(ls.Y.values - exact.Y.values).max())
        gg = ls.path_gap
        lem = weighted_martingale_check(ls.bundle, exact.Y.values).residual
    row = {"run_id": cfg["run_id"], "trial": trial, "Y0_closed": ls.Y0, "Y0_exact": exact.Y0, "max_gap": gap,
           "gamma_gap": gg, "martingale_residual": lem, "min_jump": ls.bundle.min_jump,
           "joint_discrepancy": ls.bundle.joint_discrepancy_l1}
    return TrialResult([row], {"closed_form": gap <= 1e-9, "martingale_residual": lem < 1e-10})


def _compare_pair(cfg, rng):
    scen = cfg["compare.scenario"]
    if scen == "single-default":
        ch = parse_channels(cfg["model.channels"], 1)
        lam = ch[0].intensity[0] if ch else 0.5
        return sampling.single_default_pair(cfg["compare.psi"], cfg["model.steps"], lam,
                                      seed=int(rng.integers(2**62)))
    if scen == "random":
        return sampling.comparison_pair(rng)
    if scen != "custom":
        raise ConfigError(f"unknown compare.scenario {scen!r}")
    model = build_model(cfg, rng)
    p1 = build_problem(cfg, model, rng, "problem")
    p2 = build_problem(cfg, model, rng, "problem2")
    z = cfg["compare.zeta"]
    if z == "lambda":
        zeta = sampling.lambda_zeta(model, cfg["compare.kappa"], cfg["compare.psi"])
    else:
        try:
            zeta = cmp.make_zeta(model, z, cfg["compare.psi"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return sampling.ComparisonPair(p1, p2, zeta, cfg["compare.psi"])


def trial_compare(cfg, rng, trial) -> TrialResult:
    pair = _compare_pair(cfg, rng)
    rep = cmp.verify_strict_comparison(pair.p1, pair.p2, pair.zeta)
    h = rep.hypotheses
    row = {"run_id": cfg["run_id"], "trial": trial, "verdict": rep.verdict, "min_gap": rep.min_gap,
           "gap0": rep.gap0, "D_nonincreasing": h["D_nonincreasing"].passed, "eta_order": h["eta_order"].passed,
           "jump_condition": h["jump_condition"].passed, "b_nonnegative": h["b_nonnegative"].passed,
           "linearization_residual": rep.diagnostics["linearization_residual"],
           "strict": rep.strict_case.get("status", "")}
    details = {}
    if trial == 0 or rep.verdict == "violation":
        details[f"comparison_{trial}.json"] = rep.to_json() + "\n"
    checks = {"comparison": rep.verdict != "violation",
              "linearization": rep.diagnostics["linearization_residual"] < 1e-10}
    return TrialResult([row], checks, details)


def trial_apriori(cfg, rng, trial) -> TrialResult:
    model = build_model(cfg, rng)
    p1 = build_problem(cfg, model, rng, "problem")
    p2 = build_problem(cfg, model, rng, "problem2")
    r = apriori_check(p1, p2)
    row = {"run_id": cfg["run_id"], "trial": trial, "L1": r.L1, "beta": r.beta, "C": r.C, "lhs": r.lhs,
           "J": r.J, "ratio": r.ratio, "ok": r.ok}
    checks = {"apriori": r.ok}
    details = {}
    if trial == 0:
        ladder = stability_ladder(p1, cfg["apriori.eps"])
        rows = [{"eps": s.eps, "gap": s.gap, "apriori_bound": s.apriori_bound, "discrete_bound": s.discrete_bound,
                 "continuum_bound": s.continuum_bound, "ok": s.gap <= s.apriori_bound} for s in ladder]
        details["stability.csv"] = csv_text(list(rows[0]), rows)
        checks["stability"] = all(x["ok"] for x in rows)
    return TrialResult([row], checks, details)


def run_refine(cfg) -> TrialResult:
    rate = cfg["refine.rate"]
    exact = float(np.exp(-rate * cfg["model.horizon"]))
    rows, prev = [], None
    for n in cfg["refine.steps"]:
        p = sampling.discount_chain(int(n), rate, cfg["model.horizon"])
        y0 = solve_backward_exact(p).Y0
        err = abs(y0 - exact)
        rows.append({"run_id": cfg["run_id"], "steps": int(n), "Y0": y0, "exact": exact, "error": err,
                     "error_ratio": (prev / err) if prev else float("nan"), "bound": 2.0 / n,
                     "ok": err <= 2.0 / n})
        prev = err
    return TrialResult(rows, {"refine": all(r["ok"] for r in rows)})


TRIALS = {"solve": trial_solve, "picard-diagnose": trial_picard, "linear-check": trial_linear,
          "compare": trial_compare, "apriori-sweep": trial_apriori}


def threads() -> int:
    try:
        return max(1, int(os.environ.get("BSDE_LAB_THREADS", "1")))
    except ValueError:
        return 1


def sweep(cfg: RunConfig, n_trials: int | None = None) -> TrialResult:
    """Run ``n_trials`` trials with seeds spawned from the master seed.

    Trial ``i`` always sees the same stream regardless of ``n_trials``, so a
    single-trial run equals the first trial of a sweep.
    """
    if cfg.experiment == "refine":
        return run_refine(cfg)
    n = cfg.trials if n_trials is None else n_trials
    if n < 1:
        raise ConfigError("n_trials must be >= 1")
    fn = TRIALS[cfg.experiment]
    seqs = np.random.SeedSequence(cfg.seed).spawn(n)

    def one(i):
        try:
            return fn(cfg, np.random.default_rng(seqs[i]), i)
        except ConfigError:
            raise
        except Exception as exc:
            raise TrialCrash(i, (cfg.seed, i), exc) from exc

    with ThreadPoolExecutor(max_workers=min(threads(), n)) as ex:
        results = list(ex.map(one, range(n)))
    rows, details = [], {}
    checks: dict = {}
    for r in results:
        rows.extend(r.rows)
        details.update(r.details)
        for k, v in r.checks.items():
            checks.setdefault(k, [0, 0])
            checks[k][0] += int(bool(v))
            checks[k][1] += 1
    agg = {k: v[0] == v[1] for k, v in checks.items()}
    out = TrialResult(rows, agg, details)
    out.counts = {k: {"passed": v[0], "total": v[1]} for k, v in checks.items()}  # type: ignore[attr-defined]
    return out


def summarize(experiment: str, rows) -> dict:
    """Aggregate worst margins for the manifest."""
    if not rows:
        return {}
    out = {"rows": len(rows)}
    if experiment == "compare":
        out["violations"] = sum(r["verdict"] == "violation" for r in rows)
        out["refused"] = sum(r["verdict"] == "refused" for r in rows)
        out["min_gap"] = min(r["min_gap"] for r in rows)
    elif experiment == "apriori-sweep":
        out["violations"] = sum(not r["ok"] for r in rows)
        out["max_ratio"] = max(r["ratio"] for r in rows)
        out["C"] = rows[0]["C"]
    elif experiment == "solve":
        out["max_residual"] = max(r["residual"] for r in rows)
    elif experiment == "picard-diagnose":
        out["max_picard_gap"] = max(r["picard_gap"] for r in rows)
    elif experiment == "linear-check":
        out["max_gap"] = max(r["max_gap"] for r in rows)
    return out


def run(cfg: RunConfig, out_dir) -> tuple[RunManifest, int]:
    """Execute, write artifacts into ``out_dir`` and return the manifest and exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    error = None
    files: dict[str, str] = {}
    verdicts: dict = {}
    try:
        res = sweep(cfg)
        files["results.csv"] = csv_text(COLUMNS[cfg.experiment], res.rows)
        files.update(res.details)
        verdicts = dict(res.checks)
        verdicts["summary"] = summarize(cfg.experiment, res.rows)
        if hasattr(res, "counts"):
            verdicts["counts"] = res.counts
        passed = all(v for k, v in res.checks.items())
        code = EXIT_OK if passed else EXIT_FAIL
    except TrialCrash as exc:
        error = str(exc)
        passed, code = False, EXIT_FAIL
    for name, text in files.items():
        (out / name).write_text(text)
    man = RunManifest(cfg.snapshot(), __version__, round(time.perf_counter() - t0, 6), verdicts,
                      sorted(files), {k: sha256(v) for k, v in sorted(files.items())}, passed, error)
    (out / "manifest.json").write_text(json.dumps(man.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n")
    return man, code


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(type(v))


def report(out_dir) -> tuple[str, int]:
    """Re-read a run directory, re-hash its files and summarize the verdicts."""
    out = Path(out_dir)
    try:
        man = json.loads((out / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        return f"cannot read manifest: {exc}", EXIT_CONFIG
    lines = [f"experiment: {man['config'].get('experiment')}  seed: {man['config'].get('seed')}  "
             f"version: {man['version']}"]
    intact = True
    for name in man["files"]:
        try:
            ok = sha256((out / name).read_text()) == man["hashes"][name]
        except OSError:
            ok = False
        intact &= ok
        lines.append(f"  {name}: {'hash ok' if ok else 'HASH MISMATCH'}")
    for k, v in man["verdicts"].items():
        if isinstance(v, bool):
            lines.append(f"  check {k}: {'pass' if v else 'FAIL'}")
    if man["verdicts"].get("summary"):
        lines.append("  summary: " + json.dumps(man["verdicts"]["summary"], sort_keys=True))
    if man.get("error"):
        lines.append(f"  error: {man['error']}")
    passed = man["passed"] and intact
    lines.append("overall: " + ("pass" if passed else "FAIL"))
    return "\n".join(lines), EXIT_OK if passed else EXIT_FAIL
