"""Comparison harness: linearization, hypotheses and verdicts.

Given two problems on one block model, the difference ``y = Y^1 - Y^2``
solves a linear BSDE with coefficients ``(a, b, c, zeta)`` built from
difference quotients.  On the tree this identity is exact, so the comparison
statements become assertions about node values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .generators import GAP_GUARD, Linear
from .linear import LinearCoefficients, LinearError, build_exponential_bundle, linear_solution, supermartingale_check
from .solver import BSDEProblem, Solution, pathwise_residual, solve_backward_exact

GAP_TOL = 1e-10
STRICT_TOL = 1e-12
B_TOL = 1e-12


class ComparisonError(ValueError):
    pass


# -- zeta strategies ------------------------------------------------------


def zeta_zero(model) -> np.ndarray:
    return np.zeros((model.space.n_nodes, model.n_jump))


def zeta_psi(model, psi) -> np.ndarray:
    """``zeta = psi m^d 1``: the tree form of ``psi sqrt(lambda)``.

    With this choice ``dMhat^d = psi * sum_j dM^d_j`` on every step, so
    ``psi > -1`` keeps the jump part above ``-1`` for compensated defaults.
    """
    md = model.md
    psi = np.broadcast_to(np.asarray(psi, dtype=float), (model.space.n_nodes,))
    return psi[:, None] * md.sum(axis=2)


def make_zeta(model, strategy="zero", psi=0.0) -> np.ndarray:
    if isinstance(strategy, np.ndarray):
        return strategy
    if strategy == "zero":
        return zeta_zero(model)
    if strategy == "psi":
        return zeta_psi(model, psi)
    raise ValueError(f"unknown zeta strategy {strategy!r}")


# -- linearization --------------------------------------------------------


@dataclass(frozen=True)
class LinearizationBundle:
    a: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    zeta: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    max_a: float = 0.0
    max_c: float = 0.0

    def coefficients(self) -> LinearCoefficients:
        return LinearCoefficients(self.a, self.b, self.c, self.zeta)


def _quotient(num, den):
    ok = np.abs(den) >= GAP_GUARD
    out = np.zeros_like(num)
    out[ok] = num[ok] / den[ok]
    return out


def linearize(model, g1, g2, sol1: Solution, sol2: Solution, zeta) -> LinearizationBundle:
    """Difference-quotient coefficients of the comparison proof.

    ``c`` telescopes coordinate by coordinate in ``w = m^c z^c`` with the jump
    coordinates held at ``Z^{1,d}``; ``g^1(t, y, (m^c)^{-1} w, Z^{1,d})``
    plays the role of the composed generator.
    """
    sp = model.space
    if sol1.Y.space is not sp or sol2.Y.space is not sp:
        raise ComparisonError("solutions live on a different tree")
    nt = sp.nonterminal
    G = nt.size
    k = model.k
    Y1, Y2 = sol1.Y.values[nt], sol2.Y.values[nt]
    Z1, Z2 = sol1.Z.values[nt], sol2.Z.values[nt]
    a = _quotient(g1(model, nt, Y1, Z1) - g1(model, nt, Y2, Z1), Y1 - Y2)

    c = np.zeros((G, k))
    if k:
        mc = model.mc[nt]
        if np.any(np.linalg.matrix_rank(mc) < k):
            raise ComparisonError("m^c is singular where the linearization needs its inverse")
        W1 = np.einsum("gij,gj->gi", mc, Z1[:, :k])
        W2 = np.einsum("gij,gj->gi", mc, Z2[:, :k])

        def ghat(w):
            z = Z1.copy()
            z[:, :k] = np.linalg.solve(mc, w[..., None])[..., 0]
            return g1(model, nt, Y2, z)

        for j in range(k):
            upper = np.concatenate([W2[:, :j], W1[:, j:]], axis=1)
            lower = np.concatenate([W2[:, :j + 1], W1[:, j + 1:]], axis=1)
            c[:, j] = _quotient(ghat(upper) - ghat(lower), W1[:, j] - W2[:, j])

    zmix = Z1.copy()
    zmix[:, :k] = Z2[:, :k]
    delta = g1(model, nt, Y2, zmix) - g2(model, nt, Y2, Z2)
    zeta = np.asarray(zeta, dtype=float)[nt]
    md = model.md[nt]
    zd = Z1[:, k:] - Z2[:, k:]
    b = delta - np.einsum("gi,gij,gj->g", zeta, md, zd)

    def full(v):
        out = np.zeros((sp.n_nodes,) + v.shape[1:])
        out[nt] = v
        return out

    return LinearizationBundle(full(a), full(c), full(delta), full(zeta), full(b),
                               float(np.abs(a).max(initial=0.0)),
                               float(np.linalg.norm(c, axis=1).max(initial=0.0)))


# -- reports --------------------------------------------------------------


@dataclass
class Hypothesis:
    passed: bool
    witness: int | None = None
    value: float = 0.0
    note: str = ""

    def to_dict(self):
        return {"passed": self.passed, "witness": self.witness, "value": self.value, "note": self.note}


@dataclass
class ComparisonReport:
    hypotheses: dict
    min_gap: float
    gap0: float
    verdict: str = "unchecked"
    strict_case: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    counterexample: dict | None = None
    # (s1, s2, linearization, bundle, D1 - D2) kept for the verifiers; not serialized
    context: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def hypotheses_ok(self) -> bool:
        return all(h.passed for h in self.hypotheses.values())

    def to_dict(self) -> dict:
        return {"hypotheses": {k: h.to_dict() for k, h in self.hypotheses.items()},
                "min_gap": self.min_gap, "gap0": self.gap0, "verdict": self.verdict,
                "strict_case": self.strict_case, "diagnostics": self.diagnostics,
                "counterexample": self.counterexample}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=float)


def _solve_pair(p1, p2, s1, s2):
    if p1.model is not p2.model:
        raise ComparisonError("problems must share one model")
    s1 = solve_backward_exact(p1) if s1 is None else s1
    s2 = solve_backward_exact(p2) if s2 is None else s2
    return s1, s2


def check_hypotheses(p1: BSDEProblem, p2: BSDEProblem, zeta="zero", psi=0.0,
                     s1: Solution | None = None, s2: Solution | None = None) -> ComparisonReport:
    """Evaluate items (i)-(iv) node by node; failures become witnesses, not errors."""
    model = p1.model
    sp = model.space
    s1, s2 = _solve_pair(p1, p2, s1, s2)
    zeta = make_zeta(model, zeta, psi)
    lin = linearize(model, p1.generator, p2.generator, s1, s2, zeta)
    hyp = {}
    hyp["g_predictable"] = Hypothesis(True, note="left-endpoint evaluation makes every step generator predictable")

    D = p1.D - p2.D
    dD = np.zeros(sp.n_nodes)
    dD[1:] = D[1:] - D[sp.parent[1:]]
    i = int(np.argmax(dD))
    hyp["D_nonincreasing"] = Hypothesis(bool(dD[i] <= 0.0), i if dD[i] > 0 else None, float(dD[i]))

    de = p1.eta - p2.eta
    j = int(np.argmin(de))
    leaf = int(sp.slice_start[sp.steps] + j)
    hyp["eta_order"] = Hypothesis(bool(de[j] >= 0.0), leaf if de[j] < 0 else None, float(de[j]))

    try:
        bundle = build_exponential_bundle(model, lin.coefficients(), D)
    except LinearError as exc:
        bundle = None
        hyp["jump_condition"] = Hypothesis(False, int(np.argmax(lin.a * model.dQ.values)), -np.inf, note=str(exc))
    if bundle is not None:
        dMhat = np.zeros(sp.n_nodes)
        dMhat[1:] = bundle.Mhat.values[1:] - bundle.Mhat.values[sp.parent[1:]]
        w = int(np.argmin(dMhat[1:])) + 1 if sp.n_nodes > 1 else 0
        jump_ok = bundle.min_jump > -1.0 and bundle.min_discount > 0.0
        hyp["jump_condition"] = Hypothesis(bool(jump_ok), None if jump_ok else w, bundle.min_jump,
                                           note=f"jump-block minimum {bundle.min_jump_d:.6g}; "
                                                f"min 1 - a dQ {bundle.min_discount:.6g}")

    nt = sp.nonterminal
    dq = model.dQ.values[nt]
    bvals = np.where(dq > 0, lin.b[nt], np.inf)
    m = int(np.argmin(bvals)) if nt.size else 0
    bmin = float(bvals[m]) if nt.size else 0.0
    hyp["b_nonnegative"] = Hypothesis(bool(bmin >= -B_TOL), int(nt[m]) if bmin < -B_TOL else None, bmin)

    gap = s1.Y.values - s2.Y.values
    rep = ComparisonReport(hyp, float(gap.min()), float(gap[0]))
    rep.diagnostics = {"max_a": lin.max_a, "max_c": lin.max_c}
    if bundle is not None:
        rep.diagnostics.update(min_jump=bundle.min_jump, min_jump_d=bundle.min_jump_d)
    rep.context = (s1, s2, lin, bundle, D)
    return rep


def linearization_residual(p1, p2, s1, s2, lin: LinearizationBundle) -> float:
    """Pathwise defect of the linear BSDE solved by ``(Y^1 - Y^2, Z^1 - Z^2)``."""
    model = p1.model
    diff = BSDEProblem(model, Linear(lin.a, lin.b, lin.c, lin.zeta), p1.eta - p2.eta, p1.D - p2.D)
    path, _ = pathwise_residual(diff, s1.Y.values - s2.Y.values, s1.Z.values - s2.Z.values)
    return path


def counterexample(p1, p2, s1, s2, zeta) -> dict:
    sp = p1.space
    return {"tree": sp.to_dict(), "eta1": p1.eta.tolist(), "eta2": p2.eta.tolist(),
            "D1": p1.D.tolist(), "D2": p2.D.tolist(),
            "g1": p1.generator.describe(), "g2": p2.generator.describe(),
            "zeta": np.asarray(zeta).tolist(), "Y1": s1.Y.values.tolist(), "Y2": s2.Y.values.tolist()}


def verify_comparison(p1: BSDEProblem, p2: BSDEProblem, zeta="zero", psi=0.0,
                      s1=None, s2=None) -> ComparisonReport:
    """Assert ``Y^1 >= Y^2`` (to ``-1e-10``) when every hypothesis holds.

    Verdicts: ``pass``, ``violation`` (with a serialized counterexample) or
    ``refused`` when a hypothesis fails; ``min_gap`` is reported regardless.
    """
    rep = check_hypotheses(p1, p2, zeta, psi, s1, s2)
    s1, s2, lin, bundle, D = rep.context
    rep.diagnostics["linearization_residual"] = linearization_residual(p1, p2, s1, s2, lin)
    if not rep.hypotheses_ok:
        rep.verdict = "refused"
        return rep
    # closed form of the difference and the supermartingale property of A
    closed = linear_solution(p1.model, lin.coefficients(), p1.eta - p2.eta, D, bundle)
    if closed.Y is not None:
        rep.diagnostics["closed_form_gap"] = float(np.abs(closed.Y.values - (s1.Y.values - s2.Y.values)).max())
    rep.diagnostics["supermartingale"] = supermartingale_check(bundle)
    if rep.min_gap >= -GAP_TOL:
        rep.verdict = "pass"
    else:
        rep.verdict = "violation"
        rep.counterexample = counterexample(p1, p2, s1, s2, lin.zeta)
    return rep


def verify_strict_comparison(p1: BSDEProblem, p2: BSDEProblem, zeta="zero", psi=0.0,
                             s1=None, s2=None) -> ComparisonReport:
    """If ``Y^1_0 = Y^2_0`` (to 1e-12) assert equality at every node and leaf."""
    rep = verify_comparison(p1, p2, zeta, psi, s1, s2)
    s1, s2 = rep.context[0], rep.context[1]
    if rep.verdict != "pass":
        rep.strict_case = {"status": "refused"}
        return rep
    if abs(rep.gap0) >= STRICT_TOL:
        rep.strict_case = {"status": "excluded", "gap0": rep.gap0}
        return rep
    node_gap = float(np.abs(s1.Y.values - s2.Y.values).max())
    leaf_gap = float(np.abs(p1.eta - p2.eta).max())
    ok = node_gap <= GAP_TOL and leaf_gap <= GAP_TOL
    rep.strict_case = {"status": "equal" if ok else "violation", "node_gap": node_gap, "leaf_gap": leaf_gap}
    if not ok:
        rep.verdict = "violation"
        rep.counterexample = counterexample(p1, p2, s1, s2, rep.context[2].zeta)
    return rep


# -- reduced conditions ---------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    passed: bool
    min_margin: float
    implies_b: bool
    worst_node: int
    base_margin: float = 0.0
    split_margin: float = 0.0


def continuous_case_condition(p1: BSDEProblem, p2: BSDEProblem, s1=None, s2=None) -> ConditionReport:
    """``g^1(Y^2, Z^2) >= g^2(Y^2, Z^2)``; on a continuous-only model this is ``b >= 0``."""
    model = p1.model
    if model.k != model.n:
        raise ComparisonError("continuous-case condition needs a model without jump block")
    s1, s2 = _solve_pair(p1, p2, s1, s2)
    return split_condition(p1, p2, zeta_zero(model), s1, s2)


def split_condition(p1: BSDEProblem, p2: BSDEProblem, zeta, s1=None, s2=None) -> ConditionReport:
    """Sufficient split: ``g^1 >= g^2`` at ``(Y^2, Z^2)`` and ``mu - zeta* m^d z^d >= 0``.

    ``mu`` is the change of ``g^1`` when the jump coordinates move from
    ``Z^{2,d}`` to ``Z^{1,d}``.  ``implies_b`` confirms that wherever both
    parts hold, the linearization's ``b`` is nonnegative.
    """
    model = p1.model
    sp = model.space
    s1, s2 = _solve_pair(p1, p2, s1, s2)
    nt = sp.nonterminal
    k = model.k
    Y2, Z1, Z2 = s2.Y.values[nt], s1.Z.values[nt], s2.Z.values[nt]
    base = p1.generator(model, nt, Y2, Z2) - p2.generator(model, nt, Y2, Z2)
    zmix = Z1.copy()
    zmix[:, :k] = Z2[:, :k]
    mu = p1.generator(model, nt, Y2, zmix) - p1.generator(model, nt, Y2, Z2)
    z = np.asarray(zeta, dtype=float)[nt]
    part = mu - np.einsum("gi,gij,gj->g", z, model.md[nt], Z1[:, k:] - Z2[:, k:])
    lin = linearize(model, p1.generator, p2.generator, s1, s2, zeta)
    dq = model.dQ.values[nt]
    active = dq > 0
    margin = np.where(active, np.minimum(base, part), np.inf)
    both = active & (base >= -B_TOL) & (part >= -B_TOL)
    implies = bool(np.all(lin.b[nt][both] >= -2 * B_TOL))
    w = int(np.argmin(margin)) if nt.size else 0
    mm = float(margin[w]) if nt.size else 0.0
    bm = float(base[active].min(initial=np.inf)) if nt.size else 0.0
    sm = float(part[active].min(initial=np.inf)) if nt.size else 0.0
    return ConditionReport(bool(mm >= -B_TOL), mm, implies, int(nt[w]) if nt.size else 0, bm, sm)


def single_default_condition(p1: BSDEProblem, p2: BSDEProblem, psi: float, s1=None, s2=None) -> dict:
    """Jump-slope form of the split for one default channel.

    Checks ``g^1(Y^2, Z^{2,c}, Z^{1,d}) - g^1(Y^2, Z^2) >= psi (m^d)^2 (Z^{1,d} - Z^{2,d})``
    and that ``b`` equals ``[g^1 - g^2](Y^2, Z^2)`` plus that margin.
    """
    model = p1.model
    if model.n_jump != 1:
        raise ComparisonError("the single-default form needs exactly one jump component")
    sp = model.space
    s1, s2 = _solve_pair(p1, p2, s1, s2)
    nt = sp.nonterminal
    k = model.k
    Y2, Z1, Z2 = s2.Y.values[nt], s1.Z.values[nt], s2.Z.values[nt]
    zmix = Z1.copy()
    zmix[:, :k] = Z2[:, :k]
    lhs = p1.generator(model, nt, Y2, zmix) - p1.generator(model, nt, Y2, Z2)
    md2 = model.md[nt][:, 0, 0] ** 2
    rhs = psi * md2 * (Z1[:, k] - Z2[:, k])
    base = p1.generator(model, nt, Y2, Z2) - p2.generator(model, nt, Y2, Z2)
    lin = linearize(model, p1.generator, p2.generator, s1, s2, zeta_psi(model, psi))
    identity = float(np.abs(lin.b[nt] - (base + lhs - rhs)).max(initial=0.0))
    return {"passed": bool(np.all(lhs - rhs >= -B_TOL)), "min_margin": float((lhs - rhs).min(initial=0.0)),
            "identity_residual": identity, "psi_ok": bool(psi > -1.0)}
