"""Exact backward solver, Picard iteration and a priori estimates.

The discrete BSDE on a tree reads, for every non-terminal node ``nu`` and
child ``c``,

    Y_c = Y_nu - g(nu, Y_nu, Z_nu) dQ_nu + Z_nu* dM_c + dD_c,     Y_T = eta,

so ``Y_nu = E_nu[Y_c - dD_c] + g(nu, Y_nu, Z_nu) dQ_nu`` with ``Z_nu`` the
one-step representation of ``Y - D``.  The scalar equation in ``Y_nu`` is
solved by relaxed fixed-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .calculus import NormReport, weighted_norms
from .generators import Frozen, Generator, Shifted
from .models import MartingaleModel, PRPViolation, represent_increments
from .tree import AdaptedProcess, PredictableProcess, TreeError, as_array

INNER_TOL = 1e-12
ACCEPT_TOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class BSDEProblem:
    """Triplet ``(g, eta, D)`` on a martingale model.

    ``eta`` holds the terminal values (one per leaf, or a full node array of
    which the leaves are used); ``D`` is a node array, zero by default.
    """

    model: MartingaleModel
    generator: Generator
    eta: np.ndarray = field(repr=False)
    D: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        sp = self.model.space
        leaves = sp.slice(sp.steps)
        eta = as_array(self.eta)
        if eta.ndim == 0:
            eta = np.full(leaves.stop - leaves.start, float(eta))
        elif eta.shape == (sp.n_nodes,):
            eta = eta[leaves]
        if eta.shape != (leaves.stop - leaves.start,):
            raise TreeError("eta must have one value per leaf")
        D = np.zeros(sp.n_nodes) if self.D is None else as_array(self.D).copy()
        if D.shape != (sp.n_nodes,):
            raise TreeError("D must be a scalar node array")
        if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(D))):
            raise ValueError("eta and D must be finite")
        eta = eta.copy()
        eta.flags.writeable = False
        D.flags.writeable = False
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "D", D)

    @property
    def space(self):
        return self.model.space


@dataclass(frozen=True)
class Solution:
    """Adapted ``Y`` and predictable ``Z`` with diagnostics.

    ``step_residual`` is the largest one-step defect and
    ``pathwise_residual`` the largest defect of the integrated identity
    between any node and any of its descendant leaves.
    """

    Y: AdaptedProcess
    Z: PredictableProcess
    pathwise_residual: float
    step_residual: float
    representation_residual: float
    norms: NormReport
    inner_iterations: int = 0

    @property
    def Y0(self) -> float:
        return float(self.Y.values[0])

    @property
    def accepted(self) -> bool:
        return self.pathwise_residual < ACCEPT_TOL


# -- residuals ------------------------------------------------------------


def edge_defects(problem: BSDEProblem, Y, Z) -> np.ndarray:
    """Per non-root node ``c``: ``Y_c - [Y_nu - g dQ + Z* dM_c + dD_c]``."""
    model = problem.model
    sp = model.space
    y, z = as_array(Y), as_array(Z)
    nt = sp.nonterminal
    gv = np.zeros(sp.n_nodes)
    gv[nt] = problem.generator(model, nt, y[nt], z[nt]) * model.dQ.values[nt]
    par = sp.parent[1:]
    D = problem.D
    out = np.zeros(sp.n_nodes)
    out[1:] = y[1:] - (y[par] - gv[par] + np.einsum("ni,ni->n", z[par], model.dM[1:]) + D[1:] - D[par])
    return out


def pathwise_residual(problem: BSDEProblem, Y, Z) -> tuple[float, float]:
    """``(pathwise, step)`` residuals including the terminal condition."""
    sp = problem.space
    e = edge_defects(problem, Y, Z)
    y = as_array(Y)
    leaves = sp.slice(sp.steps)
    hi = np.zeros(sp.n_nodes)
    lo = np.zeros(sp.n_nodes)
    term = y[leaves] - problem.eta
    hi[leaves] = term
    lo[leaves] = term
    for k in range(sp.steps - 1, -1, -1):
        sl1 = sp.slice(k + 1)
        off = sp.child_offsets(k)
        hi[sp.slice(k)] = np.maximum.reduceat(e[sl1] + hi[sl1], off)
        lo[sp.slice(k)] = np.minimum.reduceat(e[sl1] + lo[sl1], off)
    path = float(max(np.abs(hi).max(), np.abs(lo).max()))
    step = float(max(np.abs(e).max(), np.abs(term).max(initial=0.0)))
    return path, step


# -- backward solver ------------------------------------------------------


def _inner_solve(g, model, nodes, base, z, dq, relax, tol, max_inner):
    y = base.copy()
    for it in range(1, max_inner + 1):
        target = base + g(model, nodes, y, z) * dq
        new = (1.0 - relax) * y + relax * target
        if not np.all(np.isfinite(new)):
            raise SolverError("implicit step diverged; refine the grid")
        delta = np.max(np.abs(new - y), initial=0.0)
        y = new
        if delta <= tol * (1.0 + np.max(np.abs(y), initial=0.0)):
            return y, it
    raise SolverError(f"implicit step did not converge in {max_inner} iterations")


def solve_backward_exact(problem: BSDEProblem, tol: float = INNER_TOL, relax: float = 1.0,
                         max_inner: int = 500, strict: bool = True) -> Solution:
    """Slice-by-slice backward recursion of the discrete BSDE.

    Raises :class:`SolverError` when the declared Lipschitz constant makes the
    implicit step non-contractive (``L dQ >= 1``) and :class:`PRPViolation`
    when a node cannot be represented.
    """
    model = problem.model
    sp = model.space
    g = problem.generator
    D = problem.D
    dq_all = model.dQ.values
    L = g.lipschitz(model)
    if L is not None and sp.steps and L * dq_all[sp.nonterminal].max() >= 1.0:
        raise SolverError(f"L*dQ = {L * dq_all.max():.3f} >= 1: the implicit step is not a contraction; "
                          "use more steps")
    if strict:
        ok, node = model.prp_report()
        if not ok:
            raise PRPViolation(node, -1, -1)
    Y = np.zeros(sp.n_nodes)
    Z = np.zeros((sp.n_nodes, model.n))
    Y[sp.slice(sp.steps)] = problem.eta
    rep_res = 0.0
    inner = 0
    for k in range(sp.steps - 1, -1, -1):
        sl, sl1 = sp.slice(k), sp.slice(k + 1)
        nodes = sp.nodes_at(k)
        X = Y[sl1] - D[sl1]
        z, res = represent_increments(model, X, k)
        rep_res = max(rep_res, float(res.max(initial=0.0)))
        base = sp.step_expect(X, k) + D[sl]
        y, it = _inner_solve(g, model, nodes, base, z, dq_all[sl], relax, tol, max_inner)
        inner = max(inner, it)
        Y[sl] = y
        Z[sl] = z
    if strict and rep_res > ACCEPT_TOL:
        raise PRPViolation(-1, -1, -1, rep_res)
    return _finish(problem, Y, Z, rep_res, inner)


def _finish(problem, Y, Z, rep_res, inner) -> Solution:
    path, step = pathwise_residual(problem, Y, Z)
    norms = weighted_norms(Y, Z, problem.model, 0.0)
    sp = problem.space
    return Solution(AdaptedProcess(sp, Y), PredictableProcess(sp, Z), path, step, rep_res, norms, inner)


# -- D shift --------------------------------------------------------------


def transform_shift(problem: BSDEProblem) -> BSDEProblem:
    """``(g(t, y + D_t, z), eta - D_T, 0)``."""
    if not np.any(problem.D):
        return problem
    sp = problem.space
    D = problem.D
    return BSDEProblem(problem.model, Shifted(problem.generator, D), problem.eta - D[sp.slice(sp.steps)], None)


def untransform(problem: BSDEProblem, sol: Solution) -> Solution:
    """Map a solution of the shifted problem back: ``Y = Y~ + D``."""
    Y = sol.Y.values + problem.D
    Z = sol.Z.values
    return _finish(problem, Y, Z, sol.representation_residual, sol.inner_iterations)


# -- Picard ---------------------------------------------------------------


def picard_map(problem: BSDEProblem, w, v) -> Solution:
    """Solve the decoupled BSDE with ``g_t = g(t, w_t, v_t)``."""
    frozen = Frozen(problem.generator, as_array(w), as_array(v))
    return solve_backward_exact(replace(problem, generator=frozen))


def contraction_bound(beta: float, L: float, C_Q: float) -> float:
    return 1158.0 * L * L * (C_Q + 1.0) / beta


@dataclass
class PicardTrace:
    """Per-iteration differences and contraction diagnostics.

    ``deltas_beta`` are unsquared normalized beta-norms of successive
    differences ``(y^i - y^{i-1}, z^i - z^{i-1})`` using the pair
    ``S^2_beta + L^2_beta``; ``ratios`` are the squared ratios compared with
    the contraction bound, recorded while the unweighted difference stays
    above ``RATIO_FLOOR`` times the first one.
    """

    beta: float
    lipschitz: float
    C_Q: float
    bound: float
    deltas_beta: list = field(default_factory=list)
    deltas_0: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    log_scale: float = 0.0

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    @property
    def bound_respected(self) -> bool:
        if self.bound >= 1.0:
            return True
        return all(r <= self.bound for r in self.ratios)

    @property
    def monotone(self) -> bool:
        """Successive ``||Delta||_beta`` decreasing or flat within 1e-12 (above the floor)."""
        d, d0 = self.deltas_beta, self.deltas_0
        floor = RATIO_FLOOR * d0[0] if d0 else 0.0
        return all(d[i + 1] <= d[i] * (1 + 1e-12) for i in range(len(d) - 1) if d0[i + 1] >= floor)


RATIO_FLOOR = 1e-8


def picard_iterate(problem: BSDEProblem, beta: float, max_iters: int = 200, tol: float = 1e-12,
                   lipschitz: float | None = None, raise_on_fail: bool = False) -> tuple[Solution, PicardTrace]:
    """Iterate the Picard map from ``(0, 0)``.

    Stops when the unweighted ``S^2 + L^2`` size of the difference drops
    below ``tol``.  ``trace.iterations`` counts the iterates needed to reach
    the fixed point (a zero generator therefore needs one).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    model = problem.model
    sp = model.space
    L = problem.generator.lipschitz(model) if lipschitz is None else lipschitz
    L = 0.0 if L is None else float(L)
    trace = PicardTrace(beta, L, model.C_Q, contraction_bound(beta, L, model.C_Q) if L > 0 else 0.0)
    w = np.zeros(sp.n_nodes)
    v = np.zeros((sp.n_nodes, model.n))
    sol = None
    prev_sq = None
    for i in range(1, max_iters + 1):
        sol = picard_map(problem, w, v)
        dy = sol.Y.values - w
        dz = sol.Z.values - v
        nb = weighted_norms(dy, dz, model, beta, normalize=True)
        n0 = weighted_norms(dy, dz, model, 0.0)
        trace.log_scale = nb.log_scale
        size_b = float(np.sqrt(nb.pair))
        size_0 = float(np.sqrt(n0.pair))
        trace.deltas_beta.append(size_b)
        trace.deltas_0.append(size_0)
        # below the floor the differences are rounding noise and their ratio means nothing
        if prev_sq is not None and prev_sq > 0 and size_0 >= RATIO_FLOOR * trace.deltas_0[0]:
            trace.ratios.append(nb.pair / prev_sq)
        prev_sq = nb.pair
        w, v = sol.Y.values, sol.Z.values
        if size_0 < tol:
            trace.iterations = max(i - 1, 1)
            trace.converged = True
            break
    else:
        trace.iterations = max_iters
        if raise_on_fail:
            raise SolverError(f"Picard iteration did not converge in {max_iters} iterations "
                              f"(last difference {trace.deltas_0[-1]:.3e})")
    final = solve_from_fixed_point(problem, w, v)
    return final, trace


def solve_from_fixed_point(problem: BSDEProblem, Y, Z) -> Solution:
    """Wrap a candidate ``(Y, Z)`` with the residuals of the coupled problem."""
    return _finish(problem, as_array(Y).copy(), as_array(Z).copy(), 0.0, 0)


# -- a priori estimates ---------------------------------------------------


@dataclass(frozen=True)
class AprioriReport:
    lhs: float
    J: float
    beta: float
    C: float
    ratio: float
    ok: bool
    L1: float


def apriori_constant(L1: float, C_Q: float) -> tuple[float, float]:
    """``(beta, C)`` with ``beta = 2L + 2L^2 + 2`` and ``C = 8 exp(beta C_Q)``."""
    beta = 2 * L1 + 2 * L1 * L1 + 2
    return beta, 8.0 * np.exp(beta * C_Q)


def apriori_check(p1: BSDEProblem, p2: BSDEProblem, s1: Solution | None = None,
                  s2: Solution | None = None, L1: float | None = None) -> AprioriReport:
    """Evaluate ``LHS <= C J`` for two problems on the same model."""
    if p1.model is not p2.model:
        raise ValueError("a priori check needs both problems on the same model")
    model = p1.model
    sp = model.space
    s1 = solve_backward_exact(p1) if s1 is None else s1
    s2 = solve_backward_exact(p2) if s2 is None else s2
    if L1 is None:
        L1 = p1.generator.lipschitz(model)
        if L1 is None:
            raise ValueError("generator 1 has no declared Lipschitz constant")
    y = s1.Y.values - s2.Y.values
    z = s1.Z.values - s2.Z.values
    Dd = p1.D - p2.D
    lhs = weighted_norms(y - Dd, None, model, 0.0).s2 + weighted_norms(y, z, model, 0.0).h2 \
        + weighted_norms(None, z, model, 0.0).l2m
    leaves = sp.slice(sp.steps)
    eta = p1.eta - p2.eta - Dd[leaves]
    term = float(np.sum(sp.uncond[leaves] * eta * eta))
    nt = sp.nonterminal
    Y2, Z2 = s2.Y.values[nt], s2.Z.values[nt]
    gd = np.zeros(sp.n_nodes)
    gd[nt] = p1.generator(model, nt, Y2, Z2) - p2.generator(model, nt, Y2, Z2)
    J = term + weighted_norms(Dd, None, model, 0.0).h2 + weighted_norms(gd, None, model, 0.0).h2
    beta, C = apriori_constant(L1, model.C_Q)
    ok = lhs <= C * J * (1 + 1e-12) + 1e-14
    ratio = lhs / J if J > 0 else 0.0
    return AprioriReport(float(lhs), float(J), beta, float(C), float(ratio), bool(ok), float(L1))


def discrete_stability_factor(model: MartingaleModel, L: float) -> float:
    """Largest ``prod (1 - L dQ)^{-1}`` along a path: the exact discrete Lipschitz factor in eta."""
    sp = model.space
    f = np.ones(sp.n_nodes)
    dq = model.dQ.values
    for k in range(1, sp.steps + 1):
        sl = sp.slice(k)
        par = sp.parent[sl]
        f[sl] = f[par] / (1.0 - L * dq[par])
    return float(f[sp.slice(sp.steps)].max())


@dataclass(frozen=True)
class StabilityRow:
    eps: float
    gap: float
    apriori_bound: float
    discrete_bound: float
    continuum_bound: float


def stability_ladder(problem: BSDEProblem, eps_values=(1e-3, 1e-2, 1e-1)) -> list[StabilityRow]:
    """Shift ``eta`` by each ``eps`` and record ``|Y^1_0 - Y^2_0|`` against the bounds."""
    model = problem.model
    L = problem.generator.lipschitz(model) or 0.0
    _, C = apriori_constant(L, model.C_Q)
    base = solve_backward_exact(problem)
    fac = discrete_stability_factor(model, L)
    rows = []
    for eps in eps_values:
        bumped = solve_backward_exact(replace(problem, eta=problem.eta + eps))
        gap = abs(bumped.Y0 - base.Y0)
        rows.append(StabilityRow(float(eps), float(gap), float(C * eps), float(fac * eps),
                                 float(np.exp(L * model.C_Q) * eps)))
    return rows
