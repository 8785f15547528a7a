"""Closed-form solution of linear BSDEs on trees.

For ``g(t, y, z) = a y + b + c* m^c z^c + d* m^d z^d`` the discrete scheme
of :mod:`bsdelab.solver` is solved exactly by the weight

    q_c = q_nu (1 - a dQ)^{-1} (1 + dMhat_c),   dMhat_c = (c; d)* alpha dM_c,

with ``alpha`` the blockwise pseudo-inverse of ``m``.  The factor
``(1 - a dQ)^{-1}`` is the implicit-step version of ``exp(int a dQ)``; the
explicit joint product ``prod(1 + a dQ + dMhat)`` agrees with ``q`` up to
``O(dt)`` and the discrepancy is reported.  With
``A = sum q_- dD + <q, D>`` (``<q, D>`` the compensator of ``sum dq dD``),

    q_t Y_t = E_t[ q_T eta + sum_{u >= t} q_{u+1} b_u dQ_u - (A_T - A_t) ].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calculus import conditional_expectation, increments, martingale_from_terminal, step_mean
from .generators import Linear, _coef
from .models import MartingaleModel, represent_increments
from .tree import AdaptedProcess, FilteredSpace, PredictableProcess, as_array

MART_TOL = 1e-10


class LinearError(ValueError):
    pass


@dataclass(frozen=True)
class LinearCoefficients:
    """Node arrays ``a (N,)``, ``b (N,)``, ``c (N, k)``, ``d (N, n-k)``."""

    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, model: MartingaleModel, a=0.0, b=0.0, c=0.0, d=0.0) -> "LinearCoefficients":
        """Constants, per-step schedules or node arrays; terminal rows are zeroed."""
        sp = model.space
        nodes = np.arange(sp.n_nodes)
        nt_mask = sp.time_idx < sp.steps
        safe = np.where(nt_mask, nodes, 0)
        arrs = [_coef(model, safe, a), _coef(model, safe, b),
                np.array(_coef(model, safe, c, model.k)), np.array(_coef(model, safe, d, model.n_jump))]
        out = []
        for v in arrs:
            v = np.array(v, dtype=float)
            v[~nt_mask] = 0.0
            out.append(v)
        return cls(*out)

    def sup(self) -> dict:
        return {"a": float(np.abs(self.a).max(initial=0.0)),
                "c": float(np.linalg.norm(self.c, axis=1).max(initial=0.0)),
                "d": float(np.linalg.norm(self.d, axis=1).max(initial=0.0))}

    def generator(self) -> Linear:
        return Linear(self.a, self.b, self.c, self.d)


def stochastic_exponential(space: FilteredSpace, X) -> AdaptedProcess:
    """Discrete Doleans exponential ``prod (1 + dX)`` with ``X_{0-} = 0``.

    Satisfies ``dE = E_- dX`` node-exactly; zeros are absorbing and negative
    factors are allowed (check ``values.min()``).
    """
    dX = increments(space, X)
    E = np.empty(space.n_nodes)
    E[0] = 1.0 + dX[0]
    for k in range(1, space.steps + 1):
        sl = space.slice(k)
        E[sl] = E[space.parent[sl]] * (1.0 + dX[sl])
    return AdaptedProcess(space, E)


@dataclass(frozen=True)
class ExponentialBundle:
    """The processes ``Qhat, Mhat, q, A`` and the objects of the comparison proof.

    ``q`` is the exact discrete weight; ``q_joint`` is the explicit
    ``prod(1 + dQhat + dMhat)``.  ``Phi = sum q_c dD_c`` is the pathwise
    process whose compensator has increments ``E_nu[dA]``.
    """

    model: MartingaleModel
    coeffs: LinearCoefficients
    Qhat: AdaptedProcess
    Mhat: AdaptedProcess
    Mhat_d: AdaptedProcess
    q: AdaptedProcess
    q_joint: AdaptedProcess
    A: AdaptedProcess
    Phi: AdaptedProcess
    theta: np.ndarray = field(repr=False)
    min_jump: float = 0.0
    min_jump_d: float = 0.0
    min_discount: float = 1.0

    @property
    def positive(self) -> bool:
        return self.min_jump > -1.0 and self.min_discount > 0.0

    @property
    def joint_discrepancy(self) -> float:
        return float(np.max(np.abs(self.q.values - self.q_joint.values)))

    @property
    def joint_discrepancy_l1(self) -> float:
        """``E|q_T - q_joint_T|``; first order in the mesh, unlike the sup over paths."""
        sp = self.model.space
        lv = sp.slice(sp.steps)
        return float(np.sum(sp.uncond[lv] * np.abs(self.q.values[lv] - self.q_joint.values[lv])))

    def compensator_increments(self) -> np.ndarray:
        """``E_nu[dA]`` per non-terminal node (the increments of ``Phi^p``)."""
        return step_mean(self.model.space, self.A.values)[self.model.space.nonterminal]


def _alpha(model: MartingaleModel, strict: bool) -> np.ndarray:
    """Blockwise pseudo-inverse of ``m``; ``strict`` refuses singular blocks."""
    k = model.k
    out = np.zeros_like(model.m.values)
    nt = model.space.nonterminal
    for lo, hi in ((0, k), (k, model.n)):
        if hi == lo:
            continue
        blk = model.m.values[nt, lo:hi, lo:hi]
        inv = np.linalg.pinv(blk, hermitian=True)
        if strict:
            rank = np.linalg.matrix_rank(blk, hermitian=True)
            bad = np.flatnonzero(rank < hi - lo)
            if bad.size:
                raise LinearError(f"m block is singular at node {int(nt[bad[0]])}")
        out[nt, lo:hi, lo:hi] = inv
    return out


def build_exponential_bundle(model: MartingaleModel, coeffs: LinearCoefficients, D=None,
                             strict_inverse: bool = False) -> ExponentialBundle:
    """Assemble ``q`` and ``A`` for the linear problem with adjustment ``D``.

    The inverse of ``m`` is the blockwise pseudo-inverse, which is exact for
    the scheme because null directions of ``m`` carry no martingale
    increment (post-default nodes); ``strict_inverse`` refuses them instead.
    """
    sp = model.space
    N = sp.n_nodes
    Dv = np.zeros(N) if D is None else as_array(D)
    nt = sp.nonterminal
    dq = model.dQ.values
    alpha = _alpha(model, strict_inverse)
    cd = np.concatenate([coeffs.c, coeffs.d], axis=1)
    theta = np.einsum("nji,nj->ni", alpha, cd)             # alpha* (c; d)
    k = model.k
    par = sp.parent[1:]
    dM = model.dM
    dMhat = np.zeros(N)
    dMhat[1:] = np.einsum("ni,ni->n", theta[par], dM[1:])
    dMhat_d = np.zeros(N)
    dMhat_d[1:] = np.einsum("ni,ni->n", theta[par, k:], dM[1:, k:])
    disc = 1.0 - coeffs.a * dq
    min_disc = float(disc[nt].min(initial=1.0))
    if min_disc <= 0.0:
        raise LinearError("1 - a dQ must stay positive; refine the grid")
    dQhat = coeffs.a * dq
    Qhat = np.zeros(N)
    Mhat = np.zeros(N)
    Mhat_d = np.zeros(N)
    q = np.ones(N)
    qj = np.ones(N)
    for kk in range(1, sp.steps + 1):
        sl = sp.slice(kk)
        p = sp.parent[sl]
        Qhat[sl] = Qhat[p] + dQhat[p]
        Mhat[sl] = Mhat[p] + dMhat[sl]
        Mhat_d[sl] = Mhat_d[p] + dMhat_d[sl]
        q[sl] = q[p] * (1.0 + dMhat[sl]) / disc[p]
        qj[sl] = qj[p] * (1.0 + dQhat[p] + dMhat[sl])
    # A = sum q_- dD + compensator of sum dq dD
    dD = increments(sp, Dv)
    dq_proc = increments(sp, q)
    cross = np.zeros(N)
    cross[1:] = dq_proc[1:] * dD[1:]
    comp = step_mean(sp, _cumulate(sp, cross))
    A = np.zeros(N)
    Phi = np.zeros(N)
    for kk in range(1, sp.steps + 1):
        sl = sp.slice(kk)
        p = sp.parent[sl]
        A[sl] = A[p] + q[p] * dD[sl] + comp[p]
        Phi[sl] = Phi[p] + q[sl] * dD[sl]
    mj = float(dMhat[1:].min(initial=0.0))
    mjd = float(dMhat_d[1:].min(initial=0.0))
    wrap = lambda v: AdaptedProcess(sp, v)  # noqa: E731
    return ExponentialBundle(model, coeffs, wrap(Qhat), wrap(Mhat), wrap(Mhat_d), wrap(q), wrap(qj),
                             wrap(A), wrap(Phi), theta, mj, mjd, min_disc)


def _cumulate(sp: FilteredSpace, d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    for k in range(1, sp.steps + 1):
        sl = sp.slice(k)
        out[sl] = out[sp.parent[sl]] + d[sl]
    return out


def _running_b(bundle: ExponentialBundle) -> np.ndarray:
    """``B_t = sum_{u < t} q_{u+1} b_u dQ_u`` (adapted: uses the child's ``q``)."""
    sp = bundle.model.space
    q = bundle.q.values
    bdq = bundle.coeffs.b * bundle.model.dQ.values
    inc = np.zeros(sp.n_nodes)
    inc[1:] = q[1:] * bdq[sp.parent[1:]]
    return _cumulate(sp, inc)


@dataclass(frozen=True)
class LinearSolution:
    """Closed-form ``q Y`` and, when ``q > 0``, ``Y`` and ``Z`` with cross-check paths."""

    bundle: ExponentialBundle
    qY: np.ndarray = field(repr=False)
    Y: AdaptedProcess | None = None
    Z: PredictableProcess | None = None
    Y_gamma: np.ndarray | None = field(default=None, repr=False)
    Y_direct: np.ndarray | None = field(default=None, repr=False)
    representation_residual: float = 0.0

    @property
    def Y0(self) -> float:
        return float(self.qY[0])

    @property
    def path_gap(self) -> float:
        """Largest disagreement among the equivalent closed-form paths."""
        if self.Y is None:
            return 0.0
        gaps = [np.abs(self.Y.values - v).max() for v in (self.Y_gamma, self.Y_direct) if v is not None]
        return float(max(gaps, default=0.0))


def linear_solution(model: MartingaleModel, coeffs: LinearCoefficients, eta, D=None,
                    bundle: ExponentialBundle | None = None) -> LinearSolution:
    """Evaluate the closed form through exact conditional expectations.

    ``qY`` is always returned.  ``Y`` (and the two Gamma-form cross checks)
    only when ``q`` stays strictly positive; otherwise division is refused.
    """
    sp = model.space
    N = sp.n_nodes
    Dv = np.zeros(N) if D is None else as_array(D)
    if bundle is None:
        bundle = build_exponential_bundle(model, coeffs, Dv)
    leaves = sp.slice(sp.steps)
    eta = as_array(eta)
    if eta.ndim == 0:
        eta = np.full(leaves.stop - leaves.start, float(eta))
    elif eta.shape == (N,):
        eta = eta[leaves]
    q, A = bundle.q.values, bundle.A.values
    B = _running_b(bundle)
    F = q[leaves] * eta + B[leaves] - A[leaves]
    qY = martingale_from_terminal(sp, F) - B + A
    if not bundle.positive or np.any(q <= 0.0):
        return LinearSolution(bundle, qY)
    Y = qY / q
    # one-step Gamma recursions: the literal display (Gamma_{t,u-} dD plus <q, D> / q_t)
    # and the continuous-case form (Gamma_{t,u} dD); both must reproduce Y
    dD = increments(sp, Dv)
    bdq = coeffs.b * model.dQ.values
    Y_gamma = np.zeros(N)
    Y_cor = np.zeros(N)
    Y_gamma[leaves] = eta
    Y_cor[leaves] = eta
    for k in range(sp.steps - 1, -1, -1):
        sl, sl1 = sp.slice(k), sp.slice(k + 1)
        G = q[sl1] / sp.spread(q[sl], k)
        bb = sp.spread(bdq[sl], k)
        Y_gamma[sl] = sp.step_expect(G * (Y_gamma[sl1] + bb) - dD[sl1] - (G - 1.0) * dD[sl1], k)
        Y_cor[sl] = sp.step_expect(G * (Y_cor[sl1] + bb - dD[sl1]), k)
    Z = np.zeros((N, model.n))
    res = 0.0
    X = Y - Dv
    for k in range(sp.steps):
        z, r = represent_increments(model, X[sp.slice(k + 1)], k)
        Z[sp.slice(k)] = z
        res = max(res, float(r.max(initial=0.0)))
    return LinearSolution(bundle, qY, AdaptedProcess(sp, Y), PredictableProcess(sp, Z), Y_gamma, Y_cor, res)


@dataclass(frozen=True)
class MartingaleCheck:
    residual: float
    node_residual: np.ndarray = field(repr=False)
    worst_node: int
    flagged: np.ndarray = field(repr=False)
    sup_abs_mean: float
    Mtilde: np.ndarray = field(repr=False)


def weighted_martingale_check(bundle: ExponentialBundle, Y, tol: float = MART_TOL) -> MartingaleCheck:
    """One-step drift of ``Mtilde = q Y - A + sum q b dQ`` at every non-terminal node."""
    sp = bundle.model.space
    Mt = bundle.q.values * as_array(Y) - bundle.A.values + _running_b(bundle)
    drift = np.abs(step_mean(sp, Mt))[sp.nonterminal]
    worst = int(np.argmax(drift)) if drift.size else 0
    # E[sup |Mtilde|] along paths
    run = np.abs(Mt).copy()
    for k in range(1, sp.steps + 1):
        sl = sp.slice(k)
        run[sl] = np.maximum(run[sp.parent[sl]], run[sl])
    leaves = sp.slice(sp.steps)
    sup_mean = float(np.sum(sp.uncond[leaves] * run[leaves]))
    return MartingaleCheck(float(drift.max(initial=0.0)), drift, worst, np.flatnonzero(drift > tol),
                           sup_mean, Mt)


def supermartingale_check(bundle: ExponentialBundle) -> dict:
    """``E_nu[dA] <= 1e-12`` everywhere, with the compensator split of ``A``."""
    sp = bundle.model.space
    inc = bundle.compensator_increments()
    Ap = np.zeros(sp.n_nodes)
    full = np.zeros(sp.n_nodes)
    full[sp.nonterminal] = inc
    for k in range(1, sp.steps + 1):
        sl = sp.slice(k)
        Ap[sl] = Ap[sp.parent[sl]] + full[sp.parent[sl]]
    mart = bundle.A.values - Ap
    drift = np.abs(step_mean(sp, mart))[sp.nonterminal]
    return {"max_increment": float(inc.max(initial=0.0)), "ok": bool(inc.max(initial=0.0) <= 1e-12),
            "martingale_residual": float(drift.max(initial=0.0))}


def q_decomposition(bundle: ExponentialBundle) -> dict:
    """Discrepancies between the product forms of ``q``."""
    sp = bundle.model.space
    EQ = stochastic_exponential(sp, bundle.Qhat.values).values
    EM = stochastic_exponential(sp, bundle.Mhat.values).values
    return {"exact_vs_joint": bundle.joint_discrepancy, "exact_vs_joint_l1": bundle.joint_discrepancy_l1,
            "product_vs_joint": float(np.max(np.abs(EQ * EM - bundle.q_joint.values)))}


def linear_expectation(space: FilteredSpace, X, k: int) -> np.ndarray:
    return conditional_expectation(space, X, k)
