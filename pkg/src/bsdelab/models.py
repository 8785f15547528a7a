"""Driving martingales on scenario trees and their factorization data.

A :class:`MartingaleModel` bundles an n-dimensional tree martingale ``M``
with a predictable symmetric PSD matrix process ``m`` and a nondecreasing
predictable ``Q`` such that the one-step conditional covariance of ``dM``
equals ``m m* dQ`` at every node.  The first ``k`` components are the
continuous-type block, the remaining ones the jump block.

Builders cover the random-walk Brownian proxy, compensated default
indicators and compensated Poisson counts.  :func:`represent_martingale`
solves the one-step representation problem node by node with minimum-norm
weighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .calculus import check_martingale, increments, step_covariance, weighted_norms
from .tree import AdaptedProcess, FilteredSpace, PredictableProcess, TreeError, as_array

COV_TOL = 1e-10
SYM_TOL = 1e-12
EIG_TOL = 1e-12
REP_TOL = 1e-10


class PRPViolation(ValueError):
    """The child increments of ``M`` at a node do not span the martingale increments."""

    def __init__(self, node: int, rank: int, needed: int, residual: float | None = None):
        self.node = node
        self.rank = rank
        self.needed = needed
        self.residual = residual
        msg = f"representation fails at node {node}: rank {rank} < {needed}"
        if residual is not None:
            msg = f"representation residual {residual:.3e} at node {node}"
        super().__init__(msg)


def matrix_sqrt_psd(a) -> np.ndarray:
    """Symmetric PSD square root, batched over leading axes.

    Eigenvalues down to ``-1e-12`` are clamped to zero; anything more
    negative, or a non-symmetric input, raises ``ValueError``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError("matrix_sqrt_psd needs square matrices")
    scale = 1.0 + np.max(np.abs(a), initial=0.0)
    if np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    w, v = np.linalg.eigh(sym)
    if w.size and w.min() < -EIG_TOL:
        raise ValueError(f"matrix has negative eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    r = (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (r + np.swapaxes(r, -1, -2))


# -- representation plan --------------------------------------------------


@dataclass(frozen=True)
class _Group:
    """Nodes of one slice sharing a branching number."""

    nodes: np.ndarray      # (G,)
    children: np.ndarray   # (G, b)
    solve: np.ndarray      # (G, n, b): z = solve @ dN over children
    rank: np.ndarray       # (G,)
    cond: np.ndarray       # (G,)


def _build_plan(space: FilteredSpace, dM: np.ndarray) -> list[list[_Group]]:
    n = dM.shape[1]
    plan = []
    for k in range(space.steps):
        nodes = space.nodes_at(k)
        nb = space.n_children[nodes]
        groups = []
        for b in np.unique(nb):
            sel = nodes[nb == b]
            kids = space.first_child[sel][:, None] + np.arange(b)
            sp = np.sqrt(space.prob[kids])                       # (G, b)
            X = sp[:, :, None] * dM[kids]                         # (G, b, n)
            if n == 0:
                solve = np.zeros((sel.size, 0, b))
                rank = np.zeros(sel.size, dtype=int)
                cond = np.ones(sel.size)
            else:
                s = np.linalg.svd(X, compute_uv=False)            # (G, min(b, n))
                tol = s.max(axis=1, initial=0.0, keepdims=True) * max(b, n) * np.finfo(float).eps
                tol = np.maximum(tol, 1e-300)
                keep = s > tol
                rank = keep.sum(axis=1)
                smin = np.where(keep, s, np.inf).min(axis=1, initial=np.inf)
                cond = np.where(rank > 0, s[:, 0] / np.where(np.isfinite(smin), smin, 1.0), 1.0)
                solve = np.linalg.pinv(X, rcond=max(b, n) * np.finfo(float).eps) * sp[:, None, :]
            groups.append(_Group(sel, kids, solve, rank, cond))
        plan.append(groups)
    return plan


@dataclass(frozen=True)
class RepresentationResult:
    """``Z`` with ``dN = Z* dM`` node by node, plus honest diagnostics."""

    Z: PredictableProcess
    residual: float
    node_residual: np.ndarray = field(repr=False)
    max_condition: float = 1.0
    worst_node: int = 0


# -- the model ------------------------------------------------------------


@dataclass(frozen=True)
class MartingaleModel:
    """Tree martingale ``M`` with its factorization ``<M> = int m m* dQ``.

    Parameters
    ----------
    space : FilteredSpace
    M : AdaptedProcess
        ``(N, n)`` martingale paths with ``M_0 = 0``.
    m : PredictableProcess
        ``(N, n, n)`` symmetric PSD matrices.
    Q : AdaptedProcess
        Scalar, nondecreasing, predictable increments, ``Q_0 = 0``.
    k : int
        Size of the continuous-type block.
    intensity : PredictableProcess, optional
        ``(N, n - k)`` jump intensities (zero once a default channel fired).
    continuum_m : PredictableProcess, optional
        Continuum target of ``m`` (e.g. ``sqrt(lambda)`` on the jump block).
    """

    space: FilteredSpace
    M: AdaptedProcess
    m: PredictableProcess
    Q: AdaptedProcess
    k: int
    intensity: PredictableProcess | None = None
    continuum_m: PredictableProcess | None = None
    names: tuple[str, ...] = ()
    check: bool = True

    def __post_init__(self):
        N = self.space.n_nodes
        if self.M.values.ndim != 2:
            raise TreeError("M must be vector valued (N, n)")
        n = self.M.values.shape[1]
        if self.m.values.shape != (N, n, n):
            raise TreeError(f"m must have shape (N, {n}, {n})")
        if self.Q.values.shape != (N,):
            raise TreeError("Q must be scalar")
        if not 0 <= self.k <= n:
            raise TreeError("block index k out of range")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"M{i}" for i in range(n)))
        if self.check:
            self.validate()

    # -- shapes and blocks ------------------------------------------------

    @property
    def n(self) -> int:
        return self.M.values.shape[1]

    @property
    def n_jump(self) -> int:
        return self.n - self.k

    @cached_property
    def dM(self) -> np.ndarray:
        return increments(self.space, self.M.values)

    @cached_property
    def dQ(self) -> PredictableProcess:
        q = self.Q.values
        dq = np.zeros(self.space.n_nodes)
        nt = self.space.nonterminal
        dq[nt] = q[self.space.first_child[nt]] - q[nt]
        return PredictableProcess(self.space, dq)

    @property
    def C_Q(self) -> float:
        return float(self.Q.values.max())

    @property
    def mc(self) -> np.ndarray:
        return self.m.values[:, :self.k, :self.k]

    @property
    def md(self) -> np.ndarray:
        return self.m.values[:, self.k:, self.k:]

    @cached_property
    def plan(self) -> list[list[_Group]]:
        return _build_plan(self.space, self.dM)

    # -- invariants -------------------------------------------------------

    def factorization_residual(self) -> float:
        """Max over nodes of ``|Cov_nu(dM) - m m* dQ|``."""
        cov = step_covariance(self.space, self.M.values)
        m = self.m.values
        target = m @ np.swapaxes(m, 1, 2) * self.dQ.values[:, None, None]
        nt = self.space.nonterminal
        return float(np.max(np.abs(cov[nt] - target[nt]), initial=0.0))

    def block_residual(self) -> float:
        """Max cross covariance between the continuous and jump blocks."""
        if self.k in (0, self.n):
            return 0.0
        cov = step_covariance(self.space, self.M.values)
        return float(np.max(np.abs(cov[:, :self.k, self.k:]), initial=0.0))

    def validate(self) -> None:
        sp = self.space
        check_martingale(sp, self.M.values, COV_TOL, "M")
        if np.max(np.abs(self.M.values[0]), initial=0.0) > 0.0:
            raise TreeError("M must start at 0")
        q = self.Q.values
        if q[0] != 0.0:
            raise TreeError("Q must start at 0")
        dq_all = increments(sp, q)[1:]
        if np.any(dq_all < 0):
            raise TreeError("Q must be nondecreasing")
        if np.any(np.abs(dq_all - self.dQ.values[sp.parent[1:]]) > 1e-14):
            raise TreeError("Q increments must be predictable")
        m = self.m.values
        if np.max(np.abs(m - np.swapaxes(m, 1, 2)), initial=0.0) > SYM_TOL:
            raise TreeError("m must be symmetric")
        if self.n and np.linalg.eigvalsh(m).min() < -EIG_TOL:
            raise TreeError("m must be positive semidefinite")
        r = self.factorization_residual()
        if r > COV_TOL:
            raise TreeError(f"conditional covariance differs from m m* dQ by {r:.3e}")
        r = self.block_residual()
        if r > COV_TOL:
            raise TreeError(f"continuous and jump blocks covary ({r:.3e})")

    def prp_report(self) -> tuple[bool, int | None]:
        """Whether PRP holds at every node; otherwise the first failing node."""
        for groups in self.plan:
            for g in groups:
                bad = np.flatnonzero(g.rank < g.children.shape[1] - 1)
                if bad.size:
                    return False, int(g.nodes[bad[0]])
        return True, None

    # -- conveniences -----------------------------------------------------

    def norms(self, Y=None, Z=None, beta: float = 0.0, normalize: bool = False):
        return weighted_norms(Y, Z, self, beta, normalize)

    def mz(self, Z) -> np.ndarray:
        """``m_nu Z_nu`` at every node."""
        return np.einsum("nij,nj->ni", self.m.values, as_array(Z))

    def alive(self) -> np.ndarray:
        """``(N, n - k)`` indicator that a jump channel is still active."""
        if self.intensity is None:
            return np.zeros((self.space.n_nodes, self.n_jump), dtype=bool)
        return self.intensity.values > 0

    def default_time(self, channel: int = 0) -> np.ndarray:
        """Per node, the jump time of ``channel`` if it already fired, else ``inf``."""
        sp = self.space
        lab = f"J{channel}"
        out = np.full(sp.n_nodes, np.inf)
        for i in range(1, sp.n_nodes):
            out[i] = out[sp.parent[i]]
            if np.isinf(out[i]) and sp.labels is not None and sp.labels[i] == lab:
                out[i] = sp.time_grid[sp.time_idx[i]]
        return out

    @classmethod
    def from_process(cls, space: FilteredSpace, M, Q=None, k: int | None = None, **kw) -> "MartingaleModel":
        """Factorize a given tree martingale; ``m = (Cov / dQ)^{1/2}``, ``Q_t = t`` by default."""
        Mv = as_array(M)
        if Mv.ndim == 1:
            Mv = Mv[:, None]
        q = space.time_of(np.arange(space.n_nodes)) if Q is None else as_array(Q)
        cov = step_covariance(space, Mv)
        nt = space.nonterminal
        dq = np.zeros(space.n_nodes)
        dq[nt] = q[space.first_child[nt]] - q[nt]
        m = np.zeros_like(cov)
        pos = dq > 0
        m[pos] = matrix_sqrt_psd(cov[pos] / dq[pos, None, None])
        bad = (~pos[nt]) & (np.abs(cov[nt]).reshape(nt.size, -1).max(axis=1, initial=0.0) > COV_TOL)
        if np.any(bad):
            raise TreeError("M moves on a step where Q is flat")
        return cls(space, AdaptedProcess(space, Mv), PredictableProcess(space, m),
                   AdaptedProcess(space, q), Mv.shape[1] if k is None else k, **kw)


# -- builders -------------------------------------------------------------


def _diffusion_children(space: FilteredSpace, node: int) -> np.ndarray:
    kids = space.children(node)
    if space.labels is None:
        return kids
    mask = np.array([not space.labels[c].startswith("J") for c in kids])
    return kids[mask]


def _orthonormal_directions(p: np.ndarray, dims: int) -> np.ndarray:
    """Rows ``x_c`` with ``sum p x = 0`` and ``sum p x x* = I`` (shape ``(b, dims)``)."""
    b = p.size
    s = np.sqrt(p)
    basis = np.column_stack([s, np.eye(b)[:, :dims]])
    qmat, _ = np.linalg.qr(basis)
    v = qmat[:, 1:dims + 1]
    return v / s[:, None]


def build_brownian_proxy(space: FilteredSpace, dims: int = 1, scale: float = 1.0) -> MartingaleModel:
    """Random-walk stand-in for a ``dims``-dimensional Brownian motion.

    At each node the increments live on the diffusion children (all children
    of a plain tree, the ``w*`` children of a canonical tree) and have
    conditional mean 0 and covariance ``scale^2 dt I``.  ``m = scale I`` and
    ``Q_t = t``.
    """
    if dims < 1:
        raise ValueError("dims must be at least 1")
    N = space.n_nodes
    dM = np.zeros((N, dims))
    cache: dict = {}
    for node in space.nonterminal:
        kids = _diffusion_children(space, node)
        if kids.size < dims + 1:
            raise TreeError(f"node {node} has {kids.size} diffusion branches, need {dims + 1}")
        p = space.prob[kids]
        r = p.sum()
        key = tuple(np.round(p / r, 15))
        if key not in cache:
            cache[key] = _orthonormal_directions(p / r, dims)
        dt = space.step_of(node)
        dM[kids] = scale * np.sqrt(dt / r) * cache[key]
    M = _cumulate(space, dM)
    m = np.zeros((N, dims, dims))
    m[space.nonterminal] = scale * np.eye(dims)
    names = tuple(f"W{i}" for i in range(dims))
    return MartingaleModel(space, AdaptedProcess(space, M), PredictableProcess(space, m),
                           _time_Q(space), dims, names=names)


def build_jump_block(space: FilteredSpace, channels=None) -> MartingaleModel:
    """Compensated jump martingales of a canonical tree's channels.

    ``dM^j = 1{jump of j} - lambda_j dt`` while channel ``j`` is alive.
    ``m`` is the PSD root of the exact one-step covariance divided by ``dt``;
    for one default channel that is ``sqrt(lambda (1 - lambda dt))``.
    """
    if not space.channels:
        raise TreeError("space has no jump channels; build it with canonical_tree")
    chans = list(range(len(space.channels))) if channels is None else list(channels)
    J = len(chans)
    N = space.n_nodes
    labels = space.labels
    # alive[i, j]: channel j still active at node i
    alive = np.ones((N, J), dtype=bool)
    for i in range(1, N):
        alive[i] = alive[space.parent[i]]
        lab = labels[i]
        if lab.startswith("J"):
            j = int(lab[1:])
            if j in chans and space.channels[j].kind == "default":
                alive[i, chans.index(j)] = False
    lam = np.zeros((N, J))
    dt = np.zeros(N)
    nt = space.nonterminal
    dt[nt] = space.step_of(nt)
    for col, j in enumerate(chans):
        rates = np.asarray(space.channels[j].intensity)
        lam[nt, col] = rates[space.time_idx[nt]] * alive[nt, col]
    p = lam * dt[:, None]
    dM = np.zeros((N, J))
    for col, j in enumerate(chans):
        jumped = np.array([lab == f"J{j}" for lab in labels])
        dM[1:, col] = jumped[1:] - p[space.parent[1:], col]
    M = _cumulate(space, dM)
    cov = np.zeros((N, J, J))
    cov[nt] = (np.einsum("ni,ij->nij", p[nt], np.eye(J)) - p[nt, :, None] * p[nt, None, :]) / dt[nt, None, None]
    m = matrix_sqrt_psd(cov)
    target = np.zeros((N, J, J))
    target[nt] = np.einsum("ni,ij->nij", np.sqrt(lam[nt]), np.eye(J))
    names = tuple(f"{space.channels[j].kind[0].upper()}{j}" for j in chans)
    return MartingaleModel(space, AdaptedProcess(space, M), PredictableProcess(space, m),
                           _time_Q(space), 0, intensity=PredictableProcess(space, lam),
                           continuum_m=PredictableProcess(space, target), names=names)


def build_default_martingale(space: FilteredSpace, channel: int = 0) -> MartingaleModel:
    """Compensated default indicator of one ``default`` channel (``k = 0``)."""
    if space.channels[channel].kind != "default":
        raise TreeError(f"channel {channel} is not a default channel")
    return build_jump_block(space, [channel])


def build_poisson_martingale(space: FilteredSpace, channel: int = 0) -> MartingaleModel:
    if space.channels[channel].kind != "poisson":
        raise TreeError(f"channel {channel} is not a poisson channel")
    return build_jump_block(space, [channel])


def assemble_block_model(continuous: MartingaleModel | None, jump: MartingaleModel | None) -> MartingaleModel:
    """Stack ``M = (M^c, M^d)`` with block-diagonal ``m`` and ``k = dim M^c``."""
    parts = [x for x in (continuous, jump) if x is not None]
    if not parts:
        raise ValueError("need at least one block")
    if len(parts) == 1:
        only = parts[0]
        k = only.n if only is continuous else 0
        return MartingaleModel(only.space, only.M, only.m, only.Q, k, only.intensity,
                               only.continuum_m, only.names)
    if continuous.space is not jump.space:
        raise TreeError("blocks live on different trees")
    if np.max(np.abs(continuous.Q.values - jump.Q.values)) > 1e-14:
        raise TreeError("blocks use different Q")
    sp = continuous.space
    kc, kd = continuous.n, jump.n
    cross = step_covariance(sp, continuous.M.values, jump.M.values)
    r = float(np.max(np.abs(cross), initial=0.0))
    if r > COV_TOL:
        raise TreeError(f"cross covariation between blocks is {r:.3e}")
    M = np.concatenate([continuous.M.values, jump.M.values], axis=1)
    m = np.zeros((sp.n_nodes, kc + kd, kc + kd))
    m[:, :kc, :kc] = continuous.m.values
    m[:, kc:, kc:] = jump.m.values
    target = None
    if jump.continuum_m is not None:
        t = m.copy()
        t[:, kc:, kc:] = jump.continuum_m.values
        target = PredictableProcess(sp, t)
    return MartingaleModel(sp, AdaptedProcess(sp, M), PredictableProcess(sp, m), continuous.Q, kc,
                           jump.intensity, target, continuous.names + jump.names)


def null_model(space: FilteredSpace) -> MartingaleModel:
    """Zero-dimensional driver with ``Q_t = t``; used on deterministic chains."""
    N = space.n_nodes
    return MartingaleModel(space, AdaptedProcess(space, np.zeros((N, 0))),
                           PredictableProcess(space, np.zeros((N, 0, 0))), _time_Q(space), 0)


def block_model(steps: int, horizon: float = 1.0, dims: int = 1, channels=(), scale: float = 1.0) -> MartingaleModel:
    """Canonical tree plus Brownian proxy and jump block in one call."""
    from .tree import canonical_tree

    space = canonical_tree(steps, horizon, dims, channels)
    cont = build_brownian_proxy(space, dims, scale) if dims > 0 else None
    jump = build_jump_block(space) if channels else None
    if cont is None and jump is None:
        raise ValueError("model needs at least one component")
    return assemble_block_model(cont, jump)


def _time_Q(space: FilteredSpace) -> AdaptedProcess:
    return AdaptedProcess(space, space.time_of(np.arange(space.n_nodes)))


def _cumulate(space: FilteredSpace, dX: np.ndarray) -> np.ndarray:
    X = np.zeros_like(dX)
    for k in range(1, space.steps + 1):
        sl = space.slice(k)
        X[sl] = X[space.parent[sl]] + dX[sl]
    return X


def stochastic_integral(model: MartingaleModel, Z) -> np.ndarray:
    """``int_0^t Z* dM`` as a node array (zero at the root)."""
    sp = model.space
    z = as_array(Z)
    dI = np.zeros(sp.n_nodes)
    dI[1:] = np.einsum("ni,ni->n", z[sp.parent[1:]], model.dM[1:])
    return _cumulate(sp, dI)


# -- representation -------------------------------------------------------


def represent_increments(model: MartingaleModel, values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Slice-level representation of ``values`` (on slice ``k+1``) around their conditional mean.

    Returns ``(Z, residual)`` for the slice-``k`` nodes, where ``Z`` solves
    ``X_c - E_nu[X] = Z* dM_c`` in weighted least squares and ``residual`` is
    the max absolute defect per node.
    """
    sp = model.space
    v = np.asarray(values, dtype=float)
    off = sp.slice_start[k + 1]
    base = sp.slice_start[k]
    mean = sp.step_expect(v, k)
    nk = sp.slice_start[k + 1] - base
    Z = np.zeros((nk, model.n))
    res = np.zeros(nk)
    for g in model.plan[k]:
        rows = g.nodes - base
        dv = v[g.children - off] - mean[rows][:, None]       # (G, b)
        z = np.einsum("gnb,gb->gn", g.solve, dv)
        fit = np.einsum("gbn,gn->gb", model.dM[g.children], z)
        Z[rows] = z
        res[rows] = np.max(np.abs(dv - fit), axis=1)
    return Z, res


def represent_martingale(model: MartingaleModel, N, strict: bool = True,
                         tol: float = REP_TOL) -> RepresentationResult:
    """Solve ``N_t = N_0 + int Z* dM`` node by node.

    With ``strict`` a rank deficiency (PRP failure) or a residual above
    ``tol`` raises :class:`PRPViolation` naming the node; otherwise the
    minimum-norm fit is returned with its residual.
    """
    sp = model.space
    n_arr = as_array(N)
    if n_arr.shape != (sp.n_nodes,):
        raise TreeError("N must be a scalar adapted process")
    check_martingale(sp, n_arr, COV_TOL, "N")
    if strict:
        ok, node = model.prp_report()
        if not ok:
            g = next(g for gs in model.plan for g in gs if node in g.nodes)
            i = int(np.flatnonzero(g.nodes == node)[0])
            raise PRPViolation(node, int(g.rank[i]), g.children.shape[1] - 1)
    Z = np.zeros((sp.n_nodes, model.n))
    res = np.zeros(sp.n_nodes)
    for k in range(sp.steps):
        sl = sp.slice(k)
        Z[sl], res[sl] = represent_increments(model, n_arr[sp.slice(k + 1)], k)
    worst = int(np.argmax(res))
    if strict and res[worst] > tol:
        raise PRPViolation(worst, -1, -1, float(res[worst]))
    cond = max((float(g.cond.max()) for gs in model.plan for g in gs if g.cond.size), default=1.0)
    return RepresentationResult(PredictableProcess(sp, Z), float(res.max(initial=0.0)),
                                res[sp.nonterminal], cond, worst)
