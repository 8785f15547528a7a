"""Exact discrete stochastic calculus on a :class:`FilteredSpace`.

Everything here is a finite sum over the tree: conditional expectations,
brackets, compensators and the beta-weighted norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import AdaptedProcess, FilteredSpace, PredictableProcess, TreeError, as_array

MARTINGALE_TOL = 1e-10


class NotAMartingale(ValueError):
    pass


def conditional_expectation(space: FilteredSpace, X, k: int, from_slice: int | None = None) -> np.ndarray:
    """Values of ``E[X | G_{t_k}]`` on slice ``k``.

    ``X`` is either a full node array (the slice ``from_slice`` is used,
    terminal by default) or the values on slice ``from_slice`` only.
    """
    K = space.steps
    j = K if from_slice is None else from_slice
    if not 0 <= k <= K:
        raise TreeError(f"time index {k} out of range 0..{K}")
    if not k <= j <= K:
        raise TreeError(f"cannot condition slice {j} values on later time {k}")
    v = as_array(X)
    sl = space.slice(j)
    if v.shape[0] == space.n_nodes:
        v = v[sl]
    elif v.shape[0] != sl.stop - sl.start:
        raise TreeError(f"values do not match slice {j} ({sl.stop - sl.start} nodes)")
    for i in range(j - 1, k - 1, -1):
        v = space.step_expect(v, i)
    return v


def expectation(space: FilteredSpace, X, from_slice: int | None = None):
    out = conditional_expectation(space, X, 0, from_slice)[0]
    return float(out) if np.ndim(out) == 0 else out


def martingale_from_terminal(space: FilteredSpace, terminal) -> np.ndarray:
    """The martingale ``E_t[X_T]`` as a full node array."""
    term = as_array(terminal)
    sl = space.slice(space.steps)
    if term.shape[0] == space.n_nodes:
        term = term[sl]
    out = np.zeros((space.n_nodes,) + term.shape[1:])
    out[sl] = term
    for k in range(space.steps - 1, -1, -1):
        out[space.slice(k)] = space.step_expect(out[space.slice(k + 1)], k)
    return out


def increments(space: FilteredSpace, X) -> np.ndarray:
    """``X_c - X_parent(c)`` for every non-root node ``c``; row 0 holds ``X_0``."""
    v = as_array(X)
    out = v.copy()
    out[1:] = v[1:] - v[space.parent[1:]]
    return out


def step_mean(space: FilteredSpace, X) -> np.ndarray:
    """``E_nu[X_c - X_nu]`` at every non-terminal node (terminal rows zero)."""
    v = as_array(X)
    dv = increments(space, v)
    out = np.zeros_like(v)
    for k in range(space.steps):
        out[space.slice(k)] = space.step_expect(dv[space.slice(k + 1)], k)
    return out


def martingale_residual(space: FilteredSpace, X) -> np.ndarray:
    """Absolute one-step drift per non-terminal node (max over components)."""
    r = np.abs(step_mean(space, X))
    if r.ndim > 1:
        r = r.reshape(r.shape[0], -1).max(axis=1, initial=0.0)
    return r[space.nonterminal]


def check_martingale(space: FilteredSpace, X, tol: float = MARTINGALE_TOL, what: str = "process") -> None:
    r = martingale_residual(space, X)
    if r.size and r.max() > tol:
        node = int(np.argmax(r))
        raise NotAMartingale(f"{what} has conditional drift {r[node]:.3e} at node {node}")


def step_covariance(space: FilteredSpace, X, Y=None) -> np.ndarray:
    """One-step conditional covariance ``E_nu[dX dY^T]`` of martingale increments.

    Returns an array indexed by node (terminal rows zero) of shape
    ``(N, dx, dy)``; scalar inputs are promoted to dimension one.
    """
    x = _vec(as_array(X))
    y = x if Y is None else _vec(as_array(Y))
    dx, dy = increments(space, x), increments(space, y)
    out = np.zeros((space.n_nodes, x.shape[1], y.shape[1]))
    for k in range(space.steps):
        sl1 = space.slice(k + 1)
        prod = dx[sl1][:, :, None] * dy[sl1][:, None, :]
        out[space.slice(k)] = space.step_expect(prod, k)
    return out


def predictable_covariation(space: FilteredSpace, X, Y=None, tol: float = MARTINGALE_TOL) -> AdaptedProcess:
    """Matrix-valued ``<X, Y>`` with ``<X, Y>_0 = 0``.

    The increment on ``(t_k, t_{k+1}]`` is the conditional covariance of the
    increments, so it is known at ``t_k``.
    """
    check_martingale(space, X, tol, "X")
    if Y is not None:
        check_martingale(space, Y, tol, "Y")
    cov = step_covariance(space, X, Y)
    out = np.zeros_like(cov)
    for k in range(space.steps):
        sl, sl1 = space.slice(k), space.slice(k + 1)
        out[sl1] = space.spread(out[sl] + cov[sl], k)
    return AdaptedProcess(space, out)


def quadratic_covariation(space: FilteredSpace, X, Y=None) -> AdaptedProcess:
    """Pathwise ``[X, Y]_t = X_0 Y_0^T + sum of dX dY^T`` (the time-0 jump included)."""
    xa, ya = as_array(X), as_array(X if Y is None else Y)
    if xa.shape[0] != ya.shape[0]:
        raise TreeError("processes live on different trees")
    scalar = xa.ndim == 1 and ya.ndim == 1
    x, y = _vec(xa), _vec(ya)
    dx, dy = increments(space, x), increments(space, y)
    prod = dx[:, :, None] * dy[:, None, :]
    out = prod.copy()
    for k in range(space.steps):
        sl, sl1 = space.slice(k), space.slice(k + 1)
        out[sl1] = space.spread(out[sl], k) + prod[sl1]
    return AdaptedProcess(space, out[:, 0, 0] if scalar else out)


def doleans_measure(space: FilteredSpace, A, Q, bound: float | None = None) -> float:
    """``mu_Q(A) = E[ int 1_A dQ ]`` with ``A`` read at the step's left node."""
    a = as_array(A).astype(float)
    q = as_array(Q)
    if q.shape != (space.n_nodes,):
        raise TreeError("Q must be a scalar adapted process")
    if abs(q[0]) > 1e-15:
        raise TreeError("Q must start at 0")
    dq = increments(space, q)[1:]
    if np.any(dq < -1e-15):
        node = int(np.argmin(dq)) + 1
        raise TreeError(f"Q decreases into node {node}")
    if bound is not None and q.max() > bound + 1e-12:
        raise TreeError(f"Q exceeds its bound {bound}")
    par = space.parent[1:]
    return float(np.sum(space.uncond[1:] * a[par] * dq))


@dataclass(frozen=True)
class Projection:
    """Dual predictable projection ``D^p`` of ``D`` and the martingale ``D - D^p``."""

    compensator: AdaptedProcess
    martingale: AdaptedProcess
    increments: PredictableProcess


def dual_predictable_projection(space: FilteredSpace, D) -> Projection:
    """Compensator with ``D^p_0 = D_0`` and increments ``E_nu[dD]``."""
    d = as_array(D)
    drift = step_mean(space, d)
    comp = np.zeros_like(d)
    comp[0] = d[0]
    for k in range(space.steps):
        sl, sl1 = space.slice(k), space.slice(k + 1)
        comp[sl1] = space.spread(comp[sl] + drift[sl], k)
    return Projection(AdaptedProcess(space, comp), AdaptedProcess(space, d - comp),
                      PredictableProcess(space, drift[space.nonterminal]))


@dataclass(frozen=True)
class NormReport:
    """Squared beta-weighted norms of a pair ``(Y, Z)``.

    Stored values are ``||.||^2 * exp(-log_scale)``; ``log_scale`` is nonzero
    only when the weights were normalized to avoid overflow.
    """

    beta: float
    s2: float
    h2: float
    l2m: float
    log_scale: float = 0.0

    @property
    def pair(self) -> float:
        """``||Y||^2_S + ||Z||^2_L`` (the Picard norm squared)."""
        return self.s2 + self.l2m

    @property
    def h_pair(self) -> float:
        """``||Y||_H + ||Z||_L`` (unsquared)."""
        return float(np.sqrt(self.h2) + np.sqrt(self.l2m))

    def true_value(self, name: str) -> float:
        return float(getattr(self, name) * np.exp(self.log_scale))


def weighted_norms(Y, Z, model, beta: float, normalize: bool = False) -> NormReport:
    """Exact ``S^2_beta``, ``H^2_beta`` and ``L^2_beta(M)`` norms (squared).

    ``model`` supplies ``space``, ``m``, ``Q``, ``dQ`` and ``C_Q``.  Either of
    ``Y``/``Z`` may be ``None``.  With ``normalize`` the weights are
    ``exp(beta (Q - C_Q))`` so large ``beta`` does not overflow.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    space = model.space
    q = model.Q.values
    shift = beta * model.C_Q if normalize else 0.0
    w = np.exp(beta * q - shift)
    nt = space.nonterminal
    dq = model.dQ.values[nt]
    s2 = h2 = l2m = 0.0
    if Y is not None:
        y = as_array(Y)
        val = w * y * y
        run = val.copy()
        for k in range(1, space.steps + 1):
            sl = space.slice(k)
            run[sl] = np.maximum(run[space.parent[sl]], val[sl])
        leaves = space.slice(space.steps)
        s2 = float(np.sum(space.uncond[leaves] * run[leaves]))
        h2 = float(np.sum(space.uncond[nt] * val[nt] * dq))
    if Z is not None:
        z = as_array(Z)
        mz = np.einsum("nij,nj->ni", model.m.values[nt], z[nt])
        l2m = float(np.sum(space.uncond[nt] * w[nt] * np.sum(mz * mz, axis=1) * dq))
    return NormReport(float(beta), s2, h2, l2m, shift)


def _vec(x: np.ndarray) -> np.ndarray:
    return x[:, None] if x.ndim == 1 else x
