"""Slow, independent reference implementations used to freeze expected values.

Nothing here reuses the vectorized kernels of the package: children are found
by scanning the parent array, conditional expectations come from explicit
path products, ``Z`` from ``numpy.linalg.lstsq`` and ``Y`` from bisection.
"""

import numpy as np


def children_lists(parent):
    kids = [[] for _ in parent]
    for node, par in enumerate(parent):
        if par >= 0:
            kids[par].append(node)
    return kids


def node_times(space):
    depth = np.zeros(len(space.parent), dtype=int)
    for node, par in enumerate(space.parent):
        if par >= 0:
            depth[node] = depth[par] + 1
    return space.time_grid[depth], depth


def path_conditional(space, leaf_values):
    """E[X_T | F_nu] for every node nu by summing over descendant leaves."""
    parent = np.asarray(space.parent)
    prob = np.asarray(space.prob)
    N = len(parent)
    _, depth = node_times(space)
    T = depth.max()
    leaves = [i for i in range(N) if depth[i] == T]
    out = np.zeros(N)
    for j, leaf in enumerate(leaves):
        # walk up, accumulating the conditional probability from each ancestor
        w = 1.0
        node = leaf
        out[node] += leaf_values[j]
        while parent[node] >= 0:
            w *= prob[node]
            node = parent[node]
            out[node] += w * leaf_values[j]
    return out


def bisect(f, lo=-1.0, hi=1.0, tol=1e-15, max_iter=400):
    """Root of an increasing scalar function."""
    while f(lo) > 0:
        lo = 2 * lo - 1
    while f(hi) < 0:
        hi = 2 * hi + 1
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def solve_reference(problem):
    """Backward recursion Y_nu = E[Y_c - dD_c] + g(Y_nu, Z_nu) dt node by node."""
    model = problem.model
    sp = model.space
    parent = np.asarray(sp.parent)
    prob = np.asarray(sp.prob)
    kids = children_lists(parent)
    t, depth = node_times(sp)
    N = len(parent)
    M = np.asarray(model.M.values, dtype=float).reshape(N, -1)[:, :model.n]
    Qv = np.asarray(model.Q.values, dtype=float)
    D = np.asarray(problem.D)
    Y = np.zeros(N)
    Z = np.zeros((N, model.n))
    leaves = [i for i in range(N) if depth[i] == depth.max()]
    for j, leaf in enumerate(leaves):
        Y[leaf] = problem.eta[j]
    for node in range(N - 1, -1, -1):
        c = kids[node]
        if not c:
            continue
        p = prob[c]
        x = np.array([Y[ch] - (D[ch] - D[node]) for ch in c])
        mean = float(p @ x)
        if model.n:
            dM = np.array([M[ch] - M[node] for ch in c])
            sq = np.sqrt(p)[:, None]
            z = np.linalg.lstsq(sq * dM, np.sqrt(p) * (x - mean), rcond=None)[0]
        else:
            z = np.zeros(0)
        Z[node] = z
        dq = float(Qv[c[0]] - Qv[node])
        idx = np.array([node])

        def f(y):
            return y - mean - float(problem.generator(model, idx, np.array([y]), z[None, :])[0]) * dq

        Y[node] = bisect(f, mean - 1.0, mean + 1.0)
    return Y, Z
