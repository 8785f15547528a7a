"""Seeded random models, problems and comparison pairs for sweeps and tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .generators import Bump, Discount, Generator, Hinge, LambdaAdmissible, Linear, Nonlinear, Sum
from .linear import LinearCoefficients, build_exponential_bundle
from .models import MartingaleModel, _cumulate, block_model, build_brownian_proxy, null_model
from .solver import BSDEProblem, solve_backward_exact
from .tree import constant_channel, random_tree, uniform_tree

MAX_SAMPLE_NODES = 30_000


def _depth_for(branching: int, max_depth: int, max_nodes: int) -> int:
    if branching <= 1:
        return max_depth
    d = int(np.floor(np.log(max_nodes * (branching - 1) + 1) / np.log(branching))) - 1
    return max(1, min(max_depth, d))


def random_model(rng: np.random.Generator, max_depth: int = 10, max_branching: int = 4,
                 max_n: int = 3, max_nodes: int = MAX_SAMPLE_NODES, horizon: float = 1.0) -> MartingaleModel:
    """Random block model with PRP: either a random-probability walk or a canonical tree.

    Branching never exceeds ``max_branching`` and the dimension never exceeds
    ``max_n``; depth is capped so the tree stays below ``max_nodes``.
    """
    top = min(max_n, max_branching - 1)
    if rng.random() < 0.35:
        dims = int(rng.integers(1, top + 1))
        steps = int(rng.integers(1, _depth_for(dims + 1, max_depth, max_nodes) + 1))
        space = random_tree(rng, steps, dims + 1, horizon, min_prob=0.1)
        return build_brownian_proxy(space, dims, scale=float(rng.uniform(0.5, 1.5)))
    while True:
        dims = int(rng.integers(0, top + 1))
        n_ch = int(rng.integers(0, top - dims + 1))
        if dims + n_ch >= 1:
            break
    branching = (dims + 1 if dims else 1) + n_ch
    steps = int(rng.integers(1, _depth_for(branching, max_depth, max_nodes) + 1))
    dt = horizon / steps
    channels = []
    for _ in range(n_ch):
        kind = "default" if rng.random() < 0.5 else "poisson"
        lam = float(rng.uniform(0.1, 0.6 / max(dt, 1e-12) / max(n_ch, 1)))
        lam = min(lam, 3.0)
        channels.append(constant_channel(kind, lam, steps))
    return block_model(steps, horizon, dims, channels, scale=float(rng.uniform(0.5, 1.5)))


def random_terminal(rng: np.random.Generator, model: MartingaleModel, scale: float = 1.0) -> np.ndarray:
    sp = model.space
    nl = sp.slice(sp.steps)
    return rng.normal(0.0, scale, nl.stop - nl.start)


def random_D(rng: np.random.Generator, model: MartingaleModel, scale: float = 0.1) -> np.ndarray:
    """Adapted finite-variation process: running sum of node-wise random increments."""
    sp = model.space
    inc = rng.normal(0.0, scale, sp.n_nodes)
    return _cumulate(sp, inc)


def monotone_increase(rng: np.random.Generator, model: MartingaleModel, scale: float = 0.05) -> np.ndarray:
    """Nondecreasing adapted process starting at zero."""
    sp = model.space
    inc = np.abs(rng.normal(0.0, scale, sp.n_nodes))
    inc[0] = 0.0
    return _cumulate(sp, inc)


def random_generator(rng: np.random.Generator, model: MartingaleModel, max_L: float = 1.5,
                     kind: str | None = None) -> Generator:
    """Lipschitz generator with ``L * max dQ < 1`` so the implicit step is well posed."""
    dq = float(model.dQ.values.max(initial=0.0))
    cap = max_L if dq == 0 else min(max_L, 0.9 / dq)
    n = model.n
    kind = kind or str(rng.choice(["nonlinear", "lambda", "linear"]))
    if kind == "nonlinear":
        a = float(rng.uniform(-cap, cap))
        c = rng.uniform(-1.0, 1.0, n)
        if n:
            c *= rng.uniform(0, cap) / max(np.linalg.norm(c), 1e-12)
        return Nonlinear(a, float(rng.normal()), c)
    if kind == "lambda":
        s = cap / 2.0
        return LambdaAdmissible(rate=float(rng.uniform(0, s)), theta=float(rng.uniform(-s, s)) / max(np.sqrt(n), 1),
                                kappa=float(rng.uniform(-s, s)) / max(np.sqrt(n), 1), psi=0.0,
                                const=float(rng.normal()))
    if kind == "linear":
        return random_linear_coefficients(rng, model, cap).generator()
    raise ValueError(f"unknown generator kind {kind!r}")


def random_linear_coefficients(rng: np.random.Generator, model: MartingaleModel, cap: float = 1.0) -> LinearCoefficients:
    """Node-array coefficients with ``|a| <= cap`` and a small ``(c, d)`` so the (c; d) norm stays under ``cap``."""
    sp = model.space
    N = sp.n_nodes
    k, nj = model.k, model.n_jump
    a = rng.uniform(-cap, cap, N)
    b = rng.normal(0.0, 1.0, N)
    c = rng.uniform(-1, 1, (N, k))
    d = rng.uniform(-1, 1, (N, nj))
    if k + nj:
        w = np.sqrt((c * c).sum(1) + (d * d).sum(1))
        f = rng.uniform(0, 0.5 * cap, N) / np.maximum(w, 1e-12)
        c *= f[:, None]
        d *= f[:, None]
    return LinearCoefficients.build(model, a, b, c, d)


def random_problem(rng: np.random.Generator, model: MartingaleModel | None = None, with_D: bool | None = None,
                   kind: str | None = None, **model_kw) -> BSDEProblem:
    model = random_model(rng, **model_kw) if model is None else model
    g = random_generator(rng, model, kind=kind)
    eta = random_terminal(rng, model)
    if with_D is None:
        with_D = rng.random() < 0.5
    D = random_D(rng, model) if with_D else None
    return BSDEProblem(model, g, eta, D)


def random_jump_model(rng: np.random.Generator, max_steps: int = 6) -> MartingaleModel:
    """Canonical tree with at least one jump channel (for the linear checks)."""
    dims = int(rng.integers(0, 2))
    n_ch = int(rng.integers(1, 3))
    steps = int(rng.integers(2, max_steps + 1))
    kinds = rng.choice(["default", "poisson"], n_ch)
    hi = min(1.5, 0.8 * steps / n_ch)
    channels = [constant_channel(str(kd), float(rng.uniform(0.2, hi)), steps) for kd in kinds]
    return block_model(steps, 1.0, dims, channels, scale=float(rng.uniform(0.5, 1.5)))


def random_linear_problem(rng: np.random.Generator, model: MartingaleModel | None = None):
    """Linear problem on a jump model; returns ``(problem, coefficients)``."""
    model = random_jump_model(rng) if model is None else model
    dq = float(model.dQ.values.max())
    coeffs = random_linear_coefficients(rng, model, min(1.0, 0.9 / dq))
    # shrink (c, d) until the augmented martingale keeps jumps above -1, so q > 0
    for _ in range(30):
        if build_exponential_bundle(model, coeffs).positive:
            break
        coeffs = replace(coeffs, c=0.5 * coeffs.c, d=0.5 * coeffs.d)
    eta = random_terminal(rng, model)
    D = random_D(rng, model) if rng.random() < 0.7 else None
    return BSDEProblem(model, coeffs.generator(), eta, D), coeffs


def discount_chain(steps: int, rate: float = 0.1, horizon: float = 1.0) -> BSDEProblem:
    """``g = -rate y``, ``eta = 1`` on a deterministic chain: ``Y0 -> exp(-rate T)``."""
    model = null_model(uniform_tree(steps, horizon, branching=1))
    return BSDEProblem(model, Discount(rate), 1.0)


# -- comparison pairs -----------------------------------------------------


@dataclass
class ComparisonPair:
    p1: BSDEProblem
    p2: BSDEProblem
    zeta: np.ndarray
    psi: float
    note: str = ""


def lambda_zeta(model: MartingaleModel, kappa: float, psi: float) -> np.ndarray:
    """Weight matching the jump gradient ``kappa 1 + psi m^d 1`` of LambdaAdmissible."""
    md = model.md
    N = model.space.n_nodes
    return kappa + psi * md.sum(axis=2) if model.n_jump else np.zeros((N, 0))


def comparison_pair(rng: np.random.Generator, model: MartingaleModel | None = None,
                    psi: float | None = None, max_steps: int = 6) -> ComparisonPair:
    """Hypothesis-targeting pair: ``g^1 = g^2 + h`` with ``h >= 0``, ``eta^1 >= eta^2``, ``D^1 - D^2`` nonincreasing.

    ``g^2`` depends on ``y`` and on the continuous block through a nonlinear
    part and on the jump block only linearly, so ``b = h`` with the matching
    ``zeta``.  The jump condition is not guaranteed; callers check it.
    """
    if model is None:
        dims = int(rng.integers(1, 3))
        n_ch = int(rng.integers(0, 2))
        steps = int(rng.integers(2, max_steps + 1))
        channels = [constant_channel(str(rng.choice(["default", "poisson"])), float(rng.uniform(0.2, 1.0)), steps)
                    for _ in range(n_ch)]
        model = block_model(steps, 1.0, dims, channels, scale=float(rng.uniform(0.7, 1.3)))
    k = model.k
    psi = float(rng.uniform(-0.6, 1.0)) if psi is None else float(psi)
    kappa = float(rng.uniform(-0.3, 0.3))
    c = np.zeros(model.n)
    c[:k] = rng.uniform(-0.3, 0.3, k)
    f = Nonlinear(float(rng.uniform(-0.5, 0.5)), float(rng.normal(0, 0.3)), c)
    jump = LambdaAdmissible(rate=float(rng.uniform(0, 0.3)), theta=float(rng.uniform(-0.3, 0.3)),
                            kappa=kappa, psi=psi, const=0.0)
    g2 = Sum((f, jump))
    h = Bump(float(rng.uniform(0, 0.2)), float(rng.uniform(0, 0.2)), float(rng.uniform(0, np.pi)))
    g1 = Sum((g2, h))
    eta2 = random_terminal(rng, model)
    eta1 = eta2 + np.abs(rng.normal(0, 0.1, eta2.size)) * (rng.random(eta2.size) < 0.5)
    D2 = random_D(rng, model)
    D1 = D2 - monotone_increase(rng, model) * (rng.random() < 0.7)
    return ComparisonPair(BSDEProblem(model, g1, eta1, D1), BSDEProblem(model, g2, eta2, D2),
                          lambda_zeta(model, kappa, psi), psi)


def single_default_pair(psi: float, steps: int = 8, intensity: float = 0.5, seed: int = 0,
                  dims: int = 1) -> ComparisonPair:
    """One Brownian proxy plus one default: ``g^2`` has jump slope ``psi (m^d)^2 z^d``, ``g^1 = g^2 + h``."""
    rng = np.random.default_rng(seed)
    model = block_model(steps, 1.0, dims, [constant_channel("default", intensity, steps)], 1.0)
    g2 = LambdaAdmissible(rate=0.3, theta=0.2, kappa=0.0, psi=psi, const=0.05)
    g1 = Sum((g2, Bump(0.1, 0.2, 0.3)))
    eta2 = random_terminal(rng, model)
    eta1 = eta2 + 0.1 * np.abs(rng.normal(size=eta2.size))
    D2 = random_D(rng, model)
    D1 = D2 - monotone_increase(rng, model)
    from .comparison import zeta_psi

    return ComparisonPair(BSDEProblem(model, g1, eta1, D1), BSDEProblem(model, g2, eta2, D2),
                          zeta_psi(model, psi), psi, note="single default")


def strict_equal_pair(rng: np.random.Generator, model: MartingaleModel | None = None) -> ComparisonPair:
    """``g^1 = g^2 + kappa (y - Y^2 - 1)^+``: different generators with ``Y^1 = Y^2`` forced."""
    model = random_jump_model(rng, 5) if model is None else model
    g2 = random_generator(rng, model, max_L=0.8, kind="nonlinear")
    c = np.asarray(g2.c, dtype=float).copy()
    c[model.k:] = 0.0
    g2 = Nonlinear(g2.a, g2.b, c)
    p2 = BSDEProblem(model, g2, random_terminal(rng, model), random_D(rng, model))
    s2 = solve_backward_exact(p2)
    g1 = Sum((g2, Hinge(float(rng.uniform(0.1, 0.8)), s2.Y.values.copy(), 1.0)))
    p1 = BSDEProblem(model, g1, p2.eta, p2.D)
    return ComparisonPair(p1, p2, np.zeros((model.space.n_nodes, model.n_jump)), 0.0, note="equal")


def strict_gap_pair(rng: np.random.Generator, eps: float = 1e-3, model: MartingaleModel | None = None) -> ComparisonPair:
    """Same data except ``eta^1 = eta^2 + eps`` on one leaf."""
    pair = strict_equal_pair(rng, model)
    eta1 = pair.p1.eta.copy()
    eta1[int(rng.integers(eta1.size))] += eps
    pair.p1 = BSDEProblem(pair.p1.model, pair.p1.generator, eta1, pair.p1.D)
    pair.note = "gap"
    return pair


def falsification_search(rng: np.random.Generator, trials: int = 50) -> dict:
    """Look for ``Y^1_0 = Y^2_0`` with ``b > 0`` on a set of positive ``mu_Q`` mass.

    Each trial builds a pair whose ``b`` is a strictly positive bump on one
    random non-terminal node; strict comparison says ``Y^1_0 > Y^2_0`` then.
    Returns the number of trials and the smallest observed ``Y^1_0 - Y^2_0``.
    """
    from .comparison import verify_comparison

    found = []
    smallest = np.inf
    for _ in range(trials):
        pair = strict_equal_pair(rng)
        model = pair.p1.model
        nt = model.space.nonterminal
        heavy = nt[model.space.uncond[nt] >= 1e-3]
        node = int(rng.choice(heavy))
        bump = np.zeros(model.space.n_nodes)
        bump[node] = float(rng.uniform(1e-3, 1e-1))
        g1 = Sum((pair.p1.generator, Linear(0.0, bump, 0.0, 0.0)))
        p1 = BSDEProblem(model, g1, pair.p1.eta, pair.p1.D)
        rep = verify_comparison(p1, pair.p2, pair.zeta)
        if rep.verdict != "pass":
            continue
        smallest = min(smallest, rep.gap0)
        if abs(rep.gap0) < 1e-12:
            found.append(node)
    return {"trials": trials, "found": len(found), "min_gap0": float(smallest)}
