"""BSDE generators and the m-Lipschitz estimator.

A generator is called as ``g(model, nodes, y, z)`` with ``nodes`` a vector
of non-terminal node ids, ``y`` of shape ``(G,)`` and ``z`` of shape
``(G, n)``; it returns ``(G,)`` values.  ``g.lipschitz(model)`` returns the
declared m-Lipschitz constant or ``None`` when unknown.

Coefficients may be constants, per-time-index schedules or per-node arrays.
Scalar schedules are 1-D with one entry per step; vector schedules are 2-D
``(steps, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GAP_GUARD = 1e-14


def _coef(model, nodes, value, dim: int | None = None) -> np.ndarray:
    """Evaluate a constant / schedule / node-array coefficient at ``nodes``."""
    v = np.asarray(value, dtype=float)
    sp = model.space
    G = len(nodes)
    if dim is None:
        if v.ndim == 0:
            return np.full(G, float(v))
        if v.shape[0] == sp.n_nodes:
            return v[nodes]
        if v.shape[0] == sp.steps:
            return v[sp.time_idx[nodes]]
        raise ValueError(f"scalar coefficient of shape {v.shape} fits neither steps nor nodes")
    if v.ndim == 0:
        return np.full((G, dim), float(v))
    if v.ndim == 1:
        if v.size != dim:
            raise ValueError(f"vector coefficient needs {dim} entries, got {v.size}")
        return np.broadcast_to(v, (G, dim))
    if v.shape[0] == sp.n_nodes:
        return v[nodes]
    if v.shape[0] == sp.steps:
        return v[sp.time_idx[nodes]]
    raise ValueError(f"vector coefficient of shape {v.shape} fits neither steps nor nodes")


def _coef_max(model, value, dim: int | None = None) -> np.ndarray:
    nodes = model.space.nonterminal
    return _coef(model, nodes, value, dim)


def _mz(model, nodes, z) -> np.ndarray:
    return np.einsum("gij,gj->gi", model.m.values[nodes], z)


class Generator:
    """Base class; subclasses implement ``__call__`` and ``lipschitz``."""

    name = "generator"

    def __call__(self, model, nodes, y, z) -> np.ndarray:
        raise NotImplementedError

    def lipschitz(self, model) -> float | None:
        return None

    def at_zero(self, model) -> np.ndarray:
        """``g(., 0, 0)`` on the non-terminal nodes."""
        nodes = model.space.nonterminal
        return self(model, nodes, np.zeros(nodes.size), np.zeros((nodes.size, model.n)))

    def __add__(self, other: "Generator") -> "Generator":
        return Sum((self, other))

    def describe(self) -> dict:
        return {"name": self.name}


@dataclass
class Zero(Generator):
    name = "zero"

    def __call__(self, model, nodes, y, z):
        return np.zeros(len(nodes))

    def lipschitz(self, model):
        return 0.0


@dataclass
class Constant(Generator):
    value: float | np.ndarray = 1.0
    name = "constant"

    def __call__(self, model, nodes, y, z):
        return _coef(model, nodes, self.value)

    def lipschitz(self, model):
        return 0.0

    def describe(self):
        return {"name": self.name, "value": _plain(self.value)}


@dataclass
class Discount(Generator):
    """``g = -rate * y``."""

    rate: float = 0.1
    name = "discount"

    def __call__(self, model, nodes, y, z):
        return -self.rate * np.asarray(y, dtype=float)

    def lipschitz(self, model):
        return abs(float(self.rate))

    def describe(self):
        return {"name": self.name, "rate": self.rate}


@dataclass
class Linear(Generator):
    """``g = a y + b + c* m^c z^c + d* m^d z^d``."""

    a: object = 0.0
    b: object = 0.0
    c: object = 0.0
    d: object = 0.0
    name = "linear"

    def coefficients(self, model, nodes):
        k, nd = model.k, model.n - model.k
        return (_coef(model, nodes, self.a), _coef(model, nodes, self.b),
                _coef(model, nodes, self.c, k), _coef(model, nodes, self.d, nd))

    def __call__(self, model, nodes, y, z):
        a, b, c, d = self.coefficients(model, nodes)
        w = _mz(model, nodes, z)
        k = model.k
        return a * y + b + np.sum(c * w[:, :k], axis=1) + np.sum(d * w[:, k:], axis=1)

    def lipschitz(self, model):
        a, _, c, d = self.coefficients(model, model.space.nonterminal)
        slope = np.sqrt(np.sum(c * c, axis=1) + np.sum(d * d, axis=1))
        return float(max(np.abs(a).max(initial=0.0), slope.max(initial=0.0)))

    def describe(self):
        return {"name": self.name, "a": _plain(self.a), "b": _plain(self.b),
                "c": _plain(self.c), "d": _plain(self.d)}


@dataclass
class LambdaAdmissible(Generator):
    """Default-intensity style driver.

    ``g = const - rate y + theta 1*(m^c z^c) + kappa 1*(m^d z^d) + psi 1*(m^d)^2 z^d``.
    The ``kappa`` term carries the ``sqrt(lambda)`` weight through ``m^d``;
    the ``psi`` term is the jump slope ``psi lambda z`` that pairs with the
    comparison weight ``zeta = psi m^d 1``.
    """

    rate: float = 0.0
    theta: float = 0.0
    kappa: float = 0.0
    psi: float = 0.0
    const: float = 0.0
    name = "lambda_admissible"

    def _grad_w(self, model, nodes) -> np.ndarray:
        k, nd = model.k, model.n - model.k
        grad = np.zeros((len(nodes), model.n))
        grad[:, :k] = self.theta
        if nd:
            md = model.m.values[nodes][:, k:, k:]
            grad[:, k:] = self.kappa + self.psi * md.sum(axis=2)
        return grad

    def __call__(self, model, nodes, y, z):
        w = _mz(model, nodes, z)
        return self.const - self.rate * np.asarray(y) + np.sum(self._grad_w(model, nodes) * w, axis=1)

    def lipschitz(self, model):
        g = self._grad_w(model, model.space.nonterminal)
        return float(max(abs(self.rate), np.sqrt(np.sum(g * g, axis=1)).max(initial=0.0)))

    def describe(self):
        return {"name": self.name, "rate": self.rate, "theta": self.theta, "kappa": self.kappa,
                "psi": self.psi, "const": self.const}


@dataclass
class CustomPolynomial(Generator):
    """Linear driver whose coefficients are polynomials in time.

    ``g = P_0(t) + P_y(t) y + sum_j P_j(t) (m z)_j`` with coefficient lists in
    increasing powers of ``t``.
    """

    const: tuple = (0.0,)
    y: tuple = (0.0,)
    z: tuple = ()
    name = "custom_polynomial"

    def _eval(self, model, nodes):
        t = model.space.time_of(nodes)

        def poly(coeffs):
            return np.polynomial.polynomial.polyval(t, np.asarray(coeffs, dtype=float)) if len(coeffs) else np.zeros_like(t)

        zc = np.zeros((len(nodes), model.n))
        for j, coeffs in enumerate(self.z[:model.n]):
            zc[:, j] = poly(coeffs)
        return poly(self.const), poly(self.y), zc

    def __call__(self, model, nodes, y, z):
        c0, cy, cz = self._eval(model, nodes)
        return c0 + cy * y + np.sum(cz * _mz(model, nodes, z), axis=1)

    def lipschitz(self, model):
        _, cy, cz = self._eval(model, model.space.nonterminal)
        return float(max(np.abs(cy).max(initial=0.0), np.sqrt(np.sum(cz * cz, axis=1)).max(initial=0.0)))

    def describe(self):
        return {"name": self.name, "const": list(self.const), "y": list(self.y), "z": [list(r) for r in self.z]}


@dataclass
class Nonlinear(Generator):
    """``g = b + a sin(y) + sum_j c_j tanh((m z)_j)``."""

    a: float = 0.0
    b: float = 0.0
    c: object = 0.0
    name = "nonlinear"

    def _c(self, model):
        return np.broadcast_to(np.asarray(self.c, dtype=float), (model.n,))

    def __call__(self, model, nodes, y, z):
        w = _mz(model, nodes, z)
        return self.b + self.a * np.sin(y) + np.tanh(w) @ self._c(model)

    def lipschitz(self, model):
        return float(max(abs(self.a), np.linalg.norm(self._c(model))))

    def describe(self):
        return {"name": self.name, "a": self.a, "b": self.b, "c": _plain(self.c)}


@dataclass
class Bump(Generator):
    """Nonnegative ``h0 + h1 |sin(y + phase)|``; used as ``g^1 = g^2 + h``."""

    h0: float = 0.0
    h1: float = 0.0
    phase: float = 0.0
    name = "bump"

    def __call__(self, model, nodes, y, z):
        return self.h0 + self.h1 * np.abs(np.sin(np.asarray(y) + self.phase))

    def lipschitz(self, model):
        return abs(self.h1)


@dataclass
class Hinge(Generator):
    """``kappa * max(y - ref_nu - offset, 0)`` with ``ref`` a node array."""

    kappa: float
    ref: np.ndarray = field(repr=False)
    offset: float = 1.0
    name = "hinge"

    def __call__(self, model, nodes, y, z):
        return self.kappa * np.maximum(np.asarray(y) - np.asarray(self.ref)[nodes] - self.offset, 0.0)

    def lipschitz(self, model):
        return abs(self.kappa)


@dataclass
class Sum(Generator):
    parts: tuple
    name = "sum"

    def __call__(self, model, nodes, y, z):
        return sum(g(model, nodes, y, z) for g in self.parts)

    def lipschitz(self, model):
        ls = [g.lipschitz(model) for g in self.parts]
        return None if any(v is None for v in ls) else float(sum(ls))

    def describe(self):
        return {"name": self.name, "parts": [g.describe() for g in self.parts]}


@dataclass
class Shifted(Generator):
    """``g(t, y + D_t, z)``: the generator of the D-transformed problem."""

    base: Generator
    D: np.ndarray = field(repr=False)
    name = "shifted"

    def __call__(self, model, nodes, y, z):
        return self.base(model, nodes, np.asarray(y) + np.asarray(self.D)[nodes], z)

    def lipschitz(self, model):
        return self.base.lipschitz(model)

    def describe(self):
        return {"name": self.name, "base": self.base.describe()}


@dataclass
class Frozen(Generator):
    """``g(t, w_t, v_t)`` for fixed processes ``(w, v)``: the Picard input."""

    base: Generator
    w: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    name = "frozen"

    def __call__(self, model, nodes, y, z):
        return self.base(model, nodes, np.asarray(self.w)[nodes], np.asarray(self.v)[nodes])

    def lipschitz(self, model):
        return 0.0


REGISTRY = {
    "zero": Zero,
    "constant": Constant,
    "discount": Discount,
    "linear": Linear,
    "lambda_admissible": LambdaAdmissible,
    "custom_polynomial": CustomPolynomial,
    "nonlinear": Nonlinear,
}


def make_generator(name: str, **params) -> Generator:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(REGISTRY)}") from None
    if cls is CustomPolynomial:
        params = {k: (tuple(tuple(r) for r in v) if k == "z" else tuple(v)) for k, v in params.items()}
    return cls(**params)


# -- Lipschitz estimation -------------------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    estimate: float
    declared: float | None
    violation: bool
    pairs_used: int
    pairs_skipped: int
    worst_node: int


def verify_m_lipschitz(g: Generator, model, samples: int = 200, seed: int = 0,
                       declared: float | None = None, spread: float = 2.0) -> LipschitzEstimate:
    """Sampled lower bound on the m-Lipschitz constant of ``g``.

    Three probe families are used at random non-terminal nodes: free pairs,
    pairs differing only in ``y``, and pairs whose ``z`` gap points along
    ``m^+ m^+ grad_z g`` (the steepest direction in ``m z`` coordinates).
    Pairs with both gaps below ``1e-14`` are skipped.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if declared is None:
        declared = g.lipschitz(model)
    rng = np.random.default_rng(seed)
    nt = model.space.nonterminal
    n = model.n
    nodes = rng.choice(nt, size=samples)
    y1 = rng.normal(0.0, spread, samples)
    z1 = rng.normal(0.0, spread, (samples, n))
    m = model.m.values[nodes]

    # free pairs
    y2 = rng.normal(0.0, spread, samples)
    z2 = rng.normal(0.0, spread, (samples, n))
    # y-only pairs
    y3 = y1 + rng.normal(0.0, spread, samples)
    # gradient-direction pairs
    h = 1e-6
    grad = np.zeros((samples, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        grad[:, j] = (g(model, nodes, y1, z1 + e) - g(model, nodes, y1, z1 - e)) / (2 * h)
    mp = np.linalg.pinv(m)
    direction = np.einsum("gij,gj->gi", mp, np.einsum("gij,gj->gi", mp, grad))
    size = rng.uniform(0.1, 1.0, samples)[:, None]
    z4 = z1 + direction * size

    g1 = g(model, nodes, y1, z1)
    dg = np.concatenate([
        np.abs(g1 - g(model, nodes, y2, z2)),
        np.abs(g1 - g(model, nodes, y3, z1)),
        np.abs(g1 - g(model, nodes, y1, z4)),
    ])
    gy = np.concatenate([np.abs(y1 - y2), np.abs(y1 - y3), np.zeros(samples)])
    gz = np.concatenate([
        np.linalg.norm(np.einsum("gij,gj->gi", m, z1 - z2), axis=1),
        np.zeros(samples),
        np.linalg.norm(np.einsum("gij,gj->gi", m, z1 - z4), axis=1),
    ])
    ok = (gy >= GAP_GUARD) | (gz >= GAP_GUARD)
    ratio = np.zeros(dg.size)
    ratio[ok] = dg[ok] / (gy[ok] + gz[ok])
    i = int(np.argmax(ratio)) if ratio.size else 0
    est = float(ratio[i]) if ok.any() else 0.0
    violation = declared is not None and est > declared + 1e-9
    return LipschitzEstimate(est, declared, bool(violation), int(ok.sum()), int((~ok).sum()),
                             int(np.tile(nodes, 3)[i]))


def _plain(v):
    a = np.asarray(v)
    return float(a) if a.ndim == 0 else a.tolist()
