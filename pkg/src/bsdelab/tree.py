"""Finite filtered probability spaces stored as non-recombining scenario trees.

Nodes are numbered in breadth-first order, so every time slice is a contiguous
block of ids and the children of a node are a contiguous block of the next
slice.  All conditional expectations are finite weighted sums over children.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_NODES = 1_000_000
PROB_TOL = 1e-12


class TreeError(ValueError):
    """Raised for malformed trees or processes that do not fit a tree."""


@dataclass(frozen=True)
class JumpChannel:
    """One jump source of a canonical tree.

    ``kind`` is ``"default"`` (single jump, absorbed afterwards) or
    ``"poisson"`` (at most one jump per step, never absorbed).  ``intensity``
    holds one value per step.
    """

    kind: str
    intensity: tuple[float, ...]

    def rate(self, k: int) -> float:
        return self.intensity[k]


class FilteredSpace:
    """Scenario tree with time grid, transition probabilities and filtration.

    Parameters
    ----------
    time_grid : sequence of float
        Strictly increasing grid ``0 = t_0 < ... < t_K = T``.
    parent : sequence of int
        Parent id per node, ``-1`` for the root.  Must be breadth-first
        ordered with contiguous children.
    prob : sequence of float
        One-step transition probability from the parent (root: 1).
    labels : sequence of str, optional
        Branch labels used by the canonical model builders (``"w<i>"`` for
        diffusion branches, ``"J<j>"`` for a jump of channel ``j``).
    """

    def __init__(
        self,
        time_grid: Sequence[float],
        parent: Sequence[int],
        prob: Sequence[float],
        labels: Sequence[str] | None = None,
        channels: Sequence[JumpChannel] = (),
        diffusion_dims: int = 0,
    ):
        self.time_grid = np.asarray(time_grid, dtype=float)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.prob = np.asarray(prob, dtype=float)
        self.labels = None if labels is None else tuple(labels)
        self.channels = tuple(channels)
        self.diffusion_dims = int(diffusion_dims)
        self._build_index()
        for arr in (self.time_grid, self.parent, self.prob, self.time_idx,
                    self.first_child, self.n_children, self.uncond, self.slice_start):
            arr.flags.writeable = False

    # -- construction -----------------------------------------------------

    def _build_index(self) -> None:
        n = self.parent.size
        if n == 0:
            raise TreeError("empty tree")
        if n > MAX_NODES:
            raise TreeError(f"tree has {n} nodes, above the {MAX_NODES} node guardrail")
        if self.prob.shape != (n,):
            raise TreeError("prob must have one entry per node")
        if self.labels is not None and len(self.labels) != n:
            raise TreeError("labels must have one entry per node")
        grid = self.time_grid
        if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise TreeError("time grid must start at 0 and be strictly increasing")
        if self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise TreeError("node 0 must be the unique root")
        if np.any(self.parent[1:] >= np.arange(1, n)):
            raise TreeError("nodes must be listed in breadth-first order")
        if np.any(np.diff(self.parent[1:]) < 0):
            raise TreeError("children of a node must be contiguous and ordered by parent")

        counts = np.bincount(self.parent[1:], minlength=n).astype(np.int64)
        time_idx = np.zeros(n, dtype=np.int64)
        lo, hi, k = 0, 1, 0
        while hi < n:
            width = int(counts[lo:hi].sum())
            if width == 0:
                raise TreeError(f"nodes after id {hi} are unreachable from the root")
            time_idx[hi:hi + width] = k + 1
            lo, hi, k = hi, hi + width, k + 1
        if np.any(time_idx[1:] != time_idx[self.parent[1:]] + 1):
            raise TreeError("nodes must be sorted by time index")
        K = grid.size - 1
        if time_idx[-1] != K:
            raise TreeError(f"tree depth {time_idx[-1]} does not match time grid with {K} steps")
        self.time_idx = time_idx
        self.slice_start = np.searchsorted(time_idx, np.arange(K + 2)).astype(np.int64)

        first = np.full(n, -1, dtype=np.int64)
        has = counts > 0
        # breadth-first order with contiguous children: first child = 1 + children before
        starts = 1 + np.concatenate(([0], np.cumsum(counts)[:-1]))
        first[has] = starts[has]
        nonterminal = time_idx < K
        if np.any(counts[nonterminal] == 0):
            bad = int(np.flatnonzero(nonterminal & (counts == 0))[0])
            raise TreeError(f"non-terminal node {bad} has no children")
        if np.any(counts[~nonterminal] > 0):
            raise TreeError("terminal nodes cannot have children")
        self.n_children = counts
        self.first_child = first

        if np.any(self.prob[1:] <= 0.0):
            bad = int(np.flatnonzero(self.prob[1:] <= 0.0)[0]) + 1
            raise TreeError(f"transition probability of node {bad} is not strictly positive")
        sums = np.bincount(self.parent[1:], weights=self.prob[1:], minlength=n)
        off = np.abs(sums[nonterminal] - 1.0)
        if off.size and off.max() > PROB_TOL:
            bad = int(np.flatnonzero(nonterminal)[np.argmax(off)])
            raise TreeError(f"transition probabilities at node {bad} sum to {sums[bad]!r}")

        uncond = np.ones(n)
        for k in range(1, K + 1):
            sl = self.slice(k)
            uncond[sl] = uncond[self.parent[sl]] * self.prob[sl]
        for k in range(K + 1):
            total = uncond[self.slice(k)].sum()
            if abs(total - 1.0) > PROB_TOL:
                raise TreeError(f"slice {k} probabilities sum to {total!r}")
        self.uncond = uncond

    # -- basic queries ----------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    @property
    def steps(self) -> int:
        return self.time_grid.size - 1

    @property
    def horizon(self) -> float:
        return float(self.time_grid[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.time_grid)

    def slice(self, k: int) -> slice:
        if not 0 <= k <= self.steps:
            raise TreeError(f"time index {k} out of range 0..{self.steps}")
        return slice(int(self.slice_start[k]), int(self.slice_start[k + 1]))

    def nodes_at(self, k: int) -> np.ndarray:
        sl = self.slice(k)
        return np.arange(sl.start, sl.stop)

    @property
    def nonterminal(self) -> np.ndarray:
        return np.arange(int(self.slice_start[self.steps]))

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes_at(self.steps)

    def children(self, node: int) -> np.ndarray:
        f = self.first_child[node]
        if f < 0:
            return np.empty(0, dtype=np.int64)
        return np.arange(f, f + self.n_children[node])

    def child_offsets(self, k: int) -> np.ndarray:
        """Offsets of each slice-``k`` node's first child inside slice ``k+1``."""
        sl = self.slice(k)
        return self.first_child[sl] - self.slice_start[k + 1]

    def path(self, node: int) -> list[int]:
        out = [int(node)]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def label(self, node: int) -> str | None:
        return None if self.labels is None else self.labels[node]

    def time_of(self, nodes) -> np.ndarray:
        return self.time_grid[self.time_idx[nodes]]

    def step_of(self, nodes) -> np.ndarray:
        """Step length ``t_{k+1} - t_k`` for non-terminal nodes."""
        k = self.time_idx[nodes]
        return self.time_grid[k + 1] - self.time_grid[k]

    # -- one-step operators -----------------------------------------------

    def step_expect(self, child_values: np.ndarray, k: int) -> np.ndarray:
        """Conditional expectation over one step of values given on slice ``k+1``."""
        sl1 = self.slice(k + 1)
        v = np.asarray(child_values, dtype=float)
        w = self.prob[sl1].reshape((-1,) + (1,) * (v.ndim - 1))
        return np.add.reduceat(w * v, self.child_offsets(k), axis=0)

    def spread(self, parent_values: np.ndarray, k: int) -> np.ndarray:
        """Broadcast slice-``k`` values to their children on slice ``k+1``."""
        sl1 = self.slice(k + 1)
        return np.asarray(parent_values)[self.parent[sl1] - self.slice_start[k]]

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            entry = {
                "id": i,
                "parent": int(self.parent[i]),
                "time_idx": int(self.time_idx[i]),
                "prob": float(self.prob[i]),
                "children": [int(c) for c in self.children(i)],
            }
            if self.labels is not None:
                entry["label"] = self.labels[i]
            nodes.append(entry)
        out = {"time_grid": [float(t) for t in self.time_grid], "nodes": nodes}
        if self.channels:
            out["channels"] = [{"kind": c.kind, "intensity": list(c.intensity)} for c in self.channels]
        if self.diffusion_dims:
            out["diffusion_dims"] = self.diffusion_dims
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FilteredSpace":
        nodes = sorted(data["nodes"], key=lambda e: e["id"])
        if [e["id"] for e in nodes] != list(range(len(nodes))):
            raise TreeError("node ids must be 0..N-1")
        parent = [e["parent"] for e in nodes]
        for e in nodes:
            kids = e.get("children", [])
            if any(parent[c] != e["id"] for c in kids):
                raise TreeError(f"children list of node {e['id']} disagrees with parents")
        labels = [e["label"] for e in nodes] if all("label" in e for e in nodes) else None
        channels = [JumpChannel(c["kind"], tuple(c["intensity"])) for c in data.get("channels", [])]
        space = cls(data["time_grid"], parent, [e["prob"] for e in nodes], labels,
                    channels, data.get("diffusion_dims", 0))
        for e in nodes:
            if e["time_idx"] != space.time_idx[e["id"]]:
                raise TreeError(f"time_idx of node {e['id']} inconsistent with its parent")
        return space

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FilteredSpace":
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return f"FilteredSpace(steps={self.steps}, nodes={self.n_nodes}, T={self.horizon})"


# -- processes ------------------------------------------------------------


@dataclass(frozen=True)
class AdaptedProcess:
    """Node-indexed values; the value at a node holds on ``[t_k, t_{k+1})``."""

    space: FilteredSpace
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 0 or v.shape[0] != self.space.n_nodes:
            raise TreeError(f"expected {self.space.n_nodes} node values, got shape {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def at(self, k: int) -> np.ndarray:
        return self.values[self.space.slice(k)]

    @property
    def initial(self):
        v = self.values[0]
        return float(v) if v.ndim == 0 else v.copy()

    def to_dict(self) -> dict:
        return {str(i): _jsonable(v) for i, v in enumerate(self.values)}

    @classmethod
    def from_dict(cls, space: FilteredSpace, data: dict) -> "AdaptedProcess":
        if len(data) != space.n_nodes:
            raise TreeError("process map must cover every node")
        return cls(space, np.array([data[str(i)] for i in range(space.n_nodes)], dtype=float))


@dataclass(frozen=True)
class PredictableProcess:
    """Values attached to steps ``(t_k, t_{k+1}]``, stored at the step's left node.

    The array has one row per node for indexing convenience; rows of terminal
    nodes are zero and carry no meaning.
    """

    space: FilteredSpace
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        n_nt = int(self.space.slice_start[self.space.steps])
        if v.ndim == 0:
            raise TreeError("predictable process needs node-indexed values")
        if v.shape[0] == n_nt:
            v = np.concatenate([v, np.zeros((self.space.n_nodes - n_nt,) + v.shape[1:])])
        if v.shape[0] != self.space.n_nodes:
            raise TreeError(f"expected {n_nt} step values, got shape {v.shape}")
        v[n_nt:] = 0.0
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def at(self, k: int) -> np.ndarray:
        if k >= self.space.steps:
            raise TreeError("predictable processes are undefined on the terminal slice")
        return self.values[self.space.slice(k)]

    def to_dict(self) -> dict:
        return {str(i): _jsonable(self.values[i]) for i in self.space.nonterminal}

    @classmethod
    def from_dict(cls, space: FilteredSpace, data: dict) -> "PredictableProcess":
        ids = space.nonterminal
        return cls(space, np.array([data[str(i)] for i in ids], dtype=float))


def _jsonable(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v.tolist()


def as_array(x) -> np.ndarray:
    if isinstance(x, (AdaptedProcess, PredictableProcess)):
        return x.values
    return np.asarray(x, dtype=float)


# -- builders -------------------------------------------------------------

Expand = Callable[[int, object], Iterable[tuple[float, str, object]]]


def grow(time_grid: Sequence[float], expand: Expand, root_state=None, **space_kw) -> FilteredSpace:
    """Build a tree breadth-first from a branching rule.

    ``expand(k, state)`` yields ``(probability, label, child_state)`` triples
    for a node at time index ``k``.
    """
    grid = np.asarray(time_grid, dtype=float)
    parent = [-1]
    prob = [1.0]
    labels = ["root"]
    frontier = [(0, root_state)]
    for k in range(grid.size - 1):
        nxt = []
        for node, state in frontier:
            for p, lab, child_state in expand(k, state):
                parent.append(node)
                prob.append(float(p))
                labels.append(lab)
                nxt.append((len(parent) - 1, child_state))
                if len(parent) > MAX_NODES:
                    raise TreeError(f"tree exceeds the {MAX_NODES} node guardrail")
        frontier = nxt
    return FilteredSpace(grid, parent, prob, labels, **space_kw)


def uniform_grid(steps: int, horizon: float = 1.0) -> np.ndarray:
    if steps < 1:
        raise TreeError("need at least one step")
    return np.linspace(0.0, horizon, steps + 1)


def uniform_tree(steps: int, horizon: float = 1.0, branching: int = 2,
                 probs: Sequence[float] | None = None) -> FilteredSpace:
    """Homogeneous tree; ``branching=1`` gives the deterministic chain."""
    p = np.full(branching, 1.0 / branching) if probs is None else np.asarray(probs, dtype=float)
    if p.size != branching:
        raise TreeError("probs must have one entry per branch")
    branches = [(float(pi), f"w{i}", None) for i, pi in enumerate(p)]
    return grow(uniform_grid(steps, horizon), lambda k, s: branches)


def random_tree(rng: np.random.Generator, steps: int, branching: int | Sequence[int] = 2,
                horizon: float = 1.0, min_prob: float = 0.1) -> FilteredSpace:
    """Tree with random transition probabilities bounded below by ``min_prob``.

    ``branching`` may be a list of choices; each node draws its own count.
    """
    choices = [branching] if np.isscalar(branching) else list(branching)
    if min(choices) * min_prob >= 1.0:
        raise TreeError("min_prob too large for the requested branching")

    def expand(k, _):
        b = int(rng.choice(choices))
        raw = rng.dirichlet(np.ones(b))
        p = min_prob + (1.0 - b * min_prob) * raw
        p /= p.sum()
        return [(pi, f"w{i}", None) for i, pi in enumerate(p)]

    return grow(uniform_grid(steps, horizon), expand)


def canonical_tree(steps: int, horizon: float = 1.0, dims: int = 1,
                   channels: Sequence[JumpChannel] = ()) -> FilteredSpace:
    """Tree on which a ``dims``-dimensional Brownian proxy plus jump channels has PRP.

    Each node gets one child per alive jump channel (probability
    ``lambda * dt``) and ``dims + 1`` equally weighted no-jump children that
    carry the diffusion increments; ``dims = 0`` leaves a single no-jump child.
    """
    grid = uniform_grid(steps, horizon)
    dts = np.diff(grid)
    channels = tuple(channels)
    for j, ch in enumerate(channels):
        if ch.kind not in ("default", "poisson"):
            raise TreeError(f"unknown jump channel kind {ch.kind!r}")
        if len(ch.intensity) != steps:
            raise TreeError(f"channel {j} needs one intensity per step")
        lam = np.asarray(ch.intensity)
        if np.any(lam < 0) or np.any(lam * dts >= 1.0):
            raise TreeError(f"channel {j}: need 0 <= lambda*dt < 1")
    n_diff = dims + 1 if dims > 0 else 1

    def expand(k, alive):
        out = []
        total = 0.0
        for j in alive:
            p = channels[j].intensity[k] * dts[k]
            if p > 0.0:
                nxt = tuple(i for i in alive if i != j) if channels[j].kind == "default" else alive
                out.append((p, f"J{j}", nxt))
                total += p
        rest = 1.0 - total
        if rest <= 0.0:
            raise TreeError("jump probabilities exhaust the step; refine the grid")
        out.extend((rest / n_diff, f"w{i}", alive) for i in range(n_diff))
        return out

    return grow(grid, expand, root_state=tuple(range(len(channels))),
                channels=channels, diffusion_dims=dims)


def constant_channel(kind: str, intensity: float, steps: int) -> JumpChannel:
    return JumpChannel(kind, tuple([float(intensity)] * steps))
