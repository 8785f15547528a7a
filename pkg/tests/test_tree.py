"""Scenario trees: indexing, probabilities, guardrails and serialization."""

import numpy as np
import pytest

from bsdelab.tree import (FilteredSpace, TreeError, canonical_tree, constant_channel, random_tree,
                          uniform_tree)


def test_uniform_tree_shape():
    sp = uniform_tree(3, 1.5, 2)
    assert sp.n_nodes == 15
    assert sp.steps == 3
    assert sp.horizon == 1.5
    assert np.allclose(sp.dt, 0.5)
    assert list(sp.children(0)) == [1, 2]
    assert sp.path(14) == [0, 2, 6, 14]
    assert np.isclose(sp.uncond[sp.leaves].sum(), 1.0)


def test_chain_is_deterministic():
    sp = uniform_tree(4, 1.0, 1)
    assert sp.n_nodes == 5
    assert np.all(sp.uncond == 1.0)


def test_random_tree_probabilities(rng):
    sp = random_tree(rng, 4, [2, 3, 4], min_prob=0.1)
    assert np.all(sp.prob[1:] >= 0.1 - 1e-12)
    sums = np.bincount(sp.parent[1:], weights=sp.prob[1:], minlength=sp.n_nodes)
    assert np.allclose(sums[sp.nonterminal], 1.0)
    assert set(np.unique(sp.n_children[sp.nonterminal])) <= {2, 3, 4}


def test_canonical_tree_default_absorbs():
    steps = 3
    sp = canonical_tree(steps, 1.0, 1, [constant_channel("default", 0.5, steps)])
    # a node reached by a jump has no further jump child
    jumped = [i for i in range(1, sp.n_nodes) if sp.label(i) == "J0"]
    for node in jumped:
        if sp.time_idx[node] < steps:
            assert "J0" not in [sp.label(c) for c in sp.children(node)]
            assert sp.n_children[node] == 2
    assert sp.n_children[0] == 3
    p = sp.prob[sp.children(0)]
    assert np.isclose(p[0], 0.5 / 3)


def test_canonical_channel_validation():
    with pytest.raises(TreeError):
        canonical_tree(2, 1.0, 1, [constant_channel("default", 3.0, 2)])
    with pytest.raises(TreeError):
        canonical_tree(2, 1.0, 1, [constant_channel("weird", 0.1, 2)])


@pytest.mark.parametrize("parent,prob,grid,msg", [
    ([-1, 0, 0], [1, 0.5, 0.6], [0, 1], "sum"),
    ([-1, 0, 0], [1, 1.0, 0.0], [0, 1], "strictly positive"),
    ([-1, 0, 0], [1, 0.5, 0.5], [0, 1, 2], "depth"),
    ([0, 0], [1, 1], [0, 1], "root"),
    ([-1, 0, 0], [1, 0.5, 0.5], [0, 0], "time grid"),
])
def test_malformed_trees_rejected(parent, prob, grid, msg):
    with pytest.raises(TreeError, match=msg):
        FilteredSpace(grid, parent, prob)


def test_json_roundtrip(default_model):
    sp = default_model.space
    back = type(sp).from_json(sp.to_json())
    assert back.n_nodes == sp.n_nodes
    assert np.array_equal(back.parent, sp.parent)
    assert np.allclose(back.prob, sp.prob)
    assert [back.label(i) for i in range(10)] == [sp.label(i) for i in range(10)]


def test_step_expect_and_spread():
    sp = uniform_tree(2, 1.0, 2, probs=[0.25, 0.75])
    vals = np.array([1.0, 3.0, 5.0, 7.0])
    e = sp.step_expect(vals, 1)
    assert np.allclose(e, [0.25 * 1 + 0.75 * 3, 0.25 * 5 + 0.75 * 7])
    assert np.allclose(sp.spread(np.array([1.0, 2.0]), 1), [1, 1, 2, 2])
