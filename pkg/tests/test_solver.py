"""Backward solver, Picard iteration, a priori estimate and stability."""

import numpy as np
import pytest
from conftest import n_leaves
from oracle import solve_reference

from bsdelab import sampling
from bsdelab.generators import Constant, Discount, LambdaAdmissible, Linear, Nonlinear, Zero
from bsdelab.models import block_model, build_brownian_proxy
from bsdelab.solver import (BSDEProblem, SolverError, apriori_check, apriori_constant, contraction_bound,
                            discrete_stability_factor, picard_iterate, solve_backward_exact, stability_ladder,
                            transform_shift, untransform)
from bsdelab.tree import TreeError, constant_channel, uniform_tree

# Y_0 and Z_0 frozen from tests/oracle.py (bisection + lstsq, node by node)
FROZEN = {
    "lambda_default": (0.06594059993468226, [-0.04104538581596846, 0.19018580857511247]),
    "nonlinear_walk": (0.15312986425703023, [0.007923704220298122, -0.00986699153899824]),
    "linear_poisson": (9.641119740535656, [2.697617475344515, -5.3224402855588755]),
}


def frozen_problems():
    m1 = block_model(4, 1.0, 1, [constant_channel("default", 0.5, 4)])
    p1 = BSDEProblem(m1, LambdaAdmissible(0.1, 0.2, 0.3, 0.0, 0.05), np.cos(np.arange(n_leaves(m1))))
    sp = uniform_tree(5, 1.0, 3)
    m2 = build_brownian_proxy(sp, 2)
    p2 = BSDEProblem(m2, Nonlinear(0.5, 0.2, [0.3, -0.1]), np.sin(np.arange(n_leaves(m2))),
                     0.1 * sp.time_of(np.arange(sp.n_nodes)))
    m3 = block_model(5, 1.0, 1, [constant_channel("poisson", 1.0, 5)])
    p3 = BSDEProblem(m3, Linear(-0.2, 0.1, [0.3], [0.2]), np.sqrt(np.arange(n_leaves(m3))))
    return {"lambda_default": p1, "nonlinear_walk": p2, "linear_poisson": p3}


@pytest.mark.parametrize("name", sorted(FROZEN))
def test_frozen_oracle_values(name):
    p = frozen_problems()[name]
    s = solve_backward_exact(p)
    y0, z0 = FROZEN[name]
    assert s.Y0 == pytest.approx(y0, abs=1e-10)
    assert np.allclose(s.Z.values[0], z0, atol=1e-10)
    assert s.pathwise_residual < 1e-10


def test_against_reference_on_random_problems():
    for seed in range(10):
        p = sampling.random_problem(np.random.default_rng(seed), max_nodes=400, max_depth=5)
        Y, Z = solve_reference(p)
        s = solve_backward_exact(p)
        assert np.abs(Y - s.Y.values).max() < 1e-9


def test_zero_generator_gives_conditional_mean(mixed_model, rng):
    eta = rng.normal(size=n_leaves(mixed_model))
    s = solve_backward_exact(BSDEProblem(mixed_model, Zero(), eta))
    sp = mixed_model.space
    assert s.Y0 == pytest.approx(np.sum(sp.uncond[sp.leaves] * eta), abs=1e-13)


def test_constant_generator_adds_time(walk_model):
    s = solve_backward_exact(BSDEProblem(walk_model, Constant(1.0), 0.0))
    t = walk_model.space.time_of(np.arange(walk_model.space.n_nodes))
    assert np.allclose(s.Y.values, 1.0 - t)
    assert np.allclose(s.Z.values, 0.0)


def test_discount_chain_closed_form():
    for steps in (1, 10, 37):
        s = solve_backward_exact(sampling.discount_chain(steps))
        assert s.Y0 == pytest.approx((1 + 0.1 / steps) ** -steps, rel=1e-14)


def test_D_shift_equivalence(default_model, rng):
    p = BSDEProblem(default_model, Nonlinear(0.4, 0.1, [0.2, 0.3]), rng.normal(size=n_leaves(default_model)),
                    sampling.random_D(rng, default_model))
    direct = solve_backward_exact(p)
    shifted = transform_shift(p)
    assert not np.any(shifted.D)
    back = untransform(p, solve_backward_exact(shifted))
    assert np.abs(direct.Y.values - back.Y.values).max() < 1e-12
    assert np.abs(direct.Z.values - back.Z.values).max() < 1e-12


def test_implicit_step_refused_when_ill_posed():
    model = block_model(2, 1.0, 1)
    with pytest.raises(SolverError):
        solve_backward_exact(BSDEProblem(model, Discount(-3.0), 1.0))


def test_problem_validation(walk_model):
    with pytest.raises(TreeError):
        BSDEProblem(walk_model, Zero(), np.ones(3))
    with pytest.raises(ValueError):
        BSDEProblem(walk_model, Zero(), np.full(n_leaves(walk_model), np.nan))


def test_picard_matches_exact(default_model, rng):
    g = Nonlinear(0.5, 0.2, [0.3, 0.2])
    p = BSDEProblem(default_model, g, rng.normal(size=n_leaves(default_model)), sampling.random_D(rng, default_model))
    L = g.lipschitz(default_model)
    beta = 1158 * L * L * (default_model.C_Q + 1) / 0.5
    sol, tr = picard_iterate(p, beta)
    exact = solve_backward_exact(p)
    assert tr.converged and tr.bound == pytest.approx(0.5)
    assert tr.bound_respected and tr.monotone
    assert np.abs(sol.Y.values - exact.Y.values).max() < 1e-10


def test_picard_zero_generator_one_iteration(walk_model):
    _, tr = picard_iterate(BSDEProblem(walk_model, Zero(), 1.0), beta=1.0)
    assert tr.iterations == 1 and tr.converged


def test_picard_failure_raises(walk_model):
    p = BSDEProblem(walk_model, Nonlinear(0.9, 0.0, [0.5, 0.5]), 1.0)
    with pytest.raises(SolverError):
        picard_iterate(p, beta=1.0, max_iters=2, raise_on_fail=True)


def test_contraction_bound_formula():
    assert contraction_bound(1158.0, 1.0, 1.0) == pytest.approx(2.0)


def test_apriori_constant():
    beta, C = apriori_constant(0.5, 1.0)
    assert beta == pytest.approx(3.5)
    assert C == pytest.approx(8 * np.exp(3.5))


def test_apriori_holds_and_identical_data_is_zero(mixed_model, rng):
    g = Nonlinear(0.5, 0.0, [0.1, 0.2, 0.3])
    eta = rng.normal(size=n_leaves(mixed_model))
    p1 = BSDEProblem(mixed_model, g, eta)
    same = apriori_check(p1, BSDEProblem(mixed_model, g, eta))
    assert same.lhs == pytest.approx(0.0, abs=1e-20) and same.ok
    p2 = BSDEProblem(mixed_model, Linear(0.1, 0.3, [0.0], [0.0, 0.0]), eta + 0.1, sampling.random_D(rng, mixed_model))
    rep = apriori_check(p1, p2)
    assert rep.ok and rep.ratio < rep.C


def test_stability_ladder(default_model):
    g = Nonlinear(0.6, 0.0, [0.2, 0.1])
    p = BSDEProblem(default_model, g, 0.5)
    rows = stability_ladder(p)
    fac = discrete_stability_factor(default_model, g.lipschitz(default_model))
    assert fac >= np.exp(0.6 * default_model.C_Q)
    for r in rows:
        assert r.gap <= r.apriori_bound
        assert r.gap <= r.discrete_bound * (1 + 1e-12)
