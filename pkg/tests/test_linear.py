"""Linear BSDEs: discrete exponentials, the closed form and the martingale of the proof."""

import numpy as np
import pytest
from conftest import n_leaves

from bsdelab import sampling
from bsdelab.calculus import martingale_from_terminal, step_mean
from bsdelab.linear import (LinearCoefficients, LinearError, build_exponential_bundle, weighted_martingale_check,
                            linear_solution, q_decomposition, stochastic_exponential, supermartingale_check)
from bsdelab.models import block_model
from bsdelab.solver import BSDEProblem, solve_backward_exact
from bsdelab.tree import constant_channel


def test_stochastic_exponential(mixed_model, rng):
    sp = mixed_model.space
    X = martingale_from_terminal(sp, 0.2 * rng.normal(size=n_leaves(mixed_model)))
    E = stochastic_exponential(sp, X).values
    assert E[0] == pytest.approx(1 + X[0])
    dE = E[1:] - E[sp.parent[1:]]
    dX = X[1:] - X[sp.parent[1:]]
    assert np.allclose(dE, E[sp.parent[1:]] * dX)
    assert np.abs(step_mean(sp, E)).max() < 1e-13


def test_coefficients_build(mixed_model):
    c = LinearCoefficients.build(mixed_model, 0.5, 1.0, 0.2, [0.1, 0.3])
    sp = mixed_model.space
    assert c.c.shape == (sp.n_nodes, 1) and c.d.shape == (sp.n_nodes, 2)
    assert np.all(c.a[sp.leaves] == 0.0)
    assert c.sup()["d"] == pytest.approx(np.hypot(0.1, 0.3))


def test_closed_form_matches_solver():
    for seed in range(8):
        p, coeffs = sampling.random_linear_problem(np.random.default_rng(seed))
        exact = solve_backward_exact(p)
        ls = linear_solution(p.model, coeffs, p.eta, p.D)
        assert ls.Y is not None
        assert np.abs(ls.Y.values - exact.Y.values).max() < 1e-10
        assert np.abs(ls.Z.values - exact.Z.values).max() < 1e-9
        assert ls.path_gap < 1e-10
        mc = weighted_martingale_check(ls.bundle, exact.Y.values)
        assert mc.residual < 1e-10 and mc.flagged.size == 0


def test_zero_coefficients_reduce_to_conditional_mean(mixed_model, rng):
    coeffs = LinearCoefficients.build(mixed_model)
    eta = rng.normal(size=n_leaves(mixed_model))
    ls = linear_solution(mixed_model, coeffs, eta)
    assert np.allclose(ls.bundle.q.values, 1.0)
    assert np.allclose(ls.Y.values, martingale_from_terminal(mixed_model.space, eta))


def test_pure_discount_weight():
    model = block_model(5, 1.0, 1)
    coeffs = LinearCoefficients.build(model, a=-0.3)
    b = build_exponential_bundle(model, coeffs)
    assert np.allclose(b.q.values[model.space.leaves], (1 + 0.3 / 5) ** -5)


def test_nonpositive_weight_refuses_division():
    steps = 4
    model = block_model(steps, 1.0, 0, [constant_channel("default", 0.5, steps)])
    coeffs = LinearCoefficients.build(model, d=[-1.0])
    eta = np.linspace(0, 1, n_leaves(model))
    ls = linear_solution(model, coeffs, eta)
    assert ls.bundle.min_jump < -1.0 and not ls.bundle.positive
    assert ls.Y is None
    # q Y is still produced and agrees with the exact solution weighted by q
    exact = solve_backward_exact(BSDEProblem(model, coeffs.generator(), eta))
    assert np.abs(ls.qY - ls.bundle.q.values * exact.Y.values).max() < 1e-12


def test_joint_product_is_first_order():
    gaps = []
    for steps in (3, 6, 12):
        model = block_model(steps, 1.0, 0, [constant_channel("poisson", 1.0, steps)])
        coeffs = LinearCoefficients.build(model, 0.5, 0.0, 0.0, [0.4])
        gaps.append(q_decomposition(build_exponential_bundle(model, coeffs))["exact_vs_joint_l1"])
    # halves with the mesh
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.05)
    assert gaps[1] / gaps[2] == pytest.approx(2.0, rel=0.05)


def test_supermartingale_for_decreasing_D(mixed_model, rng):
    coeffs = LinearCoefficients.build(mixed_model, 0.3, 0.0, 0.2, [0.1, -0.2])
    D = -sampling.monotone_increase(rng, mixed_model)
    b = build_exponential_bundle(mixed_model, coeffs, D)
    assert b.positive
    sm = supermartingale_check(b)
    assert sm["ok"] and sm["martingale_residual"] < 1e-13


def test_strict_inverse_refuses_after_default(default_model):
    coeffs = LinearCoefficients.build(default_model, d=[0.1])
    with pytest.raises(LinearError):
        build_exponential_bundle(default_model, coeffs, strict_inverse=True)
    build_exponential_bundle(default_model, coeffs)
