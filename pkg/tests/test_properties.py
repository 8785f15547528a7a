"""Property-based checks of the structural invariants."""

import numpy as np
from conftest import n_leaves
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from bsdelab import comparison as C
from bsdelab import sampling
from bsdelab.calculus import conditional_expectation, martingale_from_terminal, step_mean
from bsdelab.generators import Nonlinear
from bsdelab.linear import build_exponential_bundle, linear_solution
from bsdelab.models import represent_martingale, stochastic_integral
from bsdelab.solver import BSDEProblem, apriori_check, picard_iterate, solve_backward_exact
from bsdelab.tree import random_tree

PROP = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(min_value=0, max_value=2**32 - 1)
small = dict(max_depth=5, max_nodes=600)


@PROP
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_conditional_expectation_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    sp = random_tree(rng, 4, [2, 3], min_prob=0.1)
    X, Y = rng.normal(size=(2, sp.leaves.size))
    lhs = conditional_expectation(sp, a * X + b * Y, 2)
    rhs = a * conditional_expectation(sp, X, 2) + b * conditional_expectation(sp, Y, 2)
    assert np.allclose(lhs, rhs, atol=1e-12)


@PROP
@given(seeds)
def test_solver_defect_small(seed):
    p = sampling.random_problem(np.random.default_rng(seed), **small)
    s = solve_backward_exact(p)
    assert s.pathwise_residual < 1e-10
    assert s.representation_residual < 1e-10


@PROP
@given(seeds)
def test_representation_reconstructs(seed):
    rng = np.random.default_rng(seed)
    model = sampling.random_model(rng, **small)
    N = martingale_from_terminal(model.space, rng.standard_t(5, size=n_leaves(model)))
    rep = represent_martingale(model, N)
    assert np.abs(N[0] + stochastic_integral(model, rep.Z.values) - N).max() < 1e-10


@PROP
@given(seeds)
def test_linear_closed_form(seed):
    p, coeffs = sampling.random_linear_problem(np.random.default_rng(seed))
    ls = linear_solution(p.model, coeffs, p.eta, p.D)
    exact = solve_backward_exact(p)
    # q Y is available without positivity; Y itself only when q > 0
    assert np.abs(ls.qY - ls.bundle.q.values * exact.Y.values).max() < 1e-9
    if ls.Y is not None:
        assert np.abs(ls.Y.values - exact.Y.values).max() < 1e-9


@PROP
@given(seeds)
def test_weight_positive_iff_jumps_above_minus_one(seed):
    rng = np.random.default_rng(seed)
    model = sampling.random_jump_model(rng, 4)
    dq = float(model.dQ.values.max())
    coeffs = sampling.random_linear_coefficients(rng, model, min(3.0 * rng.random(), 0.9 / dq))
    b = build_exponential_bundle(model, coeffs)
    assert (b.q.values.min() > 0) == (b.min_jump > -1.0)


@PROP
@given(seeds)
def test_comparison_sweep_property(seed):
    pair = sampling.comparison_pair(np.random.default_rng(seed))
    rep = C.verify_comparison(pair.p1, pair.p2, pair.zeta)
    assert rep.diagnostics["linearization_residual"] < 1e-10
    if rep.hypotheses_ok:
        assert rep.min_gap >= -1e-10
        assert rep.diagnostics["closed_form_gap"] < 1e-9
        assert rep.diagnostics["supermartingale"]["ok"]


@PROP
@given(seeds)
def test_apriori_never_violated(seed):
    rng = np.random.default_rng(seed)
    model = sampling.random_model(rng, **small)
    p1 = sampling.random_problem(rng, model)
    p2 = sampling.random_problem(rng, model)
    assert apriori_check(p1, p2).ok


@PROP
@given(seeds, st.floats(0.05, 0.9))
def test_picard_ratios_below_bound(seed, target):
    rng = np.random.default_rng(seed)
    model = sampling.random_model(rng, max_depth=4, max_nodes=300)
    g = sampling.random_generator(rng, model, kind="nonlinear")
    p = BSDEProblem(model, g, sampling.random_terminal(rng, model))
    L = g.lipschitz(model)
    if L == 0:
        return
    beta = 1158 * L * L * (model.C_Q + 1) / target
    _, tr = picard_iterate(p, beta)
    assert tr.converged and tr.bound_respected and tr.monotone


@PROP
@given(seeds)
def test_martingale_from_terminal_has_no_drift(seed):
    rng = np.random.default_rng(seed)
    sp = random_tree(rng, 5, [2, 3, 4], min_prob=0.05)
    M = martingale_from_terminal(sp, rng.normal(size=sp.leaves.size))
    assert np.abs(step_mean(sp, M)).max() < 1e-13


@PROP
@given(seeds, st.floats(0.0, 1.0))
def test_monotone_in_eta(seed, scale):
    rng = np.random.default_rng(seed)
    model = sampling.random_model(rng, **small)
    g = Nonlinear(0.5, 0.0, np.full(model.n, 0.2))
    eta = sampling.random_terminal(rng, model)
    bump = scale * rng.random(eta.size)
    y_lo = solve_backward_exact(BSDEProblem(model, g, eta)).Y.values
    y_hi = solve_backward_exact(BSDEProblem(model, g, eta + bump)).Y.values
    assert np.all(y_hi >= y_lo - 1e-12)
