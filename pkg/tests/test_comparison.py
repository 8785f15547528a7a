"""Comparison harness: linearization, hypotheses, verdicts and reduced conditions."""

import json

import numpy as np
import pytest
from conftest import n_leaves

from bsdelab import comparison as C
from bsdelab import sampling
from bsdelab.generators import Constant, Linear, Nonlinear, Sum, Zero
from bsdelab.models import block_model
from bsdelab.solver import BSDEProblem, solve_backward_exact
from bsdelab.tree import constant_channel


def _solve(*ps):
    return [solve_backward_exact(p) for p in ps]


def test_constant_gap_decays_linearly(walk_model):
    p1 = BSDEProblem(walk_model, Constant(1.0), 0.0)
    p2 = BSDEProblem(walk_model, Zero(), 0.0)
    rep = C.verify_comparison(p1, p2)
    t = walk_model.space.time_of(np.arange(walk_model.space.n_nodes))
    s1, s2 = rep.context[:2]
    assert np.allclose(s1.Y.values - s2.Y.values, 1 - t)
    assert rep.verdict == "pass" and rep.min_gap == pytest.approx(0.0)


def test_identical_data(mixed_model, rng):
    g = Nonlinear(0.4, 0.1, [0.2, 0.1, 0.1])
    eta = rng.normal(size=n_leaves(mixed_model))
    rep = C.verify_comparison(BSDEProblem(mixed_model, g, eta), BSDEProblem(mixed_model, g, eta))
    assert rep.min_gap == 0.0 and rep.verdict == "pass"
    lin = rep.context[2]
    assert np.all(lin.a == 0.0)   # Y^1 = Y^2 everywhere: indicator switches a off


def test_linear_coefficients_recovered(mixed_model, rng):
    g = Linear(0.3, 0.2, [0.4], [0.1, -0.2])
    eta = rng.normal(size=n_leaves(mixed_model))
    p1 = BSDEProblem(mixed_model, g, eta + 1.0)
    p2 = BSDEProblem(mixed_model, g, eta)
    s1, s2 = _solve(p1, p2)
    lin = C.linearize(mixed_model, g, g, s1, s2, C.zeta_zero(mixed_model))
    nt = mixed_model.space.nonterminal
    assert np.allclose(lin.a[nt], 0.3)
    dW = np.abs(s1.Z.values[nt, :1] - s2.Z.values[nt, :1])[:, 0]
    live = dW * mixed_model.mc[nt, 0, 0] >= 1e-14
    assert np.allclose(lin.c[nt][live, 0], 0.4)
    assert np.allclose(lin.b[nt], lin.delta[nt])


def test_linearization_bounds(mixed_model, rng):
    g1 = Nonlinear(0.7, 0.0, [0.3, 0.2, 0.1])
    g2 = Nonlinear(0.5, 0.1, [0.1, 0.0, 0.3])
    p1 = BSDEProblem(mixed_model, g1, rng.normal(size=n_leaves(mixed_model)))
    p2 = BSDEProblem(mixed_model, g2, rng.normal(size=n_leaves(mixed_model)))
    s1, s2 = _solve(p1, p2)
    lin = C.linearize(mixed_model, g1, g2, s1, s2, C.zeta_zero(mixed_model))
    L = g1.lipschitz(mixed_model)
    assert lin.max_a <= L + 1e-12
    assert lin.max_c <= L * np.sqrt(mixed_model.k) + 1e-12
    assert C.linearization_residual(p1, p2, s1, s2, lin) < 1e-10


def test_shifted_terminal_passes_all_hypotheses(default_model, rng):
    g = Nonlinear(0.3, 0.0, [0.2, 0.0])
    eta = rng.normal(size=n_leaves(default_model))
    rep = C.check_hypotheses(BSDEProblem(default_model, g, eta + 1), BSDEProblem(default_model, g, eta))
    assert rep.hypotheses_ok
    assert np.allclose(rep.context[2].b, 0.0)


def test_increasing_D_difference_has_witness(default_model, rng):
    g = Zero()
    up = sampling.monotone_increase(rng, default_model)
    rep = C.verify_comparison(BSDEProblem(default_model, g, 0.0, up), BSDEProblem(default_model, g, 0.0))
    h = rep.hypotheses["D_nonincreasing"]
    assert not h.passed and h.witness is not None and h.value > 0
    assert rep.verdict == "refused"
    assert np.isfinite(rep.min_gap)


def test_eta_order_witness(default_model):
    eta = np.zeros(n_leaves(default_model))
    eta[3] = -1.0
    rep = C.check_hypotheses(BSDEProblem(default_model, Zero(), eta), BSDEProblem(default_model, Zero(), 0.0))
    h = rep.hypotheses["eta_order"]
    assert not h.passed and h.witness == default_model.space.slice(default_model.space.steps).start + 3


def test_jump_condition_failure_and_counterexample():
    steps = 4
    model = block_model(steps, 1.0, 0, [constant_channel("default", 0.5, steps)])
    # dMhat = -2 (1 - p) at a default: the weight q turns negative
    d = -2.0 * model.md[0, 0, 0]
    g = Linear(0.0, 0.0, 0.0, [d])
    sp = model.space
    eta1 = np.zeros(n_leaves(model))
    jumped1 = [i for i, leaf in enumerate(sp.leaves) if "J0" in [sp.label(n) for n in sp.path(int(leaf))[:2]]]
    eta1[jumped1] = 1.0
    p1, p2 = BSDEProblem(model, g, eta1), BSDEProblem(model, g, 0.0)
    zeta = np.full((sp.n_nodes, 1), d)
    rep = C.verify_comparison(p1, p2, zeta)
    assert rep.hypotheses["b_nonnegative"].passed
    assert not rep.hypotheses["jump_condition"].passed
    assert rep.verdict == "refused"
    # without the jump condition comparison genuinely fails here
    assert rep.min_gap < -1e-6
    ce = C.counterexample(p1, p2, *rep.context[:2], rep.context[2].zeta)
    assert json.loads(json.dumps(ce))["g1"]["name"] == "linear"


def test_b_negative_witness(walk_model):
    rep = C.check_hypotheses(BSDEProblem(walk_model, Constant(-0.5), 0.0), BSDEProblem(walk_model, Zero(), 0.0))
    h = rep.hypotheses["b_nonnegative"]
    assert not h.passed and h.value == pytest.approx(-0.5)


@pytest.mark.parametrize("psi", [-0.5, 0.0, 1.0])
def test_single_default_scenario(psi):
    pair = sampling.single_default_pair(psi)
    rep = C.verify_comparison(pair.p1, pair.p2, pair.zeta)
    assert rep.hypotheses_ok and rep.verdict == "pass"
    assert rep.min_gap >= -1e-10
    cond = C.single_default_condition(pair.p1, pair.p2, psi)
    assert cond["passed"] and cond["psi_ok"]
    assert cond["identity_residual"] < 1e-12
    assert rep.diagnostics["supermartingale"]["ok"]
    assert rep.diagnostics["closed_form_gap"] < 1e-9


def test_zeta_psi_makes_jump_part_psi_times_dM(default_model):
    z = C.zeta_psi(default_model, 0.7)
    assert np.allclose(z[:, 0], 0.7 * default_model.md[:, 0, 0])


def test_strict_equal_and_gap(rng):
    eq = sampling.strict_equal_pair(rng)
    rep = C.verify_strict_comparison(eq.p1, eq.p2, eq.zeta)
    assert rep.strict_case["status"] == "equal"
    assert rep.strict_case["node_gap"] <= 1e-10
    gap = sampling.strict_gap_pair(rng)
    rep = C.verify_strict_comparison(gap.p1, gap.p2, gap.zeta)
    assert rep.strict_case["status"] == "excluded" and rep.gap0 > 0


def test_falsification_finds_nothing(rng):
    res = sampling.falsification_search(rng, trials=15)
    assert res["found"] == 0 and res["min_gap0"] > 1e-12


def test_continuous_case(walk_model, rng):
    g2 = Nonlinear(0.4, 0.0, [0.2, 0.1])
    g1 = Sum((g2, Constant(0.3)))
    eta = rng.normal(size=n_leaves(walk_model))
    cond = C.continuous_case_condition(BSDEProblem(walk_model, g1, eta), BSDEProblem(walk_model, g2, eta))
    assert cond.passed and cond.implies_b and cond.base_margin == pytest.approx(0.3)
    assert cond.split_margin == 0.0
    same = C.check_hypotheses(BSDEProblem(walk_model, g2, eta), BSDEProblem(walk_model, g2, eta))
    assert np.allclose(same.context[2].b, 0.0)
    with pytest.raises(C.ComparisonError):
        m = block_model(2, 1.0, 1, [constant_channel("default", 0.5, 2)])
        C.continuous_case_condition(BSDEProblem(m, g2, 0.0), BSDEProblem(m, g2, 0.0))


def test_split_condition_implies_b(rng):
    for seed in range(5):
        pair = sampling.comparison_pair(np.random.default_rng(seed))
        cond = C.split_condition(pair.p1, pair.p2, pair.zeta)
        assert cond.implies_b


def test_monotone_in_terminal(mixed_model, rng):
    g = Nonlinear(0.5, 0.0, [0.2, 0.1, 0.3])
    eta = rng.normal(size=n_leaves(mixed_model))
    base = solve_backward_exact(BSDEProblem(mixed_model, g, eta)).Y0
    for _ in range(5):
        bump = np.abs(rng.normal(size=eta.size)) * (rng.random(eta.size) < 0.3)
        assert solve_backward_exact(BSDEProblem(mixed_model, g, eta + bump)).Y0 >= base - 1e-12


def test_model_mismatch(walk_model, default_model):
    with pytest.raises(C.ComparisonError):
        C.check_hypotheses(BSDEProblem(walk_model, Zero(), 0.0), BSDEProblem(default_model, Zero(), 0.0))


def test_report_serializes(default_model):
    rep = C.verify_comparison(BSDEProblem(default_model, Constant(1.0), 0.0), BSDEProblem(default_model, Zero(), 0.0))
    data = json.loads(rep.to_json())
    assert data["verdict"] == "pass" and set(data["hypotheses"]) == {
        "g_predictable", "D_nonincreasing", "eta_order", "jump_condition", "b_nonnegative"}
