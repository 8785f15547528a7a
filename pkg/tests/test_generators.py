"""Generator families, declared Lipschitz constants and their sampled checks."""

import numpy as np
import pytest

from bsdelab.generators import (REGISTRY, Bump, Constant, CustomPolynomial, Discount, LambdaAdmissible, Linear,
                                Nonlinear, Sum, make_generator, verify_m_lipschitz)


def _eval(g, model, y=0.3, z=None):
    nodes = np.array([0])
    z = np.zeros((1, model.n)) if z is None else np.atleast_2d(z)
    return float(g(model, nodes, np.array([y]), z)[0])


def test_registry_roundtrip():
    assert set(REGISTRY) == {"zero", "constant", "discount", "linear", "lambda_admissible",
                             "custom_polynomial", "nonlinear"}
    g = make_generator("discount", rate=0.2)
    assert isinstance(g, Discount) and g.rate == 0.2
    with pytest.raises(ValueError, match="unknown generator"):
        make_generator("nope")


def test_simple_values(mixed_model):
    assert _eval(Constant(2.0), mixed_model) == 2.0
    assert _eval(Discount(0.1), mixed_model, y=2.0) == pytest.approx(-0.2)
    g = Sum((Constant(1.0), Discount(1.0)))
    assert _eval(g, mixed_model, y=0.25) == pytest.approx(0.75)


def test_linear_uses_m_coordinates(mixed_model):
    z = np.array([1.0, 2.0, -1.0])
    g = Linear(0.0, 0.0, [1.0], [0.5, 0.25])
    mz = mixed_model.m.values[0] @ z
    assert _eval(g, mixed_model, z=z) == pytest.approx(mz[0] + 0.5 * mz[1] + 0.25 * mz[2])


def test_lambda_admissible_jump_slope(default_model):
    # psi 1*(m^d)^2 z^d: on one default this is psi m^2 z
    g = LambdaAdmissible(psi=0.7)
    md = default_model.md[0, 0, 0]
    assert _eval(g, default_model, z=[0.0, 2.0]) == pytest.approx(0.7 * md ** 2 * 2.0)


def test_custom_polynomial_in_time(walk_model):
    g = CustomPolynomial(const=(1.0, 2.0), y=(0.0,), z=((0.0,), (0.0,)))
    sp = walk_model.space
    node = int(sp.slice(2).start)
    val = g(walk_model, np.array([node]), np.array([0.0]), np.zeros((1, 2)))[0]
    assert val == pytest.approx(1.0 + 2.0 * sp.time_of(np.array([node]))[0])


@pytest.mark.parametrize("g", [
    Nonlinear(0.5, 0.1, [0.3, -0.2, 0.1]),
    LambdaAdmissible(rate=0.2, theta=0.3, kappa=-0.1, psi=0.4, const=1.0),
    Linear(0.4, 1.0, [0.2], [0.1, -0.3]),
    Bump(0.1, 0.5, 0.2),
])
def test_sampled_lipschitz_below_declared(g, mixed_model):
    est = verify_m_lipschitz(g, mixed_model, samples=300, seed=1)
    assert not est.violation
    assert est.estimate <= est.declared + 1e-9


def test_sampled_lipschitz_is_sharp_for_linear(mixed_model):
    g = Linear(0.1, 0.0, [0.6], [0.3, 0.4])
    est = verify_m_lipschitz(g, mixed_model, samples=300, seed=2)
    assert est.estimate == pytest.approx(est.declared, rel=1e-6)


def test_understated_constant_is_flagged(mixed_model):
    g = Nonlinear(0.9, 0.0, [0.0, 0.0, 0.0])
    est = verify_m_lipschitz(g, mixed_model, samples=300, seed=3, declared=0.1)
    assert est.violation
