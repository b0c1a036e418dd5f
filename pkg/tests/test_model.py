from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srecmfg import (
    DimensionError,
    DomainError,
    InvariantError,
    derive_coefficients,
    optimal_controls,
    base_scenario_config,
    path_cost,
    penalty,
    penalty_prime,
    running_cost,
    single_class_config,
)
from srecmfg.errors import ConfigError

CFG = base_scenario_config()


# penalty and its derivative

@pytest.mark.parametrize("x, expected", [(0.2, 0.2), (-0.2, 0.0), (0.0, 0.025)])
def test_penalty_examples(x, expected):
    assert penalty(x, 0.1) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x, expected", [(0.0, 0.5), (1.0, 1.0), (-1.0, 0.0)])
def test_penalty_prime_examples(x, expected):
    assert penalty_prime(x, 0.1) == pytest.approx(expected, abs=1e-15)


def test_penalty_rejects_nonfinite():
    with pytest.raises(DomainError):
        penalty(np.nan, 0.1)
    with pytest.raises(DomainError):
        penalty_prime(np.inf, 0.1)
    with pytest.raises(DomainError):
        penalty(0.0, 0.0)


finite = st.floats(-5, 5, allow_nan=False)
deltas = st.floats(1e-3, 1.0)


@settings(max_examples=300, deadline=None)
@given(x=finite, y=finite, lam=st.floats(0, 1), delta=deltas)
def test_penalty_convex_and_bounded_slope(x, y, lam, delta):
    z = lam * x + (1 - lam) * y
    assert penalty(z, delta) <= lam * penalty(x, delta) + (1 - lam) * penalty(y, delta) + 1e-12
    fp = penalty_prime(x, delta)
    assert 0.0 <= fp <= 1.0


@settings(max_examples=300, deadline=None)
@given(x=finite, delta=deltas)
def test_penalty_prime_matches_finite_difference(x, delta):
    h = 1e-6 * delta
    fd = (penalty(x + h, delta) - penalty(x - h, delta)) / (2 * h)
    # central difference is exact up to O(h) where x is within h of a kink
    assert fd == pytest.approx(penalty_prime(x, delta), abs=1e-6)


def test_penalty_continuity_at_kinks():
    d = 0.05
    for x in (-d, d):
        assert penalty(x - 1e-12, d) == pytest.approx(penalty(x + 1e-12, d), abs=1e-10)
        assert penalty_prime(x - 1e-12, d) == pytest.approx(penalty_prime(x + 1e-12, d), abs=1e-9)


# derived coefficients

def test_derived_coefficients_base_scenario():
    # oracle: exact rationals from the class parameters
    pi = [Fraction(1, 4), Fraction(3, 4)]
    gam = [Fraction(5, 4), Fraction(7, 4)]
    zeta = [Fraction(7, 4), Fraction(5, 4)]
    S = sum(p / g for p, g in zip(pi, gam))
    coef = derive_coefficients(CFG.classes)
    for k in range(2):
        assert coef[k].eta == pytest.approx(float(pi[k] / gam[k] / S), abs=1e-15)
        assert coef[k].gamma_tilde == pytest.approx(float(gam[k] * S), abs=1e-15)
        assert coef[k].upsilon == pytest.approx(float(1 / gam[k] + 1 / zeta[k]), abs=1e-15)
    assert [round(c.eta, 6) for c in coef] == [0.318182, 0.681818]
    assert round(coef[0].upsilon, 6) == 1.371429
    assert round(coef[0].gamma_tilde, 6) == 0.785714
    assert sum(c.eta for c in coef) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("gamma", [0.3, 1.0, 7.5])
def test_single_class_eta_is_one(gamma):
    coef = derive_coefficients(single_class_config(gamma=gamma).classes)
    assert coef[0].eta == pytest.approx(1.0, abs=1e-15)


def test_derive_coefficients_empty():
    with pytest.raises(ConfigError):
        derive_coefficients([])


# optimal controls

def test_optimal_controls_examples():
    c = optimal_controls(0, 1.0, 0.39, CFG)
    g, G = c.g, c.Gamma
    assert g == pytest.approx(0.2 + 1 / 1.75, abs=1e-15)
    assert round(float(g), 6) == 0.771429
    assert G == pytest.approx(0.488, abs=1e-15)
    c = optimal_controls(1, 0.0, 0.0, CFG)
    g, G = c.g, c.Gamma
    assert (g, G) == (0.5, 0.0)


@settings(max_examples=200, deadline=None)
@given(y=st.floats(0, 1), k=st.integers(0, 1))
def test_no_trade_when_marginal_benefit_equals_price(y, k):
    G = optimal_controls(k, y, CFG.compliance.P * y, CFG).Gamma
    assert G == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(y=st.floats(0, 1), s=st.floats(0, 1), k=st.integers(0, 1))
def test_controls_satisfy_first_order_conditions(y, s, k):
    # running cost + P*y*(g+Gamma) is minimised: d/dg and d/dGamma vanish
    p = CFG.classes[k]
    c = optimal_controls(k, y, s, CFG)
    g, G = c.g, c.Gamma
    assert p.zeta * (g - p.h) - CFG.compliance.P * y == pytest.approx(0.0, abs=1e-12)
    assert p.gamma * G + s - CFG.compliance.P * y == pytest.approx(0.0, abs=1e-12)


def test_optimal_controls_reject_y_outside_unit_interval():
    with pytest.raises(InvariantError):
        optimal_controls(0, 1.5, 0.3, CFG)
    with pytest.raises(InvariantError):
        optimal_controls(0, -0.2, 0.3, CFG)


# running cost

def test_running_cost_baseline_is_zero():
    for k, p in enumerate(CFG.classes):
        assert running_cost(k, p.h, 0.0, 0.77, CFG) == 0.0


def test_running_cost_class1_example():
    # independent scalar oracle in exact arithmetic: 1/(2 zeta) + gamma/2 * G^2 + s*G
    zeta, gam, G, s = Fraction(7, 4), Fraction(5, 4), Fraction(488, 1000), Fraction(39, 100)
    dg = 1 / zeta  # g - h at y = 1, P = 1
    oracle = zeta / 2 * dg**2 + gam / 2 * G**2 + s * G
    assert float(oracle) == pytest.approx(0.624874, abs=5e-7)
    g = 0.2 + 1 / 1.75
    assert running_cost(0, g, 0.488, 0.39, CFG) == pytest.approx(float(oracle), abs=1e-14)


def test_running_cost_class2_example():
    assert running_cost(1, 0.5, 1.0, 0.0, CFG) == pytest.approx(0.875, abs=1e-15)


# path cost

def _flat(m, v):
    return np.full(m, v)


def test_path_cost_examples():
    m = CFG.n_steps
    R, d = CFG.compliance.R[0], CFG.compliance.delta
    h = CFG.classes[0].h
    zero_g, zero_G, s = _flat(m, h), _flat(m, 0.0), _flat(m + 1, 0.4)
    assert path_cost(0, zero_g, zero_G, s, R + 2 * d, CFG) == 0.0
    assert path_cost(0, zero_g, zero_G, s, R - 1.0, CFG) == pytest.approx(CFG.compliance.P * 1.0, abs=1e-15)


def test_path_cost_constant_running_cost_no_penalty():
    cfg = base_scenario_config().with_(compliance__P=0.0).validate()
    m = cfg.n_steps
    p = cfg.classes[1]
    G = 0.3
    c = 0.5 * p.gamma * G**2  # s = 0
    val = path_cost(1, _flat(m, p.h), _flat(m, G), _flat(m, 0.0), 0.0, cfg)
    assert val == pytest.approx(c * cfg.compliance.T, abs=1e-14)


def test_path_cost_dimension_errors():
    m = CFG.n_steps
    with pytest.raises(DimensionError):
        path_cost(0, _flat(m - 1, 0.2), _flat(m, 0.0), _flat(m, 0.0), 1.0, CFG)
    with pytest.raises(DimensionError):
        path_cost(0, _flat(m, 0.2), _flat(m, 0.0), _flat(m + 3, 0.0), 1.0, CFG)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1), c=st.floats(-1, 1), lam=st.floats(0.05, 0.95))
def test_path_cost_strictly_convex_in_controls(a, b, c, lam):
    # with the terminal state moved consistently, J is strictly convex in (g, Gamma)
    m = CFG.n_steps
    dt = CFG.scheme.dt
    s = np.linspace(0.35, 0.42, m + 1)
    rng = np.random.default_rng(0)
    g1, G1 = 0.2 + 0.1 * rng.standard_normal(m), 0.1 * rng.standard_normal(m)
    g2, G2 = g1 + a, G1 + b + c * np.linspace(0, 1, m)
    x0 = 0.6

    def J(g, G):
        return path_cost(0, g, G, s, x0 + dt * np.sum(g + G), CFG)

    mix = J(lam * g1 + (1 - lam) * g2, lam * G1 + (1 - lam) * G2)
    chord = lam * J(g1, G1) + (1 - lam) * J(g2, G2)
    if abs(a) + abs(b) + abs(c) > 1e-3:
        assert mix < chord
    else:
        assert mix <= chord + 1e-12
