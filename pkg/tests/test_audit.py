import dataclasses

import numpy as np
import pytest

from srecmfg import RefusalError, base_scenario_config, solve_fixed_point
from srecmfg.audit import (
    GAIN_LABEL,
    audit,
    deviation_family,
    deviation_gain,
    log_slope,
    nonincreasing_within_error,
    optimality_probe,
    zero_family,
)

SEEDS = list(range(1, 21))


def test_family_contents():
    fam = deviation_family(52)
    assert len(fam) == 45
    i0 = fam.labels.index("shift(a=0,b=0)")
    assert not fam.shift_g[i0].any() and not fam.shift_Gamma[i0].any()
    assert "shift(a=0,b=0)" not in deviation_family(52, include_zero=False).labels


def test_zero_family_gain_is_exactly_zero(base_solution):
    for k in (0, 1):
        est = deviation_gain(base_solution, 200, k, zero_family(52), SEEDS[:5])
        assert est.gain == 0.0 and est.se == 0.0


def test_common_random_numbers_reduce_variance(base_solution):
    est = deviation_gain(base_solution, 200, 0, deviation_family(52), SEEDS)
    assert est.crn_effective
    assert est.paired_var < 0.01 * est.unpaired_var


def test_mfg_control_beats_the_family_at_large_n(base_solution):
    est = deviation_gain(base_solution, 2000, 1, deviation_family(52), SEEDS)
    assert est.gain >= 0.0
    assert est.nonzero_gain < 0.0


def test_gain_trend_across_population_sizes(base_solution):
    rep = audit(base_solution, [50, 200, 800, 2000], SEEDS)
    assert rep.label == GAIN_LABEL
    for k in (0, 1):
        g = [e.gain for e in rep.gains[k]]
        se = [e.se for e in rep.gains[k]]
        assert nonincreasing_within_error(g, se)
        assert rep.checks[f"k{k + 1}"]["nonincreasing_within_2se"]
        assert rep.checks[f"k{k + 1}"]["crn_variance_reduction"]
    d = rep.to_dict()
    assert d["label"] == GAIN_LABEL and d["N"] == [50, 200, 800, 2000]


def test_trend_helpers():
    assert nonincreasing_within_error([0.3, 0.2, 0.21, 0.05], [0.01] * 4)
    assert not nonincreasing_within_error([0.1, 0.3], [0.01, 0.01])
    Ns = np.array([50, 200, 800, 2000])
    assert log_slope(Ns, 1 / np.sqrt(Ns), np.zeros(4)) == pytest.approx(-0.5, abs=1e-12)


def test_small_noise_deviations_do_not_pay():
    # near-deterministic market, many firms: strict convexity makes every
    # perturbation costlier within Monte Carlo error
    base = base_scenario_config()
    classes = tuple(dataclasses.replace(c, sigma=1e-6, m0=1e-12) for c in base.classes)
    sol = solve_fixed_point(base.with_(classes=classes).validate(), omega=0.25)
    fam = deviation_family(52, include_zero=False)
    for k in (0, 1):
        est = deviation_gain(sol, 2000, k, fam, SEEDS[:5])
        assert est.gain <= 2 * est.se + 1e-12, (k, est.gain, est.se, est.best)


def test_refuses_unconverged(base_solution):
    bad = dataclasses.replace(base_solution, converged=False)
    with pytest.raises(RefusalError):
        audit(bad, [50], [1])
    with pytest.raises(RefusalError):
        optimality_probe(bad, 0, probes=1)


# first-order optimality

@pytest.mark.parametrize("k", [0, 1])
@pytest.mark.parametrize("control", ["g", "Gamma"])
def test_first_order_conditions_hold_on_fine_grid(fine_solution, k, control):
    res = optimality_probe(fine_solution, k, probes=20, control=control, seed=3)
    assert len(res) == 20
    assert all(r.passes(z=3.0) for r in res), [(r.j, r.x, r.derivative, r.se) for r in res if not r.passes()]


@pytest.mark.parametrize("k", [0, 1])
def test_shifted_generation_recovers_slope(base_solution, k):
    zeta = base_solution.config.classes[k].zeta
    res = optimality_probe(base_solution, k, probes=20, shift=0.1, control="g", seed=5)
    for r in res:
        assert r.derivative == pytest.approx(zeta * 0.1, rel=0.10), (r.j, r.x, r.derivative)


@pytest.mark.parametrize("k", [0, 1])
def test_shifted_trading_recovers_slope(base_solution, k):
    gamma = base_solution.config.classes[k].gamma
    res = optimality_probe(base_solution, k, probes=10, shift=0.1, control="Gamma", seed=6)
    for r in res:
        assert r.derivative == pytest.approx(gamma * 0.1, rel=0.10), (r.j, r.x, r.derivative)
