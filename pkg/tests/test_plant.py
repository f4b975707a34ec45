import dataclasses
import math

import numpy as np
import pytest

from offsetmpc import plant


def exact_equilibrium(c, T, p):
    """Closed-form equilibrium: h zeroes the mole balance, the outlet
    matches the feed, and the coolant temperature zeroes the heat balance."""
    h = plant.steady_height(c, T, p)
    V = p.area * h
    kT = p.k0 * math.exp(-p.E_over_R / T)
    q_rxn = -p.dH / (p.rho * p.Cp) * kT * c
    q_feed = p.F0 * (p.T0 - T) / V
    # jacket term: 2 U / (r rho Cp) (Tc - T) = -(q_feed + q_rxn)
    Tc = T - (q_feed + q_rxn) * (p.r * p.rho * p.Cp) / (2.0 * p.U)
    s = plant.PlantState(c=c, T=T, h=h)
    u = np.array([Tc, p.F0 / p.outlet_factor])
    return s, u


def test_default_parameters_are_validated():
    with pytest.raises(ValueError):
        plant.CstrParams(F0=-0.1)
    with pytest.raises(ValueError):
        plant.CstrParams(dH=1000.0)  # exothermic reaction expected
    with pytest.raises(ValueError):
        plant.CstrParams(substeps=0)


def test_state_positivity():
    with pytest.raises(plant.NonPhysicalState):
        plant.PlantState(c=-0.1, T=300.0, h=0.5)
    with pytest.raises(plant.NonPhysicalState):
        plant.PlantState(c=0.5, T=300.0, h=0.0)


def test_operating_point_is_near_equilibrium():
    p = plant.CstrParams()
    op = plant.default_operating_point()
    s = plant.PlantState(*op.x_ss)
    dx = plant.derivatives(s, op.u_ss, p)
    assert np.abs(dx).max() < 1e-2


def test_level_balance_is_exact_at_matched_flows():
    p = plant.CstrParams()
    s = plant.PlantState(c=0.9, T=320.0, h=0.7)
    dx = plant.derivatives(s, np.array([300.0, p.F0]), p)
    assert dx[2] == 0.0


def test_mole_balance_zero_at_steady_height():
    p = plant.CstrParams()
    for c, T in [(0.878, 324.5), (0.85, 330.0), (0.9, 318.0)]:
        h = plant.steady_height(c, T, p)
        s = plant.PlantState(c=c, T=T, h=h)
        dx = plant.derivatives(s, np.array([300.0, p.F0]), p)
        assert abs(dx[0]) < 1e-14


def test_heat_balance_linear_in_heat_transfer_coefficient():
    s = plant.PlantState(c=0.878, T=324.5, h=0.659)
    u = np.array([300.0, 0.1])
    dTs = []
    for U in (50.0, 100.0, 150.0):
        p = plant.CstrParams(U=U)
        dTs.append(plant.derivatives(s, u, p)[1])
    assert dTs[2] - dTs[1] == pytest.approx(dTs[1] - dTs[0], abs=1e-12)


def test_exact_equilibrium_is_rk4_fixed_point():
    p = plant.CstrParams()
    s, u = exact_equilibrium(0.878, 324.5, p)
    assert np.abs(plant.derivatives(s, u, p)).max() < 5e-13
    s2 = plant.step(s, u, p, 1.0)
    assert abs(s2.c - s.c) < 1e-9
    assert abs(s2.T - s.T) < 1e-9
    assert abs(s2.h - s.h) < 1e-9


def test_equilibrium_holds_over_long_horizon():
    p = plant.CstrParams()
    s, u = exact_equilibrium(0.878, 324.5, p)
    ref = s.as_array()
    for _ in range(100):
        s = plant.step(s, u, p, 1.0)
    assert np.abs(s.as_array() - ref).max() < 1e-9


def test_outlet_mismatch_breaks_level_balance():
    p = plant.CstrParams(outlet_factor=1.03)
    s = plant.PlantState(c=0.878, T=324.5, h=0.659)
    dx = plant.derivatives(s, np.array([300.0, 0.1]), p)
    # 3% extra outflow drains the tank
    assert dx[2] == pytest.approx(-0.03 * 0.1 / p.area, rel=1e-12)


def test_integration_order_is_four():
    """Richardson step-halving on a transient: the dt^4 error law gives
    ratios near 16."""
    p = plant.CstrParams(substeps=1)
    s = plant.PlantState(c=0.9, T=320.0, h=0.7)
    u = np.array([295.0, 0.11])

    def advance(dt, n):
        st = s
        for _ in range(n):
            st = plant.step(st, u, p, dt)
        return st.as_array()

    # base step small enough for the dt^4 term to dominate, large enough
    # to stay clear of round-off in the halved differences
    x1 = advance(0.125, 1)
    x2 = advance(0.0625, 2)
    x4 = advance(0.03125, 4)
    num = np.linalg.norm(x1 - x2)
    den = np.linalg.norm(x2 - x4)
    assert den > 0
    assert 12.0 <= num / den <= 20.0


def test_step_raises_when_tank_drains():
    p = plant.CstrParams(substeps=5)
    s = plant.PlantState(c=0.9, T=324.0, h=0.02)
    # maximum outlet flow against nominal feed empties 2 cm fast
    with pytest.raises(plant.NonPhysicalState):
        plant.step(s, np.array([300.0, 0.13]), p, 10.0)


def test_measure_is_deviation_from_op():
    op = plant.default_operating_point()
    s = plant.PlantState(*op.x_ss)
    assert np.array_equal(plant.measure(s, op), np.zeros(3))
    s2 = plant.PlantState(op.x_ss[0] + 0.01, op.x_ss[1] - 2.0, op.x_ss[2] + 0.1)
    assert np.allclose(plant.measure(s2, op), [0.01, -2.0, 0.1], atol=1e-12)


def test_apply_event_swaps_named_parameters():
    p = plant.CstrParams()
    p2 = plant.apply_event(p, {"k0": 6.2e10})
    assert p2.k0 == 6.2e10
    assert p2.F0 == p.F0 and p2.U == p.U
    assert p.k0 == 7.2e10  # original untouched


def test_apply_event_rejects_unknown_field():
    p = plant.CstrParams()
    with pytest.raises(plant.UnknownEvent):
        plant.apply_event(p, {"volume": 3.0})


def test_concentration_mismatch_term():
    s = plant.PlantState(c=0.878, T=324.5, h=0.659)
    u = np.array([300.0, 0.1])
    base = plant.derivatives(s, u, plant.CstrParams())
    tilted = plant.derivatives(s, u, plant.CstrParams(concentration_mismatch=True))
    V = plant.CstrParams().area * s.h
    assert tilted[0] - base[0] == pytest.approx(-0.03 * u[1] * s.c / V, rel=1e-9)
    assert tilted[1] == base[1]
    assert tilted[2] == base[2]
