import math

import numpy as np
import pytest

import oracles
from instances import dual_grid_max, dual_instance, dual_objective, problems_for, random_instance
from noma_ee.power_opt import (
    DinkelbachNotConverged,
    DualConfig,
    dinkelbach_allocate,
    optimize_embb_power,
    optimize_mmtc_power,
    optimize_urllc_power,
    subtractive_objective,
)
from noma_ee.system_model import (
    AllocationState,
    Cell,
    ChannelRealization,
    NetworkConfig,
    check_constraints,
    ee_factor,
)

LN2 = math.log(2)


# ---------------------------------------------------------------------------
# mMTC closed form
# ---------------------------------------------------------------------------


def mmtc_objective(w, a, zeta):
    return lambda p: w * np.log2(1 + a * p) - zeta * p


def test_mmtc_clamp_low():
    w, zeta, a = 3.6e5, 1e9, 1e3
    floor = 0.5 / a
    sol = optimize_mmtc_power(a, 0.5, 0.2, zeta, w)
    assert w / (zeta * LN2) - 1 / a < floor
    assert sol.feasible and sol.power == floor


def test_mmtc_budget_binds():
    w, zeta, a = 3.6e5, 1e6, 1e9
    assert w / (zeta * LN2) - 1 / a == pytest.approx(0.5194, abs=1e-4)
    sol = optimize_mmtc_power(a, 1e-6, 0.2, zeta, w)
    assert sol.power == 0.2
    x, _ = oracles.grid_max_1d(mmtc_objective(w, a, zeta), 1e-6 / a, 0.2)
    assert x == pytest.approx(0.2)


def test_mmtc_infeasible_floor():
    sol = optimize_mmtc_power(1.0, 1.0, 0.2, 1e6, 3.6e5)
    assert not sol.feasible


def test_mmtc_zeta_zero_uses_budget():
    assert optimize_mmtc_power(1e9, 0.1, 0.2, 0.0, 3.6e5).power == 0.2


def test_mmtc_matches_grid_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = float(rng.choice([360e3, 2880e3]))
        a = 10 ** rng.uniform(3, 10)
        zeta = 10 ** rng.uniform(5, 8)
        p_max = 0.2
        gamma = rng.uniform(0, 1) * min(1.0, a * p_max)
        sol = optimize_mmtc_power(a, gamma, p_max, zeta, w)
        assert gamma / a <= sol.power <= p_max
        lo = gamma / a
        f = mmtc_objective(w, a, zeta)
        x, v = oracles.grid_max_1d(f, lo, p_max)
        step = (p_max - lo) / 9999
        assert abs(sol.power - x) <= step * (1 + 1e-9)
        assert f(sol.power) >= v - 1e-9 * abs(v)


# ---------------------------------------------------------------------------
# eMBB / URLLC dual solutions
# ---------------------------------------------------------------------------


def test_embb_single_sc_no_target_is_waterfilling():
    w, zeta, a = 360e3, 1e7, 1e6
    sol = optimize_embb_power([a], 0.0, 0.2, zeta, w)
    assert sol.mu == 0.0
    assert sol.powers[0] == pytest.approx(min(max(w / (zeta * LN2) - 1 / a, 0), 0.2))
    small_zeta = optimize_embb_power([a], 0.0, 0.2, 1e5, w)
    assert small_zeta.powers[0] == pytest.approx(0.2)
    assert small_zeta.nu > 0


@pytest.mark.parametrize("method", ["exact", "subgradient"])
def test_embb_equal_gains_equal_powers(method):
    sol = optimize_embb_power([1e6, 1e6], 4 * 360e3, 0.2, 3e6, 360e3, method=method)
    assert sol.powers[0] == pytest.approx(sol.powers[1], rel=1e-9)


@pytest.mark.parametrize("method", ["exact", "subgradient"])
def test_embb_tight_budget_matches_grid(method):
    w = 360e3
    inst = dict(A=np.array([2e6, 5e5]), target=2 * w, p_max=0.05, zeta=1e5, bandwidth=w)
    sol = optimize_embb_power(inst["A"], inst["target"], inst["p_max"], inst["zeta"], w, method=method)
    assert sol.powers.sum() == pytest.approx(0.05, rel=1e-4)
    ref, _ = dual_grid_max(inst, "E", points=600)
    assert dual_objective(inst, sol.powers)[0] == pytest.approx(ref, rel=1e-2)


@pytest.mark.parametrize("method", ["exact", "subgradient"])
@pytest.mark.parametrize("kind", ["E", "U"])
def test_dual_solutions_feasible_slack_and_optimal(kind, method):
    rng = np.random.default_rng(10 + (kind == "U"))
    for _ in range(30):
        inst = dual_instance(rng, kind)
        if kind == "E":
            sol = optimize_embb_power(inst["A"], inst["target"], inst["p_max"], inst["zeta"],
                                      inst["bandwidth"], method=method)
            rate = (inst["bandwidth"] * np.log2(1 + inst["A"] * sol.powers)).sum()
            assert rate >= inst["target"] * (1 - 1e-4)
        else:
            sol = optimize_urllc_power(inst["A"], inst["target"], inst["p_max"], inst["zeta"],
                                       inst["bandwidth"], method=method)
            assert np.all(sol.powers >= inst["target"] / inst["A"])
        assert sol.feasible
        assert sol.powers.sum() <= inst["p_max"] * (1 + 1e-4)
        cs_rate, cs_power = sol.slackness(inst["target"] if kind == "E" else 0.0,
                                          inst["p_max"], inst["zeta"])
        assert cs_rate < 1e-3 and cs_power < 1e-3
        ref, _ = dual_grid_max(inst, kind)
        got = dual_objective(inst, sol.powers)[0]
        assert got >= ref - 1e-2 * abs(ref)
        assert abs(got - ref) <= 1e-2 * abs(ref)


def test_urllc_floor_clamp():
    a, gamma, zeta, w = 1e3, 0.5, 1e10, 2880e3
    sol = optimize_urllc_power([a], gamma, 0.2, zeta, w)
    assert sol.powers[0] == gamma / a


def test_urllc_single_sc_reduces_to_mmtc():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = 10 ** rng.uniform(4, 9)
        zeta = 10 ** rng.uniform(5, 8)
        gamma = rng.uniform(0, 0.5)
        if gamma / a > 0.2:
            continue
        u = optimize_urllc_power([a], gamma, 0.2, zeta, 2880e3)
        m = optimize_mmtc_power(a, gamma, 0.2, zeta, 2880e3)
        assert u.powers[0] == pytest.approx(m.power, rel=1e-12)


def test_urllc_infeasible_floors():
    sol = optimize_urllc_power([10.0, 10.0], 1.5, 0.2, 1e6, 2880e3)
    assert not sol.feasible


def test_dual_config_cap_reports_iterations():
    inst = dict(A=np.array([3e6, 1e6]), target=6 * 360e3)
    sol = optimize_embb_power(inst["A"], inst["target"], 0.2, 1e6, 360e3, method="subgradient",
                              dual=DualConfig(max_iter=3))
    assert sol.iterations <= 3


# ---------------------------------------------------------------------------
# subtractive objective and Dinkelbach
# ---------------------------------------------------------------------------


def _single_mmtc(g=1e-11, **kw):
    cfg = NetworkConfig(num_urllc=0, num_embb=0, num_mmtc=1, num_sc_urllc=0, num_sc_embb=1, **kw)
    cell = Cell.build(cfg, positions=[[200.0, 0.0]])
    return cell, ChannelRealization(np.array([[g]])), np.array([[1]], dtype=np.int8)


def test_subtractive_objective_identities():
    rng = np.random.default_rng(4)
    cell, b, ch, _ = random_instance(rng)
    res = dinkelbach_allocate(b, ch, cell)
    while not res.feasible:
        cell, b, ch, _ = random_instance(rng)
        res = dinkelbach_allocate(b, ch, cell)
    st = res.state
    report = check_constraints(st, ch, cell)
    r_tot = ee_factor(st, ch, cell) * (st.P.sum() + cell.num_users * cell.config.circuit_power)
    assert subtractive_objective(st, ch, cell, 0.0) == pytest.approx(r_tot, rel=1e-12)
    assert report.satisfied
    assert subtractive_objective(st, ch, cell, r_tot / st.P.sum()) == pytest.approx(0.0, abs=1e-6 * r_tot)
    zeta = 1.234e6
    assert subtractive_objective(st, ch, cell, zeta) == pytest.approx(r_tot - zeta * st.P.sum(), rel=1e-12)


def test_dinkelbach_single_mmtc_matches_grid():
    for g in [1e-12, 1e-11, 1e-10, 1e-9]:
        cell, ch, b = _single_mmtc(g)
        res = dinkelbach_allocate(b, ch, cell)
        assert res.feasible
        w = cell.bandwidths[0]
        n0 = oracles.noise_watts(6, -174, w)
        lo = oracles.target_sinr(256, 2e-3, w, 1e-5) * n0 / g
        ee = lambda p: oracles.fbl_rate(p * g / n0, w, 2e-3, 1e-5) / (p + 0.05)
        _, best = oracles.grid_max_1d(ee, lo, 0.2)
        assert res.ee == pytest.approx(best, rel=5e-3)
        assert res.ee >= best * (1 - 1e-9)


def test_dinkelbach_urllc_plus_mmtc_matches_grid():
    cfg = NetworkConfig(num_urllc=1, num_embb=0, num_mmtc=1, num_sc_urllc=1, num_sc_embb=0)
    cell = Cell.build(cfg, positions=[[150.0, 0.0], [300.0, 0.0]])
    rng = np.random.default_rng(5)
    done = 0
    for _ in range(10):
        g = 10 ** rng.uniform(-12, -10, size=(2, 1))
        b = np.ones((2, 1), dtype=np.int8)
        ch = ChannelRealization(g)
        ref = oracles.grid_max_ee(problems_for(cell, b, ch), 2, 0.05)
        res = dinkelbach_allocate(b, ch, cell)
        if ref is None:
            assert not res.feasible
            continue
        assert res.feasible
        assert res.ee >= 0.98 * ref
        done += 1
    assert done >= 5


def test_dinkelbach_infeasible_target():
    cell, ch, b = _single_mmtc(1e-17)
    res = dinkelbach_allocate(b, ch, cell)
    assert not res.feasible and res.state is None and res.reason


def test_dinkelbach_rejects_c2():
    cell, ch, _ = _single_mmtc()
    res = dinkelbach_allocate(np.zeros((1, 1), dtype=np.int8), ch, cell)
    assert not res.feasible and "C2" in res.reason


def test_dinkelbach_iteration_cap_raises():
    cell, ch, b = _single_mmtc()
    with pytest.raises(DinkelbachNotConverged) as info:
        dinkelbach_allocate(b, ch, cell, max_iter=1)
    assert info.value.last_zeta > 0


@pytest.mark.parametrize("inner", ["exact", "sequential"])
def test_dinkelbach_trace_monotone_with_residual(inner):
    rng = np.random.default_rng(6)
    for _ in range(30):
        cell, b, ch, _ = random_instance(rng)
        res = dinkelbach_allocate(b, ch, cell, inner=inner)
        assert np.all(np.diff(res.zeta_trace) >= 0)
        if res.feasible:
            denom = res.state.P.sum() + cell.num_users * cell.config.circuit_power
            resid = subtractive_objective(res.state, ch, cell, res.ee, include_circuit=True)
            assert abs(resid) <= 1e-6 * res.ee * denom
            assert check_constraints(res.state, ch, cell).satisfied


def test_dinkelbach_beats_grid_on_random_instances():
    rng = np.random.default_rng(7)
    ratios = []
    while len(ratios) < 15:
        cell, b, ch, probs = random_instance(rng)
        ref = oracles.grid_max_ee(probs, cell.num_users, cell.config.circuit_power, points=60)
        res = dinkelbach_allocate(b, ch, cell)
        if ref is None:
            continue
        assert res.feasible, res.reason
        ratios.append(res.ee / ref)
    assert min(ratios) >= 0.98


def test_sequential_subgradient_agrees_with_sequential_exact():
    rng = np.random.default_rng(8)
    for _ in range(15):
        cell, b, ch, _ = random_instance(rng)
        a = dinkelbach_allocate(b, ch, cell, inner="sequential", method="subgradient")
        c = dinkelbach_allocate(b, ch, cell, inner="sequential", method="exact")
        assert a.feasible == c.feasible
        if a.feasible:
            assert a.ee == pytest.approx(c.ee, rel=5e-3)


def test_multi_sc_embb_uses_sequential_fallback():
    cfg = NetworkConfig(num_urllc=0, num_embb=1, num_mmtc=2, num_sc_urllc=0, num_sc_embb=2,
                        embb_spectral_efficiency=2.0)
    cell = Cell.build(cfg, positions=[[100.0, 0.0], [200.0, 0.0], [0.0, 250.0]])
    g = np.array([[3e-11, 2e-11], [1e-11, 1e-11], [5e-12, 6e-12]])
    b = np.array([[1, 1], [1, 0], [0, 1]], dtype=np.int8)
    res = dinkelbach_allocate(b, ChannelRealization(g), cell)
    assert res.feasible
    assert check_constraints(res.state, ChannelRealization(g), cell).satisfied


def test_allocation_state_respects_assignment():
    rng = np.random.default_rng(9)
    for _ in range(20):
        cell, b, ch, _ = random_instance(rng)
        res = dinkelbach_allocate(b, ch, cell)
        if res.feasible:
            assert np.all(res.state.P[b == 0] == 0)
            assert np.all(res.state.P.sum(axis=1) <= cell.p_max * (1 + 1e-9))
            assert isinstance(res.state, AllocationState)
