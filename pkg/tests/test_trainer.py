import numpy as np
import pytest

import oracles
from noma_ee.agents import ActionSpace, Scheme, power_levels
from noma_ee.nn import NetConfig
from noma_ee.system_model import (
    AllocationState,
    Cell,
    ChannelRealization,
    ConstraintReport,
    NetworkConfig,
    Violation,
    check_constraints,
    ee_factor,
    grant_schedule,
)
from noma_ee.trainer import (
    EpisodeConfig,
    Environment,
    apply_actions_fullmad,
    apply_actions_homad,
    compute_reward,
    detect_convergence,
    min_grant_powers,
    run_training,
)

SMALL = NetConfig(hidden=(16, 8), dtype="float64")


def _free_sc_cell():
    """URLLC on SC 0, eMBB on SC 1, SC 2 left to the single mMTC user."""
    cfg = NetworkConfig(num_urllc=1, num_embb=1, num_mmtc=1, num_sc_urllc=1, num_sc_embb=2)
    cell = Cell.build(cfg, positions=[[100.0, 0.0], [0.0, 150.0], [200.0, 0.0]])
    g = np.full((3, 3), 1e-10)
    return cell, ChannelRealization(g), grant_schedule(cell)


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------


def test_compute_reward_two_branches():
    assert compute_reward(ConstraintReport([Violation("C5", 2, 0)]), 3e6) == 0.0
    assert compute_reward(ConstraintReport(), 2.5e6) == 2.5e6


def test_fullmad_feasible_free_sc():
    cell, ch, sched = _free_sc_cell()
    low = power_levels(23.0, 4)[0]
    out = apply_actions_fullmad([2], [low], ch, cell, sched)
    assert out.clean and out.reward > 0
    assert check_constraints(out.state, ch, cell).satisfied
    assert out.reward == pytest.approx(ee_factor(out.state, ch, cell), rel=1e-12)


def test_fullmad_gb_violation_zero_reward():
    cfg = NetworkConfig(num_urllc=1, num_embb=0, num_mmtc=1, num_sc_urllc=1, num_sc_embb=0)
    cell = Cell.build(cfg, positions=[[400.0, 0.0], [50.0, 0.0]])
    # weak URLLC user, strong mMTC interferer at full power
    ch = ChannelRealization(np.array([[2e-15], [1e-9]]))
    out = apply_actions_fullmad([0], [0.2], ch, cell, grant_schedule(cell))
    assert not out.clean and out.reward == 0.0
    assert "C3" in out.report.constraints()


def test_fullmad_deterministic():
    cell, ch, sched = _free_sc_cell()
    a = apply_actions_fullmad([1], [0.02], ch, cell, sched)
    b = apply_actions_fullmad([1], [0.02], ch, cell, sched)
    assert a.reward == b.reward and np.array_equal(a.state.P, b.state.P)


def test_min_grant_powers_meet_targets_exactly():
    cell, ch, sched = _free_sc_cell()
    b = sched.copy()
    b[2, 1] = 1  # mMTC joins the eMBB SC
    P = np.zeros(b.shape)
    P[2, 1] = 0.01
    P = min_grant_powers(b, P, ch, cell)
    report = check_constraints(AllocationState(b, P), ch, cell)
    links = report.links
    assert links.sinr[0, 0] == pytest.approx(cell.target_sinr[0, 0], rel=1e-9)
    assert links.rate[1, 1] == pytest.approx(cell.users[1].target_rate, rel=1e-9)


def test_homad_single_mmtc_matches_grid():
    cell, ch, sched = _free_sc_cell()
    out = apply_actions_homad([2], ch, cell, sched)
    assert out.clean
    # GB users sit alone on their SCs; the EE optimum couples all three users
    # through the shared denominator, so compare with the joint grid search
    from instances import problems_for

    b = sched.copy()
    b[2, 2] = 1
    ref = oracles.grid_max_ee(problems_for(cell, b, ch), 3, 0.05, points=400)
    assert out.reward == pytest.approx(ref, rel=5e-3)
    assert out.reward >= ref * (1 - 1e-9)


def test_homad_infeasible_zero_reward():
    cfg = NetworkConfig(num_urllc=0, num_embb=0, num_mmtc=1, num_sc_urllc=0, num_sc_embb=1)
    cell = Cell.build(cfg, positions=[[400.0, 0.0]])
    ch = ChannelRealization(np.array([[1e-18]]))
    out = apply_actions_homad([0], ch, cell, grant_schedule(cell))
    assert out.reward == 0.0 and out.diagnostic


def test_homad_dominates_fullmad_on_mmtc_only_scs():
    cfg = NetworkConfig(num_urllc=0, num_embb=0, num_mmtc=3, num_sc_urllc=0, num_sc_embb=2)
    rng = np.random.default_rng(0)
    cell = Cell.build(cfg, rng=rng)
    sched = grant_schedule(cell)
    levels = power_levels(23.0, 4)
    checked = 0
    for _ in range(40):
        g = 10 ** rng.uniform(-12, -9, size=(3, 2))
        ch = ChannelRealization(g)
        sc = rng.integers(2, size=3)
        homad = apply_actions_homad(sc, ch, cell, sched)
        for lv in np.ndindex(4, 4, 4):
            fm = apply_actions_fullmad(sc, levels[list(lv)], ch, cell, sched)
            assert homad.reward >= fm.reward * (1 - 1e-9)
            checked += fm.reward > 0
    assert checked > 0


def test_reward_positive_iff_clean():
    env = Environment(NetworkConfig(), seed=3)
    rng = np.random.default_rng(3)
    for scheme in (Scheme.FULL_MAD, Scheme.HOMAD):
        space = ActionSpace(2, 4, scheme.selects_power)
        for t in range(60):
            ch = env.channels(t)
            out = env.step(scheme, rng.integers(space.size, size=4), space, ch)
            assert (out.reward > 0) == out.clean
            if out.clean:
                assert out.reward == pytest.approx(ee_factor(out.state, ch, env.cell), rel=1e-12)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_episode_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(episodes=0)
    with pytest.raises(ValueError):
        EpisodeConfig(sync_period=0)
    assert EpisodeConfig(scheme="fullmad").scheme is Scheme.FULL_MAD


def test_one_step_one_experience():
    ep = EpisodeConfig(episodes=1, timeslots=1, scheme=Scheme.FULL_MAD, eps_start=1.0)
    res = run_training(ep, net=SMALL)
    assert res.log.experiences == 1
    assert len(res.agents.memory) == 1
    assert res.agents.memory.pushes == 1


@pytest.mark.parametrize("scheme", list(Scheme))
def test_training_is_deterministic(scheme):
    ep = EpisodeConfig(episodes=3, timeslots=30, scheme=scheme, seed=4, batch_size=8)
    a = run_training(ep, net=SMALL).log
    b = run_training(ep, net=SMALL).log
    assert a.episode_reward == b.episode_reward
    assert a.violation_rate == b.violation_rate
    assert a.ts_reward == b.ts_reward
    np.testing.assert_array_equal(np.array(a.episode_loss), np.array(b.episode_loss))


def test_sync_count_audit():
    ep = EpisodeConfig(episodes=3, timeslots=70, sync_period=50, scheme=Scheme.FULL_MAD, batch_size=8)
    res = run_training(ep, net=SMALL)
    assert res.log.syncs == (3 * 70) // 50


def test_shared_reward_stored_for_every_agent():
    ep = EpisodeConfig(episodes=1, timeslots=40, scheme=Scheme.FULL_MAD, batch_size=8)
    res = run_training(ep, net=SMALL)
    _, _, r, _ = res.agents.memory.oldest_first()
    assert np.all(r == r[0])
    assert np.allclose(r[0] * ep.reward_unit, res.log.ts_reward)


def test_maql_tables_fill():
    ep = EpisodeConfig(episodes=2, timeslots=50, scheme=Scheme.FULL_MAQL, levels=2)
    res = run_training(ep)
    assert res.agents is None and len(res.tables) == 4
    assert all(len(t) > 0 for t in res.tables)


def test_pure_exploration_is_stationary():
    ep = EpisodeConfig(episodes=40, timeslots=50, scheme=Scheme.FULL_MAQL, eps_start=1.0,
                       eps_decay=1.0, eps_min=1.0)
    r = np.array(run_training(ep).log.episode_reward)
    first, second = r[:20], r[20:]
    se = np.sqrt(first.var(ddof=1) / 20 + second.var(ddof=1) / 20)
    assert abs(first.mean() - second.mean()) < 4 * se


# ---------------------------------------------------------------------------
# convergence detection
# ---------------------------------------------------------------------------


def reference_detector(series, window, tol):
    x = list(map(float, series))
    w = min(window, len(x))
    means = [sum(x[i:i + w]) / w for i in range(len(x) - w + 1)]
    final = means[-1]
    for start in range(len(means)):
        if all(abs(m - final) <= tol * abs(final) for m in means[start:]):
            return start + 1
    return None


def test_detect_convergence_constant():
    assert detect_convergence(np.full(50, 3.0)) == 1


def test_detect_convergence_step():
    series = np.r_[np.zeros(10), np.full(40, 5.0)]
    assert detect_convergence(series, 10, 0.05) == 11


def test_detect_convergence_matches_reference_on_noisy_ramps():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(20, 120))
        knee = int(rng.integers(1, n))
        ramp = np.minimum(np.arange(n) / knee, 1.0) * rng.uniform(1, 10)
        series = ramp + rng.normal(scale=rng.uniform(0, 0.5), size=n)
        got = detect_convergence(series, 10, 0.05)
        ref = reference_detector(series, 10, 0.05)
        assert got == ref


def test_detect_convergence_short_series():
    assert detect_convergence([1.0, 1.0, 1.0], 10) == 1
    assert detect_convergence([], 10) is None
