"""Episode/TS loop for HOMAD, Full-MAD and Full-MAQL.

Every TS all mMTC agents act, the environment turns the joint action into an
allocation, and the shared reward r(t) = zeta(t) (0 on any violation) is
broadcast to every agent.  Grant-based users follow a fixed round-robin
schedule; under HOMAD their powers come from the Dinkelbach allocator,
otherwise they send the least power that meets their target.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .agents import (
    ActionSpace,
    DQNAgents,
    GainQuantizer,
    QTable,
    Scheme,
    StateEncoder,
    dqn_train_step,
    epsilon_at,
    power_levels,
    qtable_key,
    qtable_update,
    select_actions,
    sync_target,
)
from .nn import NetConfig
from .power_opt import DinkelbachNotConverged, dinkelbach_allocate, required_sinr
from .system_model import (
    AllocationState,
    Cell,
    ChannelRealization,
    ConstraintReport,
    ConstraintViolationError,
    NetworkConfig,
    check_constraints,
    decoding_order,
    ee_factor,
    generate_channels,
    grant_schedule,
    placement_rng,
)


@dataclass
class EpisodeConfig:
    episodes: int = 200
    timeslots: int = 100
    sync_period: int = 100
    scheme: Scheme = Scheme.HOMAD
    seed: int = 0
    levels: int = 4
    level_span_db: float = 20.0
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.01
    memory_capacity: int = 10_000
    batch_size: int = 64
    reward_unit: float = 1e7  # bits/J per unit of learning signal
    qtable_alpha: float = 1e-3
    conv_window: int = 10
    conv_tol: float = 0.05

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        for name in ("episodes", "timeslots", "sync_period", "levels", "batch_size", "memory_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.reward_unit <= 0:
            raise ValueError("reward_unit must be positive")


@dataclass
class TimeslotOutcome:
    state: AllocationState
    report: ConstraintReport
    reward: float
    ee: float
    diagnostic: str = ""

    @property
    def clean(self) -> bool:
        return self.report.satisfied


def compute_reward(report: ConstraintReport, zeta: float) -> float:
    """zeta when every constraint holds, else 0."""
    return float(zeta) if report.satisfied else 0.0


def assignment_from_actions(sc_choice, cell: Cell, schedule: np.ndarray) -> np.ndarray:
    b = schedule.copy()
    b[cell.mmtc_ids, :] = 0
    b[cell.mmtc_ids, np.asarray(sc_choice, dtype=int)] = 1
    return b


def _evaluate(state: AllocationState, channels: ChannelRealization, cell: Cell,
              diagnostic: str = "") -> TimeslotOutcome:
    report = check_constraints(state, channels, cell)
    zeta = ee_factor(state, channels, cell, report=report)
    return TimeslotOutcome(state, report, compute_reward(report, zeta), zeta, diagnostic)


def min_grant_powers(b: np.ndarray, P: np.ndarray, channels: ChannelRealization, cell: Cell) -> np.ndarray:
    """Least GB-user powers meeting their SINR targets given the mMTC powers in ``P``.

    Each GB user holds at most one slot in a decoding order, so its power on
    an SC only depends on the users decoded after it.  A user whose needs
    exceed P_max is scaled back to P_max (and will fail its QoS check).
    """
    P = P.copy()
    g = channels.gains
    req = required_sinr(cell, b)
    services = cell.services
    for k in range(cell.num_subchannels):
        users = np.flatnonzero(b[:, k])
        order = decoding_order(users, g[:, k], services)
        for pos, z in enumerate(order):
            if services[z].grant_based:
                later = order[pos + 1:]
                interference = float(np.dot(g[later, k], P[later, k])) if later else 0.0
                P[z, k] = req[z, k] * (interference + cell.noise[k]) / g[z, k]
    for z in range(cell.num_users):
        if services[z].grant_based:
            total = P[z].sum()
            if total > cell.p_max[z]:
                P[z] *= cell.p_max[z] / total
    return P


def apply_actions_fullmad(sc_choice, powers, channels: ChannelRealization, cell: Cell,
                          schedule: np.ndarray) -> TimeslotOutcome:
    """mMTC users transmit at their chosen (SC, power); GB users at least power."""
    b = assignment_from_actions(sc_choice, cell, schedule)
    P = np.zeros(b.shape)
    P[cell.mmtc_ids, np.asarray(sc_choice, dtype=int)] = powers
    try:
        P = min_grant_powers(b, P, channels, cell)
    except ConstraintViolationError as exc:
        return _evaluate(AllocationState(b, P), channels, cell, str(exc))
    return _evaluate(AllocationState(b, P), channels, cell)


def apply_actions_homad(sc_choice, channels: ChannelRealization, cell: Cell,
                        schedule: np.ndarray, tol: float = 1e-6) -> TimeslotOutcome:
    """SC choices from the agents, powers from the Dinkelbach allocator."""
    b = assignment_from_actions(sc_choice, cell, schedule)
    try:
        alloc = dinkelbach_allocate(b, channels, cell, tol=tol)
    except DinkelbachNotConverged as exc:
        return _evaluate(AllocationState(b, np.zeros(b.shape)), channels, cell,
                         f"power optimizer did not converge (last zeta {exc.last_zeta:.6g})")
    if not alloc.feasible:
        return _evaluate(AllocationState(b, np.zeros(b.shape)), channels, cell, alloc.reason)
    return _evaluate(alloc.state, channels, cell)


class Environment:
    """Cell, GB schedule and per-TS channels of one seeded run."""

    def __init__(self, network: NetworkConfig, seed: int, levels: int = 4, level_span_db: float = 20.0):
        self.network = network
        self.seed = seed
        self.cell = Cell.build(network, rng=placement_rng(seed))
        self.schedule = grant_schedule(self.cell)
        self.encoder = StateEncoder.for_config(network)
        self.levels_w = power_levels(network.p_max_dbm, levels, level_span_db)

    def channels(self, step: int) -> ChannelRealization:
        return generate_channels(self.cell, self.seed, step)

    def step(self, scheme: Scheme, actions, space: ActionSpace, channels) -> TimeslotOutcome:
        actions = np.asarray(actions)
        if scheme is Scheme.HOMAD:
            return apply_actions_homad(actions, channels, self.cell, self.schedule)
        sc, lvl = np.divmod(actions, space.levels)
        return apply_actions_fullmad(sc, self.levels_w[lvl], channels, self.cell, self.schedule)


@dataclass
class TrainingLog:
    scheme: str
    seed: int
    episode_reward: list[float] = field(default_factory=list)
    episode_loss: list[list[float]] = field(default_factory=list)
    violation_rate: list[float] = field(default_factory=list)
    episode_time: list[float] = field(default_factory=list)
    ts_reward: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    syncs: int = 0
    experiences: int = 0
    rejected_steps: int = 0
    failures: dict[str, int] = field(default_factory=dict)
    convergence_episode: int | None = None

    def final_mean(self, window: int = 10) -> float:
        tail = self.episode_reward[-window:]
        return float(np.mean(tail)) if tail else 0.0


@dataclass
class TrainingResult:
    log: TrainingLog
    agents: DQNAgents | None = None
    tables: list[QTable] | None = None


def run_training(ep: EpisodeConfig, network: NetworkConfig | None = None,
                 net: NetConfig | None = None) -> TrainingResult:
    """Algorithm-1 loop: act, share the reward, store, train, sync every B TSs."""
    network = network or NetworkConfig()
    net = net or NetConfig(dtype="float32")
    env = Environment(network, ep.seed, ep.levels, ep.level_span_db)
    cell = env.cell
    mmtc = cell.mmtc_ids
    A, K = len(mmtc), cell.num_subchannels
    scheme = ep.scheme
    space = ActionSpace(K, ep.levels, scheme.selects_power)
    rng = np.random.default_rng([ep.seed, 2])
    enc = env.encoder
    agents = tables = quant = None
    if scheme is Scheme.FULL_MAQL:
        tables = [QTable(space.size) for _ in range(A)]
        quant = GainQuantizer.for_distances(cell.distances[mmtc], network)
    else:
        agents = DQNAgents.create(A, enc.dim, space.size, rng, net, ep.memory_capacity, ep.gamma)
    log = TrainingLog(scheme.value, ep.seed)
    step = 0
    for i in range(ep.episodes):
        t0 = time.perf_counter()
        eps = epsilon_at(i, ep.eps_start, ep.eps_decay, ep.eps_min)
        prev_sc = np.full(A, -1)
        prev_p = np.zeros(A)
        prev_a = [None] * A
        ch = env.channels(step)
        s = enc.encode_all(ch.gains[mmtc], prev_sc, prev_p)
        keys = [qtable_key(bins, None) for bins in quant.bins(ch.gains[mmtc])] if quant else None
        rewards, losses, violations = [], [], 0
        for t in range(ep.timeslots):
            if agents is not None:
                q = agents.q_values(s)
            else:
                q = np.stack([tab.values(key) for tab, key in zip(tables, keys)])
            a = select_actions(q, eps, rng)
            out = env.step(scheme, a, space, ch)
            if out.diagnostic:
                label = out.diagnostic.split(":")[0].split(" on ")[0]
                log.failures[label] = log.failures.get(label, 0) + 1
            reward = out.reward
            violations += not out.clean
            rewards.append(reward)
            r = reward / ep.reward_unit
            step += 1
            ch_next = env.channels(step)
            sc = a // space.levels if scheme.selects_power else a
            prev_p = out.state.P[mmtc, sc]
            s_next = enc.encode_all(ch_next.gains[mmtc], sc, prev_p)
            if agents is not None:
                agents.memory.push(s, a, r, s_next)
                if len(agents.memory) >= ep.batch_size:
                    losses.append(dqn_train_step(agents, agents.memory.sample(ep.batch_size)))
                if step % ep.sync_period == 0:
                    sync_target(agents)
            else:
                keys_next = [qtable_key(bins, int(act)) for bins, act in zip(quant.bins(ch_next.gains[mmtc]), a)]
                for m in range(A):
                    qtable_update(tables[m], keys[m], int(a[m]), r, keys_next[m], ep.qtable_alpha, ep.gamma)
                keys = keys_next
            log.experiences += 1
            s, ch = s_next, ch_next
        log.episode_reward.append(float(np.mean(rewards)))
        log.episode_loss.append(np.nanmean(losses, axis=0).tolist() if losses else [float("nan")] * A)
        log.violation_rate.append(violations / ep.timeslots)
        log.episode_time.append(time.perf_counter() - t0)
        log.ts_reward.extend(rewards)
        log.epsilon.append(eps)
    if agents is not None:
        log.syncs = agents.syncs
        log.rejected_steps = agents.rejected_steps
    log.convergence_episode = detect_convergence(log.episode_reward, ep.conv_window, ep.conv_tol)
    return TrainingResult(log, agents, tables)


def detect_convergence(series, window: int = 10, tol: float = 0.05) -> int | None:
    """First episode (1-based) from which every forward window mean stays within
    ``tol`` (relative) of the final window mean.

    The window starting at episode e averages episodes e .. e+window-1; a
    series shorter than the window uses its full length.
    """
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        return None
    w = min(window, x.size)
    means = np.convolve(x, np.ones(w) / w, mode="valid")
    final = means[-1]
    bad = np.abs(means - final) > tol * abs(final)
    if not bad.any():
        return 1
    last_bad = int(np.flatnonzero(bad)[-1])
    return last_bad + 2 if last_bad + 1 < means.size else None
