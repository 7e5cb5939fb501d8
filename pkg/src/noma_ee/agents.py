"""Per-agent learning machinery for the mMTC agents.

Each mMTC device is an agent.  Its observation is its own gain on every SC
plus what it did in the previous TS; its action is an SC (HOMAD) or an
(SC, power level) pair (Full-MAD / Full-MAQL).  DQN agents are stored as one
stack of networks so that all agents train with batched matmuls; the
arithmetic per agent is unchanged.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ncx2

from .nn import AdamState, NetConfig, NetworkParams, adam_step, backward, clone_into, forward
from .system_model import NetworkConfig, dbm_to_watt, pathloss_linear


class Scheme(str, enum.Enum):
    HOMAD = "homad"
    FULL_MAD = "fullmad"
    FULL_MAQL = "fullmaql"

    @property
    def selects_power(self) -> bool:
        return self is not Scheme.HOMAD


# ----------------------------------------------------------------------------
# Actions
# ----------------------------------------------------------------------------


def power_levels(p_max_dbm: float, levels: int, span_db: float = 20.0) -> np.ndarray:
    """``levels`` powers (W) evenly spaced in dBm over [p_max - span, p_max]."""
    if levels < 1:
        raise ValueError("need at least one power level")
    if levels == 1:
        return np.array([dbm_to_watt(p_max_dbm)])
    if not span_db > 0:
        raise ValueError("span_db must be positive when levels > 1")
    return dbm_to_watt(np.linspace(p_max_dbm - span_db, p_max_dbm, levels))


@dataclass(frozen=True)
class ActionSpace:
    """Flat action indices.  With power selection, index = k * L + l (zero-based)."""

    num_subchannels: int
    levels: int = 1
    selects_power: bool = True

    @property
    def size(self) -> int:
        return self.num_subchannels * (self.levels if self.selects_power else 1)

    def decode(self, index: int) -> tuple[int, int | None]:
        """Zero-based (SC, level); level is None without power selection."""
        index = int(index)
        if not 0 <= index < self.size:
            raise IndexError(f"action {index} outside [0, {self.size})")
        if not self.selects_power:
            return index, None
        return index // self.levels, index % self.levels

    def encode(self, sc: int, level: int | None = None) -> int:
        if not 0 <= sc < self.num_subchannels:
            raise IndexError(f"SC {sc} outside [0, {self.num_subchannels})")
        if not self.selects_power:
            return sc
        if level is None or not 0 <= level < self.levels:
            raise IndexError(f"level {level} outside [0, {self.levels})")
        return sc * self.levels + level


def decode_action(index: int, space: ActionSpace) -> tuple[int, int | None]:
    """One-based (SC k, level l) of a flat action index; l is None without power selection."""
    k, level = space.decode(index)
    return k + 1, None if level is None else level + 1


# ----------------------------------------------------------------------------
# States
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class StateEncoder:
    """s_m = [gain block, previous-SC indicators, previous powers], length 3K.

    Gains enter in dB, mapped affinely so the path-loss range of the cell
    lands on [-1, 1]; powers are divided by P_max.
    """

    num_subchannels: int
    center_db: float
    half_span_db: float
    p_max: float

    @classmethod
    def for_config(cls, cfg: NetworkConfig) -> "StateEncoder":
        pl = pathloss_linear(np.array([cfg.min_distance, cfg.cell_radius]),
                             cfg.pathloss_intercept_db, cfg.pathloss_slope_db)
        g_db = 10 * np.log10(pl)
        return cls(cfg.num_subchannels, float(g_db.mean()), float(abs(g_db[0] - g_db[1]) / 2),
                   cfg.p_max)

    @property
    def dim(self) -> int:
        return 3 * self.num_subchannels

    def encode(self, gains, prev_sc=None, prev_power=0.0) -> np.ndarray:
        """One agent's state.  ``prev_sc=None`` is the first TS (all-zero block)."""
        gains = np.asarray(gains, dtype=float)
        K = self.num_subchannels
        s = np.zeros(3 * K)
        s[:K] = (10 * np.log10(gains) - self.center_db) / self.half_span_db
        if prev_sc is not None:
            s[K + prev_sc] = 1.0
            s[2 * K + prev_sc] = prev_power / self.p_max
        return s

    def encode_all(self, gains, prev_sc, prev_power) -> np.ndarray:
        """States of every agent: gains (A, K), prev_sc (A,) with -1 for none."""
        gains = np.asarray(gains, dtype=float)
        A, K = gains.shape
        s = np.zeros((A, 3 * K))
        s[:, :K] = (10 * np.log10(gains) - self.center_db) / self.half_span_db
        prev_sc = np.asarray(prev_sc)
        has = prev_sc >= 0
        rows = np.flatnonzero(has)
        s[rows, K + prev_sc[has]] = 1.0
        s[rows, 2 * K + prev_sc[has]] = np.asarray(prev_power)[has] / self.p_max
        return s

    def decode(self, s) -> tuple[np.ndarray, int | None, float]:
        K = self.num_subchannels
        s = np.asarray(s, dtype=float)
        gains = 10 ** ((s[:K] * self.half_span_db + self.center_db) / 10)
        hot = np.flatnonzero(s[K:2 * K])
        if len(hot) == 0:
            return gains, None, 0.0
        k = int(hot[0])
        return gains, k, float(s[2 * K + k] * self.p_max)


def build_state(encoder: StateEncoder, gains, prev_sc=None, prev_power=0.0) -> np.ndarray:
    return encoder.encode(gains, prev_sc, prev_power)


# ----------------------------------------------------------------------------
# Policies
# ----------------------------------------------------------------------------


def greedy(q_values) -> np.ndarray | int:
    """Argmax along the last axis; ties go to the lowest index."""
    return np.argmax(q_values, axis=-1)


def select_action(q, state, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy for one agent.  ``q`` is a network, a Q-table or a Q-value vector."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if isinstance(q, NetworkParams):
        values = forward(q, state)
    elif isinstance(q, QTable):
        values = q.values(state)
    else:
        values = np.asarray(q, dtype=float)
    if rng.random() < eps:
        return int(rng.integers(len(values)))
    return int(greedy(values))


def select_actions(q_values: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy for all agents at once; q_values has shape (A, |A_m|).

    Both random draws are made every call so the stream consumption does
    not depend on the Q-values.
    """
    A, n = q_values.shape
    explore = rng.random(A) < eps
    random_a = rng.integers(n, size=A)
    return np.where(explore, random_a, greedy(q_values))


def epsilon_at(episode: int, start: float = 1.0, decay: float = 0.995, floor: float = 0.01) -> float:
    """Exploration rate for a zero-based episode index."""
    return max(floor, start * decay ** episode)


# ----------------------------------------------------------------------------
# Replay memory
# ----------------------------------------------------------------------------


class ReplayMemory:
    """FIFO ring buffer of (s, a, r, s') with uniform sampling.

    With ``num_agents`` set, every push stores one experience per agent and
    each agent samples its own indices.
    """

    def __init__(self, capacity: int, state_dim: int, rng: np.random.Generator,
                 num_agents: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        lead = () if num_agents is None else (num_agents,)
        self.capacity = capacity
        self.num_agents = num_agents
        self.rng = rng
        self.states = np.zeros(lead + (capacity, state_dim))
        self.next_states = np.zeros(lead + (capacity, state_dim))
        self.actions = np.zeros(lead + (capacity,), dtype=np.int64)
        self.rewards = np.zeros(lead + (capacity,))
        self.size = 0
        self._head = 0
        self.pushes = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s_next) -> None:
        if np.any(np.asarray(r) < 0):
            raise ValueError("rewards are nonnegative")
        i = self._head
        self.states[..., i, :] = s
        self.next_states[..., i, :] = s_next
        self.actions[..., i] = a
        self.rewards[..., i] = r
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushes += 1

    def sample(self, batch: int):
        """Uniform draw with replacement of ``batch`` experiences (per agent)."""
        if self.size < batch:
            raise ValueError(f"memory holds {self.size} < batch {batch} experiences")
        if self.num_agents is None:
            idx = self.rng.integers(self.size, size=batch)
            return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]
        idx = self.rng.integers(self.size, size=(self.num_agents, batch))
        rows = np.arange(self.num_agents)[:, None]
        return (self.states[rows, idx], self.actions[rows, idx], self.rewards[rows, idx],
                self.next_states[rows, idx])

    def oldest_first(self):
        """Stored experiences in insertion order (for audits)."""
        start = self._head if self.size == self.capacity else 0
        order = (start + np.arange(self.size)) % self.capacity
        return (self.states[..., order, :], self.actions[..., order], self.rewards[..., order],
                self.next_states[..., order, :])


# ----------------------------------------------------------------------------
# DQN
# ----------------------------------------------------------------------------


@dataclass
class DQNAgents:
    """Online and target networks of A agents (stacked), their optimizer and memory."""

    online: NetworkParams
    target: NetworkParams
    adam: AdamState
    memory: ReplayMemory
    gamma: float = 0.9
    syncs: int = 0
    rejected_steps: int = 0

    @classmethod
    def create(cls, num_agents: int, state_dim: int, num_actions: int, rng: np.random.Generator,
               net: NetConfig | None = None, capacity: int = 10_000, gamma: float = 0.9):
        net = net or NetConfig()
        online = NetworkParams.init(net.sizes(state_dim, num_actions), rng, stack=num_agents,
                                    dtype=net.dtype)
        memory = ReplayMemory(capacity, state_dim, rng, num_agents=num_agents)
        return cls(online, online.copy(), AdamState.for_params(online, net), memory, gamma)

    def q_values(self, states) -> np.ndarray:
        """Q-values of each agent for its own state; states (A, d) -> (A, |A_m|)."""
        return forward(self.online, np.asarray(states)[:, None, :])[:, 0, :]


def td_targets(target: NetworkParams, rewards, next_states, gamma: float) -> np.ndarray:
    """y = r + gamma max_a' Q(s', a'; theta')."""
    return rewards + gamma * forward(target, next_states).max(axis=-1)


def dqn_loss_and_grads(online: NetworkParams, target: NetworkParams, batch, gamma: float):
    """Mean squared TD error per agent and its parameter gradients."""
    s, a, r, s2 = batch
    y = td_targets(target, r, s2, gamma)
    q, cache = forward(online, s, return_cache=True)
    q_a = np.take_along_axis(q, a[..., None], axis=-1)[..., 0]
    diff = q_a - y
    n = diff.shape[-1]
    loss = np.mean(diff * diff, axis=-1)
    grad_out = np.zeros_like(q)
    np.put_along_axis(grad_out, a[..., None], (2.0 / n) * diff[..., None], axis=-1)
    return loss, backward(online, cache, grad_out)


def dqn_train_step(agents: DQNAgents, batch) -> np.ndarray:
    """One Adam step on the TD loss of ``batch``; returns the per-agent loss.

    Agents whose loss or gradients are non-finite skip the update; their
    loss is reported as nan.
    """
    loss, grads = dqn_loss_and_grads(agents.online, agents.target, batch, agents.gamma)
    finite = np.isfinite(loss)
    if not np.all(finite):
        grads.flat[~finite] = np.nan  # forces rejection for those agents
    ok = adam_step(agents.online, grads, agents.adam)
    bad = ~np.asarray(ok)
    agents.rejected_steps += int(np.count_nonzero(bad))
    return np.where(bad, np.nan, loss)


def sync_target(agents: DQNAgents) -> None:
    clone_into(agents.online, agents.target)
    agents.syncs += 1


# ----------------------------------------------------------------------------
# Tabular baseline
# ----------------------------------------------------------------------------


@dataclass
class GainQuantizer:
    """Per-agent, per-SC quartile edges (dB) of the Rician-faded gain."""

    edges_db: np.ndarray  # (A, 3)

    @classmethod
    def for_distances(cls, distances, cfg: NetworkConfig) -> "GainQuantizer":
        k = 10 ** (cfg.rician_k_db / 10)
        # 2(K+1)|h|^2 is noncentral chi-square with 2 dof and noncentrality 2K
        q = ncx2.ppf([0.25, 0.5, 0.75], 2, 2 * k) / (2 * (k + 1)) if math.isfinite(k) else np.ones(3)
        pl_db = 10 * np.log10(pathloss_linear(np.asarray(distances, float),
                                              cfg.pathloss_intercept_db, cfg.pathloss_slope_db))
        return cls(pl_db[:, None] + 10 * np.log10(q)[None, :])

    def bins(self, gains) -> np.ndarray:
        """gains (A, K) -> bin index in {0..3} per entry."""
        g_db = 10 * np.log10(np.asarray(gains, float))
        return (g_db[:, :, None] > self.edges_db[:, None, :]).sum(axis=-1)


class QTable:
    """Sparse Q-table; unseen states read as all-zero rows."""

    def __init__(self, num_actions: int):
        self.num_actions = num_actions
        self.table: dict[tuple, np.ndarray] = {}

    def values(self, key) -> np.ndarray:
        row = self.table.get(tuple(key))
        return np.zeros(self.num_actions) if row is None else row.copy()

    def row(self, key) -> np.ndarray:
        key = tuple(key)
        if key not in self.table:
            self.table[key] = np.zeros(self.num_actions)
        return self.table[key]

    def __len__(self) -> int:
        return len(self.table)


def qtable_key(gain_bins, prev_action: int | None) -> tuple:
    return tuple(int(b) for b in gain_bins) + (-1 if prev_action is None else int(prev_action),)


def qtable_update(table: QTable, s, a: int, r: float, s_next, alpha: float, gamma: float) -> float:
    """Q(s,a) += alpha (r + gamma max_a' Q(s',a') - Q(s,a)); returns the TD error."""
    target = r + gamma * float(np.max(table.values(s_next)))
    row = table.row(s)
    td = target - row[a]
    row[a] += alpha * td
    return td
