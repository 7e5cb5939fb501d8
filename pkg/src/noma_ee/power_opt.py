"""EE-maximizing power control for a fixed subchannel assignment.

The outer loop is Dinkelbach's method on R^tot / (P^Tx + M P_c).  For a given
parameter zeta the subtractive problem R^tot - zeta P^Tx is solved either

* per user in reverse SIC order (``inner="sequential"``): once every user
  decoded after user l has its power fixed, user l sees a fixed effective gain

      A_l = g_l / (sum_{j > l} g_j p_j + noise)

  and its rate-minus-power term has a closed form (mMTC) or a water-filling
  dual solution (eMBB / URLLC).  This ignores the interference user l
  inflicts on users decoded before it, so it is only a heuristic; or
* exactly per SC (``inner="exact"``, the default), using the fact that the
  SC sum rate depends on the received powers only through their total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .system_model import (
    LN2,
    AllocationState,
    Cell,
    ChannelRealization,
    ConstraintViolationError,
    ServiceClass,
    check_constraints,
    decoding_order,
    total_rate,
)


class DinkelbachNotConverged(RuntimeError):
    def __init__(self, last_zeta: float, iterations: int):
        super().__init__(f"Dinkelbach did not converge in {iterations} iterations "
                         f"(last zeta={last_zeta:.6g})")
        self.last_zeta = last_zeta
        self.iterations = iterations


@dataclass
class MmtcSolution:
    power: float
    feasible: bool


@dataclass
class DualSolution:
    """Per-SC powers of one grant-based user plus the multipliers that produced them.

    ``mu``/``nu`` belong to the eMBB rate/budget constraints, ``theta`` to the
    URLLC budget.  Residuals are the constraint slacks at the returned powers.
    """

    powers: np.ndarray
    feasible: bool
    mu: float = 0.0
    nu: float = 0.0
    theta: float = 0.0
    iterations: int = 0
    rate_residual: float = 0.0  # sum C_j - R_tar (>= 0 when met)
    power_residual: float = 0.0  # P_max - sum p_j (>= 0 when met)

    def slackness(self, target_rate: float, p_max: float, zeta: float) -> tuple[float, float]:
        """Dimensionless complementary-slackness residuals (rate term, budget term).

        The rate term is mu times the relative rate slack.  The budget
        multiplier (nu for eMBB, theta for URLLC) is expressed as its share
        nu / (nu + zeta) of the marginal power price before multiplying the
        relative power slack.
        """
        rate = self.mu * abs(self.rate_residual) / max(target_rate, 1.0)
        lam = self.nu + self.theta
        price = lam / (lam + zeta) if lam + zeta > 0 else 0.0
        return rate, price * abs(self.power_residual) / p_max


@dataclass
class DualConfig:
    """Subgradient settings for the iterative dual solver."""

    max_iter: int = 5000
    step0: float = 1.0  # first step, in units of each multiplier's natural scale
    grow: float = 1.5  # step factor while the constraint gap keeps its sign
    shrink: float = 0.5  # step factor when the gap changes sign
    rate_rtol: float = 1e-4
    power_rtol: float = 1e-4


class _Step:
    """Diminishing step for one multiplier.

    The step grows while the subgradient keeps its sign, so the multiplier
    can travel across several orders of magnitude, and shrinks on every sign
    change, so it tends to zero as the iterates settle around the optimum.
    """

    def __init__(self, cfg: DualConfig, scale: float):
        self.size = cfg.step0 * scale
        self.grow, self.shrink = cfg.grow, cfg.shrink
        self.sign = 0.0

    def __call__(self, multiplier: float, subgradient: float) -> float:
        sign = math.copysign(1.0, subgradient) if subgradient else 0.0
        if sign and self.sign:
            self.size *= self.grow if sign == self.sign else self.shrink
        if sign and (multiplier > 0 or sign > 0):
            self.sign = sign
        return max(multiplier + self.size * sign, 0.0)


# ----------------------------------------------------------------------------
# Single-user solvers
# ----------------------------------------------------------------------------


def _level(bandwidth: float, zeta: float) -> float:
    return math.inf if zeta <= 0 else bandwidth / (zeta * LN2)


def optimize_mmtc_power(A: float, gamma_tar: float, p_max: float, zeta: float,
                        bandwidth: float) -> MmtcSolution:
    """Closed-form maximizer of W log2(1 + A p) - zeta p over [gamma_tar / A, p_max].

    At ``zeta == 0`` the unconstrained optimum is unbounded and the budget binds.
    """
    floor = gamma_tar / A
    if floor > p_max * (1 + 1e-12):
        return MmtcSolution(floor, False)
    p = min(max(_level(bandwidth, zeta) - 1.0 / A, floor), p_max)
    return MmtcSolution(p, True)


def _waterfill_for_power(inv_a: np.ndarray, budget: float) -> float:
    """Level lam with sum max(lam - inv_a, 0) == budget."""
    s = np.sort(inv_a)
    csum = np.cumsum(s)
    for n in range(len(s), 0, -1):
        lam = (budget + csum[n - 1]) / n
        if lam > s[n - 1]:
            return float(lam)
    return float(s[0] + budget)


def _waterfill_for_rate(A: np.ndarray, rate: float, bandwidth: float) -> float:
    """Level lam with sum W log2(max(lam A, 1)) == rate."""
    if rate <= 0:
        return float(np.min(1.0 / A))
    order = np.argsort(-A)
    a = A[order]
    log_a = np.cumsum(np.log2(a))
    for n in range(len(a), 0, -1):
        lam = 2.0 ** ((rate / bandwidth - log_a[n - 1]) / n)
        if lam * a[n - 1] >= 1.0:
            return float(lam)
    return float(2.0 ** (rate / bandwidth) / a[0])


def _floor_power(inv_a: np.ndarray, floors: np.ndarray, lam: float) -> float:
    return float(np.maximum(lam - inv_a, floors).sum())


def _level_for_budget_with_floors(inv_a: np.ndarray, floors: np.ndarray, budget: float) -> float:
    """Level lam with sum max(lam - 1/A_j, floor_j) == budget (piecewise linear, monotone)."""
    # Breakpoints where user j leaves its floor: lam = 1/A_j + floor_j.
    bps = np.sort(inv_a + floors)
    for n in range(len(bps), 0, -1):
        # With the n smallest breakpoints active, power(lam) = n lam - sum(active inv_a) + rest floors
        lam_lo = bps[n - 1]
        if _floor_power(inv_a, floors, lam_lo) <= budget:
            active = (inv_a + floors) <= lam_lo
            fixed = floors[~active].sum()
            return float((budget - fixed + inv_a[active].sum()) / active.sum())
    return float(bps[0])


def optimize_embb_power(A, target_rate: float, p_max: float, zeta: float, bandwidth: float,
                        method: str = "exact", dual: DualConfig | None = None,
                        caps=None) -> DualSolution:
    """Maximize sum_j [W log2(1 + A_j p_j) - zeta p_j] s.t. rate target and power budget.

    Every dual point gives the water-filling powers
    p_j = max((1 + mu) W / ((nu + zeta) ln 2) - 1/A_j, 0).  ``method="exact"``
    finds the optimal multipliers directly: only the water level
    (1 + mu) / (nu + zeta) matters, it is monotone in both constraints, and at
    most one multiplier is positive at the optimum.  ``method="subgradient"``
    runs projected subgradient steps on (mu, nu) with a diminishing step.

    ``caps`` optionally bounds each p_j from above (interference protection of
    users decoded earlier on SC j).
    """
    A = np.atleast_1d(np.asarray(A, dtype=float))
    if A.size == 0 or np.any(A <= 0):
        raise ValueError("need at least one positive effective gain")
    caps = np.full_like(A, np.inf) if caps is None else np.atleast_1d(np.asarray(caps, float))
    if A.size == 1:
        # One SC: a per-SC cap is just a tighter budget.
        p_max = min(p_max, float(caps[0]))
        caps = np.full_like(A, np.inf)
    if method == "subgradient":
        if np.any(np.isfinite(caps)):
            raise ValueError("the subgradient solver does not support per-SC caps")
        return _embb_subgradient(A, target_rate, p_max, zeta, bandwidth, dual or DualConfig())
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")

    inv_a = 1.0 / A
    lam0 = _level(bandwidth, zeta)
    if np.all(np.isinf(caps)):
        lam_budget = _waterfill_for_power(inv_a, p_max)
        lam_rate = _waterfill_for_rate(A, target_rate, bandwidth) if target_rate > 0 else 0.0
    else:
        powers = lambda lam: np.clip(lam - inv_a, 0.0, caps)
        rate_at = lambda lam: float((bandwidth * np.log2(1.0 + A * powers(lam))).sum())
        top = float(np.max(inv_a + np.where(np.isfinite(caps), caps, p_max)))
        lam_budget = math.inf if caps.sum() <= p_max else _bisect(
            lambda lam: powers(lam).sum() - p_max, float(inv_a.min()), top)
        if target_rate <= 0:
            lam_rate = 0.0
        elif rate_at(top) < target_rate:
            lam_rate = math.inf
        else:
            lam_rate = _bisect(lambda lam: rate_at(lam) - target_rate, float(inv_a.min()), top)
    feasible = lam_rate <= lam_budget * (1 + 1e-12)
    lam = min(max(lam0, lam_rate), lam_budget)
    mu = nu = 0.0
    if not math.isfinite(lam):  # only caps bind; any level above them is equivalent
        lam = float(np.max(inv_a + caps))
    elif lam > lam0 * (1 + 1e-15):  # rate constraint pushes the level up
        mu = lam * zeta * LN2 / bandwidth - 1.0
    elif lam < lam0:  # budget caps the level
        nu = bandwidth / (lam * LN2) - zeta
    p = np.clip(lam - inv_a, 0.0, caps)
    if p.sum() > p_max:  # round-off on the budget boundary
        p *= p_max / p.sum()
    rates = bandwidth * np.log2(1.0 + A * p)
    return DualSolution(p, bool(feasible), mu=max(mu, 0.0), nu=max(nu, 0.0), iterations=1,
                        rate_residual=float(rates.sum() - target_rate),
                        power_residual=float(p_max - p.sum()))


def _bisect(f, lo: float, hi: float, iters: int = 200) -> float:
    """Root of a nondecreasing f on [lo, hi] (f(lo) <= 0 <= f(hi))."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return hi


def _embb_subgradient(A, target_rate, p_max, zeta, bandwidth, cfg: DualConfig) -> DualSolution:
    inv_a = 1.0 / A
    # Scale so that one unit step moves each multiplier by O(1) of its natural size.
    rate_scale = max(target_rate, bandwidth)
    zeta_scale = max(zeta, bandwidth / (p_max * LN2))
    mu, nu = 0.0, 0.0
    mu_step, nu_step = _Step(cfg, 1.0), _Step(cfg, zeta_scale)
    p = np.zeros_like(A)
    v = 0
    for v in range(1, cfg.max_iter + 1):
        lam = (1.0 + mu) * bandwidth / ((nu + zeta) * LN2) if nu + zeta > 0 else math.inf
        p = np.maximum(lam - inv_a, 0.0) if math.isfinite(lam) else np.full_like(A, p_max)
        rate = float((bandwidth * np.log2(1.0 + A * p)).sum())
        rate_gap = rate - target_rate
        power_gap = float(p.sum()) - p_max
        if (rate_gap >= 0.0 and power_gap <= 0.0
                and abs(mu * rate_gap) <= cfg.rate_rtol * rate_scale
                and abs(nu * power_gap) <= cfg.power_rtol * zeta_scale * p_max):
            break
        mu = mu_step(mu, -rate_gap)
        nu = nu_step(nu, power_gap)
    if p.sum() > p_max:  # the budget is physical; absorb the residual overshoot
        p *= p_max / p.sum()
    rates = bandwidth * np.log2(1.0 + A * p)
    rate_res = float(rates.sum() - target_rate)
    pow_res = float(p_max - p.sum())
    feasible = (rate_res >= -cfg.rate_rtol * max(target_rate, 1.0)
                and pow_res >= -cfg.power_rtol * p_max)
    return DualSolution(p, feasible, mu=mu, nu=nu, iterations=v,
                        rate_residual=rate_res, power_residual=pow_res)


def optimize_urllc_power(A, gamma_tar: float, p_max: float, zeta: float, bandwidth: float,
                         method: str = "exact", dual: DualConfig | None = None) -> DualSolution:
    """Maximize sum_j [W log2(1 + A_j p_j) - zeta p_j] s.t. p_j >= gamma_tar/A_j, sum p_j <= P_max.

    The dispersion penalty is constant in p and drops out.  Powers follow
    p_j = max(W / ((theta + zeta) ln 2) - 1/A_j, gamma_tar/A_j) with theta the
    budget multiplier, found exactly (``"exact"``) or by subgradient steps.
    """
    A = np.atleast_1d(np.asarray(A, dtype=float))
    if A.size == 0 or np.any(A <= 0):
        raise ValueError("need at least one positive effective gain")
    inv_a = 1.0 / A
    floors = gamma_tar * inv_a
    if floors.sum() > p_max * (1 + 1e-12):
        return DualSolution(floors, False, power_residual=float(p_max - floors.sum()))
    if method == "subgradient":
        return _urllc_subgradient(A, floors, p_max, zeta, bandwidth, dual or DualConfig())
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    lam0 = _level(bandwidth, zeta)
    theta = 0.0
    if not math.isfinite(lam0) or _floor_power(inv_a, floors, lam0) > p_max:
        lam = _level_for_budget_with_floors(inv_a, floors, p_max)
        theta = max(bandwidth / (lam * LN2) - zeta, 0.0)
    else:
        lam = lam0
    p = np.maximum(lam - inv_a, floors)
    excess = p.sum() - p_max
    if excess > 0:  # round-off on the budget boundary; trim above the floors only
        room = p - floors
        p -= room * min(excess / max(room.sum(), 1e-300), 1.0)
    return DualSolution(p, True, theta=theta, iterations=1, power_residual=float(p_max - p.sum()))


def _urllc_subgradient(A, floors, p_max, zeta, bandwidth, cfg: DualConfig) -> DualSolution:
    inv_a = 1.0 / A
    zeta_scale = max(zeta, bandwidth / (p_max * LN2))
    theta = 0.0
    step = _Step(cfg, zeta_scale)
    p = floors.copy()
    v = 0
    for v in range(1, cfg.max_iter + 1):
        lam = bandwidth / ((theta + zeta) * LN2) if theta + zeta > 0 else math.inf
        p = np.maximum(lam - inv_a, floors) if math.isfinite(lam) else np.full_like(A, p_max)
        gap = float(p.sum()) - p_max
        if gap <= 0.0 and abs(theta * gap) <= cfg.power_rtol * zeta_scale * p_max:
            break
        theta = step(theta, gap)
    excess = p.sum() - p_max
    if excess > 0:
        room = p - floors
        p -= room * min(excess / max(room.sum(), 1e-300), 1.0)
    pow_res = float(p_max - p.sum())
    return DualSolution(p, pow_res >= -cfg.power_rtol * p_max, theta=theta, iterations=v,
                        power_residual=pow_res)


# ----------------------------------------------------------------------------
# Dinkelbach outer loop
# ----------------------------------------------------------------------------


def subtractive_objective(state: AllocationState, channels: ChannelRealization, cell: Cell,
                          zeta: float, include_circuit: bool = False) -> float:
    """R^tot - zeta P^Tx (bit/s), with R^tot as in the EE factor.

    ``include_circuit`` adds M P_c to the power term, which turns the value
    into the Dinkelbach residual (zero exactly at the EE of ``state``).
    """
    power = float(state.P.sum())
    if include_circuit:
        power += cell.num_users * cell.config.circuit_power
    report = check_constraints(state, channels, cell)
    if report.links is None:
        return -zeta * power
    return total_rate(state, report.links, report) - zeta * power


@dataclass
class PowerAllocation:
    state: AllocationState | None
    ee: float
    feasible: bool
    zeta_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    reason: str = ""


def _effective_gain(g, P, order, pos, k, noise) -> float:
    later = order[pos + 1:]
    interference = float(np.dot(g[later, k], P[later, k])) if later else 0.0
    return g[order[pos], k] / (interference + noise)


def required_sinr(cell: Cell, b: np.ndarray) -> np.ndarray:
    """[user x SC] SINR each assigned user must reach on each of its SCs.

    An eMBB user spread over n SCs is held to an even split of its target rate.
    """
    req = cell.target_sinr.copy()
    for z, service in enumerate(cell.services):
        n = int(b[z].sum())
        if service is ServiceClass.EMBB and n > 1:
            for k in np.flatnonzero(b[z]):
                req[z, k] = 2.0 ** (cell.users[z].target_rate / n / cell.bandwidths[k]) - 1.0
    return req


def interference_caps(order, g_k, req_k, p_max) -> np.ndarray:
    """Largest total received power (incl. noise) allowed below each SIC position.

    Entry l bounds sum_{j >= l} g_j p_j + noise so that every user decoded
    before position l can still reach its SINR floor within its budget, with
    the users in between at their own floors.
    """
    cap = np.full(len(order), np.inf)
    for pos in range(1, len(order)):
        z = order[pos - 1]
        own = p_max[z] * g_k[z] / req_k[z] if req_k[z] > 0 else np.inf
        cap[pos] = min(cap[pos - 1] / (1.0 + req_k[z]), own)
    return cap


def solve_subtractive_sequential(b: np.ndarray, channels: ChannelRealization, cell: Cell, zeta: float,
                      method: str = "exact", protect_earlier: bool = True):
    """Per-user powers for fixed zeta in reverse SIC order.

    With ``protect_earlier`` each user's power is also bounded so that users
    decoded before it on the same SC keep a reachable SINR floor.  Returns
    ``(P, None)`` or ``(None, reason)`` when some floor cannot be met.
    """
    g = channels.gains
    M, K = b.shape
    services = cell.services
    orders = [decoding_order(np.flatnonzero(b[:, k]), g[:, k], services) for k in range(K)]
    pos = [len(o) - 1 for o in orders]
    P = np.zeros((M, K))
    gb_scs = {z: list(np.flatnonzero(b[z])) for z in range(M) if services[z].grant_based}
    for z, scs in gb_scs.items():
        if not scs:
            return None, f"grant-based user {z} has no subchannel"
    target = cell.target_sinr
    if protect_earlier:
        req = required_sinr(cell, b)
        caps = [interference_caps(orders[k], g[:, k], req[:, k], cell.p_max) for k in range(K)]
    else:
        caps = [np.full(len(o), np.inf) for o in orders]

    def power_cap(k, p):
        z = orders[k][p]
        below = float(np.dot(g[orders[k][p + 1:], k], P[orders[k][p + 1:], k])) + cell.noise[k]
        return (caps[k][p] - below) / g[z, k]

    solved_gb = set()
    while any(p >= 0 for p in pos):
        progress = False
        for k in range(K):
            order = orders[k]
            while pos[k] >= 0 and services[order[pos[k]]] is ServiceClass.MMTC:
                z = order[pos[k]]
                A = _effective_gain(g, P, order, pos[k], k, cell.noise[k])
                budget = min(cell.p_max[z], power_cap(k, pos[k]))
                sol = optimize_mmtc_power(A, target[z, k], budget, zeta, cell.bandwidths[k])
                if not sol.feasible:
                    return None, f"mMTC user {z} cannot reach its SINR target on SC {k}"
                P[z, k] = sol.power
                pos[k] -= 1
                progress = True
        for z, scs in gb_scs.items():
            if z in solved_gb or any(pos[k] < 0 or orders[k][pos[k]] != z for k in scs):
                continue
            A = np.array([_effective_gain(g, P, orders[k], pos[k], k, cell.noise[k]) for k in scs])
            ucaps = np.array([power_cap(k, pos[k]) for k in scs])
            # GB users of one service sit on SCs of a single numerology.
            w = cell.bandwidths[scs[0]]
            if services[z] is ServiceClass.EMBB:
                sol = optimize_embb_power(A, cell.users[z].target_rate, cell.p_max[z], zeta, w,
                                          method=method if np.all(np.isinf(ucaps)) else "exact",
                                          caps=ucaps)
            else:
                # URLLC is decoded first on its SCs, so nothing above it needs protecting.
                sol = optimize_urllc_power(A, target[z, scs[0]], cell.p_max[z], zeta, w,
                                           method=method)
            if not sol.feasible:
                return None, f"{services[z].value} user {z} cannot meet its target within budget"
            P[z, scs] = sol.powers
            for k in scs:
                pos[k] -= 1
            solved_gb.add(z)
            progress = True
        if not progress:  # unreachable for a (C1)-consistent assignment
            raise RuntimeError("power solve deadlocked on a grant-based user")
    return P, None


# ----------------------------------------------------------------------------
# Exact per-SC solve of the subtractive problem
# ----------------------------------------------------------------------------
#
# In received-power terms (Y_l = g_l p_l, X_l = sum_{j >= l} Y_j + noise) the
# SC sum rate telescopes to W log2(X_1 / noise) minus constant dispersion
# penalties, whatever the decoding order.  The floors read X_l >= (1+gamma_l)
# X_{l+1} and the budgets X_l - X_{l+1} <= g_l P_max.  For users decoded in
# descending-gain order the cheapest way to reach a given X_1 fills users top
# down: users above the active one sit at their budget, users below it at
# their floors.  This makes the minimal power C(X) a convex piecewise-linear
# function with slopes 1/g_1 <= 1/g_2 <= ...  A URLLC head (decoded first
# regardless of gain) adds one more variable on top of that chain.


@dataclass
class _Chain:
    x_min: float
    starts: list[float]
    ends: list[float]
    lows: list[float]
    slopes: list[float]
    y_floor: np.ndarray
    budgets: np.ndarray

    @property
    def x_max(self) -> float:
        return self.ends[-1] if self.ends else self.x_min

    def slope_at(self, x: float) -> float:
        for a, b, sl in zip(self.starts, self.ends, self.slopes):
            if x < b or (x == b and b == self.ends[-1]):
                return sl
        return self.slopes[-1] if self.slopes else 0.0

    def received(self, x: float) -> np.ndarray:
        """Least-cost received powers of the chain users for top level ``x``."""
        y = self.y_floor.copy()
        for s, (a, b, lo) in enumerate(zip(self.starts, self.ends, self.lows)):
            if x <= b or s == len(self.ends) - 1:
                y[:s] = self.budgets[:s]
                y[s] = lo + min(max(x - a, 0.0), b - a)
                return y
        return y


def _build_chain(gains, floors, budgets, noise) -> _Chain | None:
    m = len(gains)
    x_floor = np.empty(m + 1)
    x_floor[m] = noise
    for l in range(m - 1, -1, -1):
        x_floor[l] = (1.0 + floors[l]) * x_floor[l + 1]
    y_floor = x_floor[:-1] - x_floor[1:]
    if np.any(y_floor > budgets * (1 + 1e-12)):
        return None
    starts, ends, lows, slopes = [], [], [], []
    x = x_floor[0]
    for s in range(m):
        below = x_floor[s + 1]
        lo = y_floor[s]
        hi = budgets[s]
        blocked = False
        acc = 0.0
        for l in range(s - 1, -1, -1):  # users above stay at budget and must keep their floor
            if floors[l] > 0:
                lim = budgets[l] / floors[l] - below - acc
                if lim < hi:
                    hi, blocked = lim, True
            acc += budgets[l]
        hi = max(hi, lo)
        starts.append(x)
        x += hi - lo
        ends.append(x)
        lows.append(lo)
        slopes.append(1.0 / gains[s])
        if blocked:
            break
    return _Chain(float(x_floor[0]), starts, ends, lows, slopes, y_floor, np.asarray(budgets))


def _solve_sc_exact(bandwidth, noise, zeta, chain_gains, chain_floors, chain_budgets,
                    head=None):
    """Optimal received powers on one SC for fixed zeta.

    ``head`` is ``(gain, floor, budget)`` of a URLLC user decoded first.
    Returns ``(chain_received, head_received)`` or ``None`` if infeasible.
    """
    chain = _build_chain(np.asarray(chain_gains, float), np.asarray(chain_floors, float),
                         np.asarray(chain_budgets, float), noise)
    if chain is None:
        return None
    lo, hi = chain.x_min, chain.x_max
    k = bandwidth / LN2  # d/dX of W log2(X) is k / X
    if head is not None:
        g_u, gam_u, cap_u = head
        if gam_u > 0:
            hi = min(hi, cap_u / gam_u)
        if hi < lo * (1 - 1e-12):
            return None
        hi = max(hi, lo)
        t = math.inf if zeta <= 0 else k * g_u / zeta
        pts = set(chain.ends) | {t / (1 + gam_u), t - cap_u}
    else:
        pts = set(chain.ends)
    pts = sorted(p for p in pts if lo < p < hi)
    bounds = [lo] + pts + [hi]
    x_opt = hi
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        slope = chain.slope_at(mid)
        if zeta <= 0:
            continue  # maximizing X_1 only; push to the top
        if head is None:
            root = k / (zeta * slope) if slope > 0 else math.inf
        else:
            free = t - mid
            if free <= gam_u * mid:  # head at its floor
                root = k / (zeta * (gam_u / g_u + slope))
            elif free >= cap_u:  # head at its budget
                root = k / (zeta * slope) - cap_u if slope > 0 else math.inf
            else:  # head free: X_1 pinned at t, trade head power for chain power
                root = math.inf if 1.0 / g_u > slope else -math.inf
        if root < b:
            x_opt = max(root, a)
            break
    y_chain = chain.received(x_opt) if len(chain_gains) else np.zeros(0)
    y_head = None
    if head is not None:
        y_head = min(max(t - x_opt, gam_u * x_opt), cap_u)
    return y_chain, y_head


def solve_subtractive_exact(b: np.ndarray, channels: ChannelRealization, cell: Cell,
                            zeta: float):
    """Exact maximizer of R^tot - zeta P^Tx when every GB user holds a single SC."""
    g = channels.gains
    M, K = b.shape
    services = cell.services
    P = np.zeros((M, K))
    target = cell.target_sinr
    for k in range(K):
        users = np.flatnonzero(b[:, k])
        if len(users) == 0:
            continue
        order = decoding_order(users, g[:, k], services)
        head = None
        if services[order[0]] is ServiceClass.URLLC:
            u = order[0]
            head = (g[u, k], target[u, k], g[u, k] * cell.p_max[u])
            order = order[1:]
        idx = np.array(order, dtype=int)
        sol = _solve_sc_exact(cell.bandwidths[k], cell.noise[k], zeta, g[idx, k],
                              target[idx, k], g[idx, k] * cell.p_max[idx], head)
        if sol is None:
            return None, f"no power setting meets every QoS floor on SC {k}"
        y_chain, y_head = sol
        if len(idx):
            P[idx, k] = np.minimum(y_chain / g[idx, k], cell.p_max[idx])
        if head is not None:
            u = [z for z in users if services[z] is ServiceClass.URLLC][0]
            P[u, k] = min(y_head / g[u, k], cell.p_max[u])
    return P, None


def dinkelbach_allocate(b, channels: ChannelRealization, cell: Cell, tol: float = 1e-6,
                        max_iter: int = 200, inner: str = "exact", method: str = "exact",
                        protect_earlier: bool = True) -> PowerAllocation:
    """Dinkelbach iterations zeta <- R^tot / (P^Tx + M P_c) starting from zeta = 0.

    ``inner="exact"`` solves each subtractive problem to optimality per SC;
    it needs every grant-based user on a single SC and otherwise falls back
    to ``inner="sequential"``, the per-user reverse-SIC scheme built on the
    mMTC closed form and the eMBB/URLLC dual solutions (``method`` selects
    their solver).  ``tol`` is relative to the current zeta.  Infeasible
    assignments come back with ``feasible=False`` and no state; exhausting
    ``max_iter`` raises :class:`DinkelbachNotConverged`.
    """
    b = np.asarray(b)
    state = AllocationState(b.astype(np.int8), np.zeros(b.shape))
    services = cell.services
    mmtc = [z for z, s in enumerate(services) if s is ServiceClass.MMTC]
    if any(b[z].sum() != 1 for z in mmtc):
        return PowerAllocation(None, 0.0, False, [0.0], 0, "mMTC user not on exactly one SC (C2)")
    if inner == "exact" and any(b[z].sum() > 1 for z, s in enumerate(services) if s.grant_based):
        inner = "sequential"
    if inner not in ("exact", "sequential"):
        raise ValueError(f"unknown inner solver {inner!r}")
    denom_fixed = cell.num_users * cell.config.circuit_power
    zeta = 0.0
    trace = [zeta]
    best_report = None
    for q in range(1, max_iter + 1):
        try:
            if inner == "exact":
                P, reason = solve_subtractive_exact(b, channels, cell, zeta)
            else:
                P, reason = solve_subtractive_sequential(b, channels, cell, zeta, method, protect_earlier)
        except ConstraintViolationError as exc:
            return PowerAllocation(None, 0.0, False, trace, q, f"(C1): {exc}")
        if P is None:
            return PowerAllocation(None, 0.0, False, trace, q, reason)
        candidate = AllocationState(state.b, P)
        report = check_constraints(candidate, channels, cell)
        new = total_rate(candidate, report.links, report) / (float(P.sum()) + denom_fixed)
        if q > 1 and new < zeta:
            # Only an inexact inner solve can lower zeta; keep the previous iterate.
            new, report = zeta, best_report
        else:
            state, best_report = candidate, report
        trace.append(new)
        if abs(new - zeta) <= tol * max(abs(new), 1e-300):
            if not report.satisfied:
                return PowerAllocation(None, 0.0, False, trace, q,
                                       "solution violates " + ",".join(sorted(report.constraints())))
            return PowerAllocation(state, new, True, trace, q)
        zeta = new
    raise DinkelbachNotConverged(zeta, max_iter)
