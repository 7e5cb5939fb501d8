"""Uplink semi-grant-free NOMA cell: channels, SIC decoding, rates and EE.

Users are indexed URLLC first, then eMBB, then mMTC.  Subchannels are indexed
URLLC-numerology SCs first, then eMBB-numerology SCs.  All powers are in
watts, bandwidths in Hz, rates in bit/s and energy efficiency in bit/J.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

LN2 = math.log(2.0)
BASE_SC_BANDWIDTH = 180e3
# Relative slack used when comparing against QoS targets and budgets, so that
# an allocation sitting exactly on a boundary counts as satisfied.
BOUNDARY_RTOL = 1e-9


class ServiceClass(str, enum.Enum):
    URLLC = "URLLC"
    EMBB = "eMBB"
    MMTC = "mMTC"

    @property
    def grant_based(self) -> bool:
        return self is not ServiceClass.MMTC


class ConstraintViolationError(ValueError):
    """Raised when an SC occupancy breaks (C1) before decoding."""


# ----------------------------------------------------------------------------
# Scalar link-level formulas
# ----------------------------------------------------------------------------


def bandwidth_of(numerology: int) -> float:
    """Bandwidth of one 5G-NR subchannel, 2**numerology * 180 kHz."""
    if isinstance(numerology, bool) or int(numerology) != numerology or not 0 <= numerology <= 4:
        raise ValueError(f"invalid numerology index {numerology!r}, expected 0..4")
    return float(2 ** int(numerology)) * BASE_SC_BANDWIDTH


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def dbm_to_watt(x_dbm):
    return 10.0 ** ((np.asarray(x_dbm, dtype=float) - 30.0) / 10.0)


def noise_power(noise_figure_db: float, noise_psd_dbm: float, bandwidth: float) -> float:
    """Thermal noise power F * N0 * W in watts."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return float(db_to_linear(noise_figure_db) * dbm_to_watt(noise_psd_dbm) * bandwidth)


def q_inv(eps):
    """Inverse Gaussian Q-function, Q^{-1}(eps) = -Phi^{-1}(eps)."""
    return -special.ndtri(eps)


def dispersion_penalty(latency: float, bandwidth: float, dep: float) -> float:
    """Finite-blocklength back-off in bit/s/Hz with channel dispersion V = 1."""
    return float(q_inv(dep)) / (LN2 * math.sqrt(latency * bandwidth))


def rate_fbl(sinr, bandwidth: float, latency: float, dep: float):
    """Short-packet achievable rate W [log2(1 + sinr) - penalty].

    May be negative for small SINR; callers treat that as an infeasible link.
    """
    return bandwidth * (np.log2(1.0 + np.asarray(sinr, dtype=float))
                        - dispersion_penalty(latency, bandwidth, dep))


def rate_urllc(sinr, bandwidth: float, latency: float, dep: float):
    return rate_fbl(sinr, bandwidth, latency, dep)


def rate_mmtc(sinr, bandwidth: float, latency: float, dep: float):
    return rate_fbl(sinr, bandwidth, latency, dep)


def rate_embb(sinr, bandwidth: float):
    return bandwidth * np.log2(1.0 + np.asarray(sinr, dtype=float))


def target_snr(packet_bits: float, latency: float, bandwidth: float, dep: float) -> float:
    """SINR needed to deliver ``packet_bits`` within ``latency`` at error rate ``dep``."""
    exponent = packet_bits / (latency * bandwidth) + dispersion_penalty(latency, bandwidth, dep)
    return float(2.0 ** exponent - 1.0)


# ----------------------------------------------------------------------------
# Cell description
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    num_urllc: int = 1
    num_embb: int = 1
    num_mmtc: int = 4
    num_sc_urllc: int = 1
    num_sc_embb: int = 1
    numerology_urllc: int = 4
    numerology_embb: int = 1
    cell_radius: float = 500.0
    min_distance: float = 35.0
    p_max_dbm: float = 23.0
    circuit_power: float = 0.05
    noise_figure_db: float = 6.0
    noise_psd_dbm: float = -174.0
    packet_bits: int = 256
    latency: float = 2e-3
    dep: float = 1e-5
    embb_spectral_efficiency: float = 4.0
    rician_k_db: float = 10.0
    pathloss_intercept_db: float = 128.1
    pathloss_slope_db: float = 37.6

    def __post_init__(self):
        for name in ("num_urllc", "num_embb", "num_mmtc", "num_sc_urllc", "num_sc_embb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.num_users < 1:
            raise ValueError("the cell needs at least one user")
        if self.num_subchannels < 1:
            raise ValueError("the cell needs at least one subchannel")
        if self.num_urllc and not self.num_sc_urllc:
            raise ValueError("URLLC users need at least one URLLC subchannel")
        if self.num_embb and not self.num_sc_embb:
            raise ValueError("eMBB users need at least one eMBB subchannel")
        bandwidth_of(self.numerology_urllc)
        bandwidth_of(self.numerology_embb)
        if not 0 < self.min_distance < self.cell_radius:
            raise ValueError("need 0 < min_distance < cell_radius")
        if self.circuit_power <= 0:
            raise ValueError("circuit_power must be positive")
        if self.noise_figure_db < 0:
            raise ValueError("noise_figure_db must be >= 0")
        if not 0 < self.dep < 1:
            raise ValueError("dep must lie in (0, 1)")
        if self.latency <= 0 or self.packet_bits <= 0:
            raise ValueError("latency and packet_bits must be positive")
        if self.embb_spectral_efficiency < 0:
            raise ValueError("embb_spectral_efficiency must be >= 0")

    @property
    def num_users(self) -> int:
        return self.num_urllc + self.num_embb + self.num_mmtc

    @property
    def num_subchannels(self) -> int:
        return self.num_sc_urllc + self.num_sc_embb

    @property
    def p_max(self) -> float:
        return float(dbm_to_watt(self.p_max_dbm))

    @property
    def bandwidth_urllc(self) -> float:
        return bandwidth_of(self.numerology_urllc)

    @property
    def bandwidth_embb(self) -> float:
        return bandwidth_of(self.numerology_embb)

    @property
    def embb_target_rate(self) -> float:
        # Spectral-efficiency demand is converted to bit/s on one eMBB SC.
        return self.embb_spectral_efficiency * self.bandwidth_embb

    def services(self) -> list[ServiceClass]:
        return ([ServiceClass.URLLC] * self.num_urllc + [ServiceClass.EMBB] * self.num_embb
                + [ServiceClass.MMTC] * self.num_mmtc)


@dataclass(frozen=True)
class Subchannel:
    id: int
    numerology: int
    bandwidth: float
    service: ServiceClass  # URLLC for K_U, EMBB for K_E
    noise: float


@dataclass(frozen=True)
class UserDevice:
    id: int
    service: ServiceClass
    position: tuple[float, float]
    p_max: float
    packet_bits: float = 0.0
    latency: float = 0.0
    dep: float = 0.5
    target_rate: float = 0.0

    @property
    def distance(self) -> float:
        return math.hypot(*self.position)


def place_users(config: NetworkConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions over the annulus [min_distance, cell_radius].

    Users are drawn one at a time in index order, so two configs that differ
    only in ``num_mmtc`` share the positions of their common users.
    """
    pos = np.empty((config.num_users, 2))
    r0, r1 = config.min_distance, config.cell_radius
    for i in range(config.num_users):
        u, phi = rng.random(2)
        rad = math.sqrt(r0 ** 2 + u * (r1 ** 2 - r0 ** 2))
        pos[i] = rad * math.cos(2 * math.pi * phi), rad * math.sin(2 * math.pi * phi)
    return pos


@dataclass(frozen=True, eq=False)
class Cell:
    """A configured cell with placed users; the static part of the environment."""

    config: NetworkConfig
    users: tuple[UserDevice, ...]
    subchannels: tuple[Subchannel, ...]

    @classmethod
    def build(cls, config: NetworkConfig, positions=None, rng=None) -> "Cell":
        if positions is None:
            positions = place_users(config, rng if rng is not None else np.random.default_rng(0))
        positions = np.asarray(positions, dtype=float)
        if positions.shape != (config.num_users, 2):
            raise ValueError(f"expected positions of shape {(config.num_users, 2)}")
        dist = np.hypot(positions[:, 0], positions[:, 1])
        if np.any(dist > config.cell_radius * (1 + 1e-12)):
            raise ValueError("user placed outside the cell")
        if np.any(dist <= 0):
            raise ValueError("user placed on top of the base station")
        users = []
        for i, service in enumerate(config.services()):
            kw = {}
            if service is ServiceClass.EMBB:
                kw["target_rate"] = config.embb_target_rate
            else:
                kw.update(packet_bits=config.packet_bits, latency=config.latency, dep=config.dep)
            users.append(UserDevice(i, service, (float(positions[i, 0]), float(positions[i, 1])),
                                    config.p_max, **kw))
        scs = []
        for k in range(config.num_subchannels):
            if k < config.num_sc_urllc:
                nu, service = config.numerology_urllc, ServiceClass.URLLC
            else:
                nu, service = config.numerology_embb, ServiceClass.EMBB
            w = bandwidth_of(nu)
            scs.append(Subchannel(k, nu, w, service,
                                  noise_power(config.noise_figure_db, config.noise_psd_dbm, w)))
        return cls(config, tuple(users), tuple(scs))

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_subchannels(self) -> int:
        return len(self.subchannels)

    @cached_property
    def services(self) -> tuple[ServiceClass, ...]:
        return tuple(u.service for u in self.users)

    @cached_property
    def mmtc_ids(self) -> np.ndarray:
        return np.array([u.id for u in self.users if u.service is ServiceClass.MMTC], dtype=int)

    @cached_property
    def bandwidths(self) -> np.ndarray:
        return np.array([sc.bandwidth for sc in self.subchannels])

    @cached_property
    def noise(self) -> np.ndarray:
        return np.array([sc.noise for sc in self.subchannels])

    @cached_property
    def p_max(self) -> np.ndarray:
        return np.array([u.p_max for u in self.users])

    @cached_property
    def distances(self) -> np.ndarray:
        return np.array([u.distance for u in self.users])

    @cached_property
    def target_sinr(self) -> np.ndarray:
        """[user x SC] SINR thresholds: (C5) for mMTC, the target-rate SINR for URLLC.

        For eMBB this is the single-SC SINR reaching the whole target rate.
        """
        out = np.zeros((self.num_users, self.num_subchannels))
        for u in self.users:
            for sc in self.subchannels:
                if u.service is ServiceClass.EMBB:
                    out[u.id, sc.id] = 2.0 ** (u.target_rate / sc.bandwidth) - 1.0
                else:
                    out[u.id, sc.id] = target_snr(u.packet_bits, u.latency, sc.bandwidth, u.dep)
        return out

    @cached_property
    def penalty(self) -> np.ndarray:
        """[user x SC] finite-blocklength penalty in bit/s (zero for eMBB)."""
        out = np.zeros((self.num_users, self.num_subchannels))
        for u in self.users:
            if u.service is ServiceClass.EMBB:
                continue
            for sc in self.subchannels:
                out[u.id, sc.id] = sc.bandwidth * dispersion_penalty(u.latency, sc.bandwidth, u.dep)
        return out

    def urllc_target_rate(self, user: int, sc: int) -> float:
        return float(self.bandwidths[sc] * math.log2(1.0 + self.target_sinr[user, sc])
                     - self.penalty[user, sc])


def grant_schedule(cell: Cell) -> np.ndarray:
    """Grant-based SC assignment: round-robin by user id within each service's SC set."""
    b = np.zeros((cell.num_users, cell.num_subchannels), dtype=np.int8)
    pools = {
        ServiceClass.URLLC: [sc.id for sc in cell.subchannels if sc.service is ServiceClass.URLLC],
        ServiceClass.EMBB: [sc.id for sc in cell.subchannels if sc.service is ServiceClass.EMBB],
    }
    counters = {ServiceClass.URLLC: 0, ServiceClass.EMBB: 0}
    for u in cell.users:
        if not u.service.grant_based:
            continue
        pool = pools[u.service]
        b[u.id, pool[counters[u.service] % len(pool)]] = 1
        counters[u.service] += 1
    return b


# ----------------------------------------------------------------------------
# Channels
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    gains: np.ndarray  # [user x SC] linear power gains
    t: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.gains)) or np.any(self.gains <= 0):
            raise ValueError("channel gains must be positive and finite")


def pathloss_linear(distance, intercept_db: float = 128.1, slope_db: float = 37.6):
    """Log-distance macro path loss, PL[dB] = intercept + slope log10(d / 1 km), as a gain."""
    pl_db = intercept_db + slope_db * np.log10(np.asarray(distance, dtype=float) / 1000.0)
    return 10.0 ** (-pl_db / 10.0)


def rician_power(rng: np.random.Generator, k_factor: float, size) -> np.ndarray:
    """|h|^2 for unit-power Rician fading with linear K-factor (inf means pure LoS)."""
    if math.isinf(k_factor):
        return np.ones(size)
    los = math.sqrt(k_factor / (k_factor + 1.0)) * np.exp(2j * np.pi * rng.random(size))
    nlos = math.sqrt(0.5 / (k_factor + 1.0)) * (rng.standard_normal(size)
                                                 + 1j * rng.standard_normal(size))
    return np.abs(los + nlos) ** 2


def channel_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1, int(t)])


def placement_rng(seed: int) -> np.random.Generator:
    """Stream for user positions, disjoint from every channel stream."""
    return np.random.default_rng([int(seed), 0])


def generate_channels(cell: Cell, seed: int, t: int, k_factor_db=None) -> ChannelRealization:
    """Block-fading gains for TS ``t``; a pure function of ``(seed, t)``."""
    cfg = cell.config
    k_db = cfg.rician_k_db if k_factor_db is None else k_factor_db
    k_lin = math.inf if math.isinf(k_db) else 10.0 ** (k_db / 10.0)
    pl = pathloss_linear(cell.distances, cfg.pathloss_intercept_db, cfg.pathloss_slope_db)
    rng = channel_rng(seed, t)
    # one user at a time, so users common to two configs see the same fading
    fading = np.stack([rician_power(rng, k_lin, cell.num_subchannels) for _ in range(cell.num_users)])
    return ChannelRealization(pl[:, None] * fading, t)


# ----------------------------------------------------------------------------
# Decoding and SINR
# ----------------------------------------------------------------------------


def decoding_order(users, gains, services) -> list[int]:
    """SIC order on one SC: URLLC first, then descending gain (lower id first on ties).

    ``gains`` and ``services`` are indexable by user id.
    """
    users = list(users)
    gb = [z for z in users if services[z] is not ServiceClass.MMTC]
    if len(gb) > 1:
        raise ConstraintViolationError(f"grant-based users {gb} share one subchannel")
    head = [z for z in users if services[z] is ServiceClass.URLLC]
    rest = sorted((z for z in users if services[z] is not ServiceClass.URLLC),
                  key=lambda z: (-gains[z], z))
    return head + rest


def sinr(received, noise: float) -> np.ndarray:
    """SINR of each user in decoding order; user l only sees users decoded after it.

    ``received`` holds P * g in decoding order.
    """
    if noise <= 0:
        raise ValueError("noise power must be positive")
    y = np.asarray(received, dtype=float)
    later = np.cumsum(y[::-1])[::-1] - y
    return y / (later + noise)


# ----------------------------------------------------------------------------
# Allocation state, constraints, EE
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class AllocationState:
    b: np.ndarray  # [user x SC] binary
    P: np.ndarray  # [user x SC] watts

    @classmethod
    def empty(cls, cell: Cell) -> "AllocationState":
        shape = (cell.num_users, cell.num_subchannels)
        return cls(np.zeros(shape, dtype=np.int8), np.zeros(shape))

    def copy(self) -> "AllocationState":
        return AllocationState(self.b.copy(), self.P.copy())


@dataclass
class LinkReport:
    """SINR and rates of every (user, SC) link; NaN/0 where unassigned."""

    sinr: np.ndarray
    rate: np.ndarray
    orders: list[list[int]]


def evaluate_links(state: AllocationState, channels: ChannelRealization, cell: Cell) -> LinkReport:
    M, K = state.b.shape
    g = channels.gains
    gamma = np.full((M, K), np.nan)
    rate = np.zeros((M, K))
    orders = []
    services = cell.services
    for k in range(K):
        users = np.flatnonzero(state.b[:, k])
        order = decoding_order(users, g[:, k], services) if len(users) else []
        orders.append(order)
        if not order:
            continue
        idx = np.array(order)
        gam = sinr(state.P[idx, k] * g[idx, k], cell.noise[k])
        gamma[idx, k] = gam
        rate[idx, k] = cell.bandwidths[k] * np.log2(1.0 + gam) - cell.penalty[idx, k]
    return LinkReport(gamma, rate, orders)


@dataclass(frozen=True)
class Violation:
    constraint: str
    user: int | None = None
    subchannel: int | None = None
    detail: str = ""


@dataclass
class ConstraintReport:
    violations: list[Violation] = field(default_factory=list)
    user_ok: np.ndarray | None = None  # per-user QoS satisfied flags
    links: LinkReport | None = None

    @property
    def satisfied(self) -> bool:
        return not self.violations

    def constraints(self) -> set[str]:
        return {v.constraint for v in self.violations}


def _geq(value, target) -> bool:
    return value >= target - BOUNDARY_RTOL * abs(target)


def check_constraints(state: AllocationState, channels: ChannelRealization, cell: Cell,
                      links: LinkReport | None = None) -> ConstraintReport:
    """Evaluate (C1)-(C6) for one TS; violations are returned, never raised."""
    b, P = state.b, state.P
    services = cell.services
    report = ConstraintReport(user_ok=np.ones(cell.num_users, dtype=bool))
    add = report.violations.append

    gb_rows = np.array([s.grant_based for s in services])
    for k in np.flatnonzero(b[gb_rows].sum(axis=0) > 1):
        add(Violation("C1", None, int(k), "more than one grant-based user"))
    if any(v.constraint == "C1" for v in report.violations):
        report.user_ok[:] = False
        return report
    if links is None:
        links = evaluate_links(state, channels, cell)
    report.links = links

    for z, service in enumerate(services):
        row = np.flatnonzero(b[z])
        if np.any((P[z] > 0) & (b[z] == 0)):
            add(Violation("assignment", z, None, "power on an unassigned subchannel"))
            report.user_ok[z] = False
        if P[z].sum() > cell.p_max[z] * (1 + BOUNDARY_RTOL):
            add(Violation("C6", z, None, f"power {P[z].sum():.6g} W over budget"))
            report.user_ok[z] = False
        if service is ServiceClass.MMTC:
            if len(row) != 1:
                add(Violation("C2", z, None, f"mMTC user on {len(row)} subchannels"))
                report.user_ok[z] = False
            for k in row:
                if not _geq(links.sinr[z, k], cell.target_sinr[z, k]):
                    add(Violation("C5", z, int(k), "SINR below target"))
                    report.user_ok[z] = False
        elif service is ServiceClass.URLLC:
            if len(row) == 0:
                add(Violation("C3", z, None, "URLLC user has no subchannel"))
                report.user_ok[z] = False
            for k in row:
                if not _geq(links.rate[z, k], cell.urllc_target_rate(z, k)):
                    add(Violation("C3", z, int(k), "rate below target"))
                    report.user_ok[z] = False
        else:
            total = links.rate[z, row].sum() if len(row) else 0.0
            if not _geq(total, cell.users[z].target_rate) or len(row) == 0:
                add(Violation("C4", z, None, "sum rate below target"))
                report.user_ok[z] = False
    return report


def total_rate(state: AllocationState, links: LinkReport, report: ConstraintReport) -> float:
    """R^tot counting only users whose own QoS holds, negative rates clamped to 0."""
    r = np.where(state.b > 0, np.maximum(links.rate, 0.0), 0.0)
    ok = report.user_ok if report.user_ok is not None else np.ones(len(r), dtype=bool)
    return float(r[ok].sum())


def ee_factor(state: AllocationState, channels: ChannelRealization, cell: Cell,
              report: ConstraintReport | None = None, links: LinkReport | None = None) -> float:
    """Energy-efficiency factor R^tot / (P^Tx + M P_c) in bit/J."""
    if report is None:
        report = check_constraints(state, channels, cell, links)
    denom = float(state.P.sum()) + cell.num_users * cell.config.circuit_power
    if report.links is None:  # (C1) broken, nothing decodable
        return 0.0
    return total_rate(state, report.links, report) / denom
