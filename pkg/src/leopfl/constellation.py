"""Walker Star constellation geometry, ISL visibility and link/delay model."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MU_EARTH = 3.986004418e5  # km^3 / s^2


@dataclass(frozen=True)
class ConstellationConfig:
    num_orbits: int = 5
    sats_per_orbit: int = 10
    altitude_km: float = 330.0
    inclination_deg: float = 90.0
    earth_radius_km: float = 6371.0
    # None means earth_radius_km + 80 km (ISL floor altitude)
    los_threshold_radius_km: float | None = None
    raan_spread_deg: float = 180.0
    phase_offset_deg: float = 0.0
    base_capacity_flops: float = 1.0e9
    capacity_range: tuple[float, float] = (0.5, 2.0)
    transmit_power_w: float = 5.0
    compute_power_w: float = 5.0
    channel_gain: float = 1000.0
    bandwidth_hz: float = 20.0e6
    noise_psd_w_per_hz: float = 3.98e-21
    round_interval_s: float = 60.0

    def __post_init__(self):
        if self.num_orbits < 1 or self.sats_per_orbit < 1:
            raise ValueError("a constellation needs at least one orbit and one satellite per orbit")
        if self.altitude_km <= 0:
            raise ValueError("altitude must be positive")
        if self.r_threshold < self.earth_radius_km:
            raise ValueError("LOS threshold radius cannot be below the Earth radius")
        lo, hi = self.capacity_range
        if not 0 < lo <= hi:
            raise ValueError("capacity range must satisfy 0 < low <= high")

    @property
    def num_sats(self) -> int:
        return self.num_orbits * self.sats_per_orbit

    @property
    def r_threshold(self) -> float:
        if self.los_threshold_radius_km is None:
            return self.earth_radius_km + 80.0
        return self.los_threshold_radius_km


@dataclass(frozen=True)
class SatelliteState:
    sat_id: int
    orbit_id: int
    in_orbit_index: int
    altitude_km: float
    earth_radius_km: float
    raan_deg: float
    inclination_deg: float
    phase_deg: float
    compute_capacity: float
    transmit_power: float
    compute_power: float
    channel_gain: float
    position: np.ndarray = field(repr=False, compare=False)

    @property
    def radius_km(self) -> float:
        return self.earth_radius_km + self.altitude_km

    @property
    def angular_rate(self) -> float:
        return math.sqrt(MU_EARTH / self.radius_km**3)

    @property
    def period_s(self) -> float:
        return 2.0 * math.pi / self.angular_rate


def _orbit_position(radius, raan_deg, inc_deg, arg_lat_rad) -> np.ndarray:
    raan, inc = math.radians(raan_deg), math.radians(inc_deg)
    cu, su = math.cos(arg_lat_rad), math.sin(arg_lat_rad)
    cr, sr = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    return radius * np.array([cr * cu - sr * su * ci, sr * cu + cr * su * ci, su * si])


def build_walker_star(config: ConstellationConfig, seed: int = 0) -> list[SatelliteState]:
    """Lay out G evenly spaced planes over ``raan_spread_deg`` with S evenly
    phased satellites in each; capacities are drawn uniformly from
    ``capacity_range * base_capacity_flops``."""
    rng = np.random.default_rng(seed)
    lo, hi = config.capacity_range
    factors = rng.uniform(lo, hi, size=config.num_sats)
    radius = config.earth_radius_km + config.altitude_km
    sats = []
    for g in range(config.num_orbits):
        raan = g * config.raan_spread_deg / config.num_orbits
        for s in range(config.sats_per_orbit):
            i = g * config.sats_per_orbit + s
            phase = (s * 360.0 / config.sats_per_orbit + g * config.phase_offset_deg) % 360.0
            sats.append(
                SatelliteState(
                    sat_id=i,
                    orbit_id=g,
                    in_orbit_index=s,
                    altitude_km=config.altitude_km,
                    earth_radius_km=config.earth_radius_km,
                    raan_deg=raan,
                    inclination_deg=config.inclination_deg,
                    phase_deg=phase,
                    compute_capacity=float(factors[i] * config.base_capacity_flops),
                    transmit_power=config.transmit_power_w,
                    compute_power=config.compute_power_w,
                    channel_gain=config.channel_gain,
                    position=_orbit_position(radius, raan, config.inclination_deg, math.radians(phase)),
                )
            )
    return sats


def propagate(sat: SatelliteState, t: float) -> np.ndarray:
    """ECI position (km) after ``t`` seconds on a circular Keplerian orbit."""
    if t < 0:
        raise ValueError("propagation time must be non-negative")
    u = math.radians(sat.phase_deg) + sat.angular_rate * t
    return _orbit_position(sat.radius_km, sat.raan_deg, sat.inclination_deg, u)


def max_los_range(sat_i: SatelliteState, sat_j: SatelliteState, config: ConstellationConfig) -> float:
    r_t = config.r_threshold
    terms = []
    for sat in (sat_i, sat_j):
        r = sat.altitude_km + config.earth_radius_km
        if r < r_t:
            raise ValueError(f"satellite {sat.sat_id} orbits below the LOS threshold radius")
        terms.append(math.sqrt(r * r - r_t * r_t))
    return terms[0] + terms[1]


def visible(sat_i, sat_j, t: float, config: ConstellationConfig) -> bool:
    d = float(np.linalg.norm(propagate(sat_i, t) - propagate(sat_j, t)))
    return d < max_los_range(sat_i, sat_j, config)


@dataclass(frozen=True)
class TimeVaryingTopology:
    round: int
    adjacency: np.ndarray

    @property
    def neighbor_sets(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.adjacency]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self) -> list[tuple[int, int]]:
        src, dst = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(src.tolist(), dst.tolist()))


def _positions(sats: Sequence[SatelliteState], t: float) -> np.ndarray:
    return np.stack([propagate(s, t) for s in sats])


def _los_matrix(sats, pos, config) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    r_t2 = config.r_threshold**2
    reach = np.array([math.sqrt((s.altitude_km + config.earth_radius_km) ** 2 - r_t2) for s in sats])
    return dist < reach[:, None] + reach[None, :], dist


def adjacency(
    sats: Sequence[SatelliteState],
    t: float,
    config: ConstellationConfig,
    mode: str = "ring",
    round_index: int = 0,
) -> TimeVaryingTopology:
    """Topology snapshot at time ``t``.

    ``los``: every visible pair is linked. ``ring``: in-plane predecessor and
    successor are always linked; each adjacent plane contributes at most one
    visible cross-plane link per satellite, matched greedily by distance.
    ``full``: complete graph.
    """
    n = len(sats)
    adj = np.zeros((n, n), dtype=np.int8)
    if mode == "full":
        adj[:] = 1
        np.fill_diagonal(adj, 0)
        return TimeVaryingTopology(round_index, adj)
    pos = _positions(sats, t)
    vis, dist = _los_matrix(sats, pos, config)
    if mode == "los":
        adj[vis] = 1
        np.fill_diagonal(adj, 0)
        return TimeVaryingTopology(round_index, adj)
    if mode != "ring":
        raise ValueError(f"unknown topology mode {mode!r}")

    planes: dict[int, list[int]] = {}
    for idx, sat in enumerate(sats):
        planes.setdefault(sat.orbit_id, []).append(idx)
    for members in planes.values():
        members.sort(key=lambda i: sats[i].in_orbit_index)
        if len(members) < 2:
            continue
        for k, i in enumerate(members):
            j = members[(k + 1) % len(members)]
            if i != j:
                adj[i, j] = adj[j, i] = 1

    # Walker Star seam: the first and last planes are counter-rotating, not adjacent.
    orbit_ids = sorted(planes)
    for a, b in zip(orbit_ids, orbit_ids[1:]):
        pairs = [
            (dist[i, j], i, j) for i in planes[a] for j in planes[b] if vis[i, j]
        ]
        pairs.sort()
        used_a, used_b = set(), set()
        for _, i, j in pairs:
            if i in used_a or j in used_b:
                continue
            used_a.add(i)
            used_b.add(j)
            adj[i, j] = adj[j, i] = 1
    return TimeVaryingTopology(round_index, adj)


def topology_series(sats, config: ConstellationConfig, rounds: int, mode: str = "ring"):
    """One snapshot per FL round, taken at the start of the round."""
    return [
        adjacency(sats, r * config.round_interval_s, config, mode, round_index=r)
        for r in range(1, rounds + 1)
    ]


@dataclass(frozen=True)
class LinkBudget:
    bandwidth_hz: float = 20.0e6
    noise_psd_w_per_hz: float = 3.98e-21

    @classmethod
    def from_config(cls, config: ConstellationConfig) -> "LinkBudget":
        return cls(config.bandwidth_hz, config.noise_psd_w_per_hz)


def link_rate(budget: LinkBudget, sat: SatelliteState) -> float:
    """Shannon rate in bit/s."""
    if budget.bandwidth_hz <= 0 or budget.noise_psd_w_per_hz <= 0:
        raise ValueError("bandwidth and noise PSD must be positive")
    b = budget.bandwidth_hz
    snr = sat.transmit_power * sat.channel_gain / (budget.noise_psd_w_per_hz * b)
    return b * math.log2(1.0 + snr)


def round_delay(
    payload_bits: float,
    rate: float,
    local_epochs: int,
    dataset_size: int,
    work_per_sample: float,
    capacity: float,
    transmit_power: float = 5.0,
    compute_power: float = 5.0,
) -> tuple[float, float, float]:
    """Per-round (communication s, computation s, energy J)."""
    if rate <= 0 or capacity <= 0:
        raise ValueError("rate and capacity must be positive")
    comm = payload_bits / rate
    # per-epoch time first, so kappa epochs cost exactly kappa times one epoch
    comp = local_epochs * (dataset_size * work_per_sample / capacity)
    return comm, comp, transmit_power * comm + compute_power * comp


# ------------------------------------------------------------------ exports


def write_constellation_csv(path: Path | str, sats: Iterable[SatelliteState]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sat_id", "orbit_id", "phase_deg", "capacity_flops"])
        for s in sats:
            w.writerow([s.sat_id, s.orbit_id, repr(s.phase_deg), repr(s.compute_capacity)])


def write_topology_csv(path: Path | str, topologies: Iterable[TimeVaryingTopology]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "src", "dst"])
        for topo in topologies:
            for i, j in topo.edges():
                w.writerow([topo.round, i, j])


def write_degree_csv(path: Path | str, topologies: Iterable[TimeVaryingTopology]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "sat_id", "degree"])
        for topo in topologies:
            for i, d in enumerate(topo.degrees().tolist()):
                w.writerow([topo.round, i, d])
