import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from leopfl.constellation import (
    ConstellationConfig,
    LinkBudget,
    adjacency,
    build_walker_star,
    link_rate,
    max_los_range,
    propagate,
    round_delay,
    topology_series,
    visible,
    write_constellation_csv,
    write_degree_csv,
    write_topology_csv,
)

# frozen from a 30-digit mpmath evaluation
DTHETA_330 = 3626.56862612580378562842800697
DTHETA_330_550 = 4320.24262942957016410779110395
DTHETA_330_GRAZE_EARTH = 4153.91863184631963970260820781
PERIOD_330 = 5459.09192497088408804201963144
RATE_DEFAULT = 1116038745.54407196283632758481
RATE_DOUBLE_GAIN = 1136038745.5440719626066505343
CHORD_36DEG = 4141.44575861304537781893637708


@pytest.fixture(scope="module")
def table_sats():
    return build_walker_star(ConstellationConfig(), seed=0)


class TestConfig:
    def test_defaults(self):
        cfg = ConstellationConfig()
        assert (cfg.num_orbits, cfg.sats_per_orbit, cfg.num_sats) == (5, 10, 50)
        assert cfg.r_threshold == pytest.approx(6451.0)

    @pytest.mark.parametrize("kw", [dict(num_orbits=0), dict(sats_per_orbit=0), dict(altitude_km=0.0),
                                    dict(los_threshold_radius_km=6000.0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            ConstellationConfig(**kw)


class TestBuild:
    def test_table_size_and_spacing(self, table_sats):
        assert len(table_sats) == 50
        plane0 = [s for s in table_sats if s.orbit_id == 0]
        gaps = np.diff([s.phase_deg for s in plane0])
        assert np.allclose(gaps, 36.0)

    def test_single_satellite(self):
        sats = build_walker_star(ConstellationConfig(num_orbits=1, sats_per_orbit=1))
        assert len(sats) == 1 and sats[0].phase_deg == 0.0

    def test_raan_even_spacing(self):
        sats = build_walker_star(ConstellationConfig(num_orbits=2, sats_per_orbit=2))
        assert sorted({s.raan_deg for s in sats}) == [0.0, 90.0]

    def test_capacities_seeded_and_in_range(self):
        a = build_walker_star(ConstellationConfig(), seed=3)
        b = build_walker_star(ConstellationConfig(), seed=3)
        caps = np.array([s.compute_capacity for s in a])
        assert np.array_equal(caps, [s.compute_capacity for s in b])
        assert caps.min() >= 0.5e9 and caps.max() <= 2.0e9

    def test_radius_at_epoch(self, table_sats):
        for s in table_sats:
            assert np.linalg.norm(s.position) == pytest.approx(6701.0, rel=1e-12)


class TestPropagate:
    def test_period(self, table_sats):
        assert table_sats[0].period_s == pytest.approx(PERIOD_330, rel=1e-9)
        assert abs(table_sats[0].period_s - 5459) < 1

    def test_identity_at_epoch(self, table_sats):
        s = table_sats[7]
        assert np.allclose(propagate(s, 0.0), s.position, atol=1e-9)

    def test_periodicity(self, table_sats):
        s = table_sats[13]
        assert np.abs(propagate(s, s.period_s) - propagate(s, 0.0)).max() < 1e-6

    def test_negative_time(self, table_sats):
        with pytest.raises(ValueError):
            propagate(table_sats[0], -1.0)

    @given(st.integers(0, 49), st.floats(0, 1e6, allow_nan=False))
    def test_radius_preserved(self, idx, t):
        s = build_walker_star(ConstellationConfig())[idx]
        r = np.linalg.norm(propagate(s, t))
        assert abs(r - 6701.0) / 6701.0 < 1e-9


class TestLineOfSight:
    def test_symmetric_shell(self, table_sats):
        d = max_los_range(table_sats[0], table_sats[1], ConstellationConfig())
        assert d == pytest.approx(DTHETA_330, rel=1e-6)

    def test_grazing(self, table_sats):
        cfg = ConstellationConfig(los_threshold_radius_km=6701.0)
        assert max_los_range(table_sats[0], table_sats[1], cfg) == 0.0

    def test_asymmetric(self, table_sats):
        high = replace(table_sats[1], altitude_km=550.0)
        d = max_los_range(table_sats[0], high, ConstellationConfig())
        assert d == pytest.approx(DTHETA_330_550, rel=1e-6)
        half = max_los_range(table_sats[0], table_sats[0], ConstellationConfig()) / 2
        other = max_los_range(high, high, ConstellationConfig()) / 2
        assert d == pytest.approx(half + other, rel=1e-12)

    def test_below_threshold_rejected(self, table_sats):
        low = replace(table_sats[0], altitude_km=50.0)
        with pytest.raises(ValueError):
            max_los_range(low, table_sats[1], ConstellationConfig())

    @given(st.floats(100, 2000), st.floats(1, 500))
    def test_altitude_monotone(self, h, dh):
        cfg = ConstellationConfig()
        s = build_walker_star(ConstellationConfig(num_orbits=1, sats_per_orbit=1))[0]
        a = max_los_range(replace(s, altitude_km=h), replace(s, altitude_km=h), cfg)
        b = max_los_range(replace(s, altitude_km=h + dh), replace(s, altitude_km=h + dh), cfg)
        assert b > a

    def test_self_visible(self, table_sats):
        assert visible(table_sats[3], table_sats[3], 0.0, ConstellationConfig())

    def test_antipodal_not_visible(self, table_sats):
        # in-plane index 0 and 5 are 180 degrees apart
        a, b = table_sats[0], table_sats[5]
        assert np.linalg.norm(a.position - b.position) == pytest.approx(13402.0, rel=1e-9)
        assert not visible(a, b, 0.0, ConstellationConfig())

    def test_adjacent_in_plane_chord(self, table_sats):
        a, b = table_sats[0], table_sats[1]
        assert np.linalg.norm(a.position - b.position) == pytest.approx(CHORD_36DEG, rel=1e-9)
        assert not visible(a, b, 0.0, ConstellationConfig())
        earth = ConstellationConfig(los_threshold_radius_km=6371.0)
        assert max_los_range(a, b, earth) == pytest.approx(DTHETA_330_GRAZE_EARTH, rel=1e-6)
        assert visible(a, b, 0.0, earth)

    @given(st.integers(0, 49), st.integers(0, 49), st.floats(0, 20000))
    def test_visibility_symmetric(self, i, j, t):
        sats = build_walker_star(ConstellationConfig())
        cfg = ConstellationConfig()
        assert visible(sats[i], sats[j], t, cfg) == visible(sats[j], sats[i], t, cfg)


class TestAdjacency:
    def test_pure_ring(self):
        cfg = ConstellationConfig(num_orbits=1, sats_per_orbit=4)
        topo = adjacency(build_walker_star(cfg), 0.0, cfg, "ring")
        assert topo.degrees().tolist() == [2, 2, 2, 2]
        assert topo.neighbor_sets == [[1, 3], [0, 2], [1, 3], [0, 2]]

    def test_colocated_los(self, table_sats):
        cfg = ConstellationConfig()
        twin = replace(table_sats[0], sat_id=1)
        topo = adjacency([table_sats[0], twin], 0.0, cfg, "los")
        assert topo.adjacency.tolist() == [[0, 1], [1, 0]]

    @pytest.mark.parametrize("t", [0.0, 60.0, 900.0, 2500.0])
    def test_table_ring_degrees(self, t):
        cfg = ConstellationConfig(los_threshold_radius_km=6371.0)
        topo = adjacency(build_walker_star(cfg), t, cfg, "ring")
        deg = topo.degrees()
        assert deg.min() >= 2 and deg.max() <= 4

    @pytest.mark.parametrize("mode", ["ring", "los", "full"])
    def test_symmetric_zero_diagonal(self, table_sats, mode):
        for topo in topology_series(table_sats, ConstellationConfig(), 5, mode):
            a = topo.adjacency
            assert np.array_equal(a, a.T)
            assert not np.diag(a).any()

    def test_intra_plane_cycle(self, table_sats):
        topo = adjacency(table_sats, 120.0, ConstellationConfig(), "ring")
        for g in range(5):
            members = [s.sat_id for s in table_sats if s.orbit_id == g]
            sub = topo.adjacency[np.ix_(members, members)]
            assert (sub.sum(axis=1) == 2).all()
            # walk the cycle once
            seen, prev, cur = {0}, None, 0
            while True:
                nxt = [k for k in np.flatnonzero(sub[cur]) if k != prev][0]
                if nxt == 0:
                    break
                seen.add(nxt)
                prev, cur = cur, nxt
            assert len(seen) == len(members)

    def test_neighbor_sets_match_rows(self, table_sats):
        topo = adjacency(table_sats, 0.0, ConstellationConfig(), "los")
        for n, nb in enumerate(topo.neighbor_sets):
            assert nb == np.flatnonzero(topo.adjacency[n]).tolist()

    def test_unknown_mode(self, table_sats):
        with pytest.raises(ValueError):
            adjacency(table_sats, 0.0, ConstellationConfig(), "mesh")


class TestLinkAndDelay:
    def test_table_rate(self, table_sats):
        assert link_rate(LinkBudget(), table_sats[0]) == pytest.approx(RATE_DEFAULT, rel=1e-9)

    def test_zero_power(self, table_sats):
        assert link_rate(LinkBudget(), replace(table_sats[0], transmit_power=0.0)) == 0.0

    def test_gain_doubling_adds_bandwidth(self, table_sats):
        base = link_rate(LinkBudget(), table_sats[0])
        doubled = link_rate(LinkBudget(), replace(table_sats[0], channel_gain=2000.0))
        assert doubled == pytest.approx(RATE_DOUBLE_GAIN, rel=1e-9)
        assert (doubled - base) == pytest.approx(20e6, rel=1e-3)

    def test_invalid_budget(self, table_sats):
        with pytest.raises(ValueError):
            link_rate(LinkBudget(bandwidth_hz=0.0), table_sats[0])

    def test_comm_delay(self):
        comm, comp, energy = round_delay(1e6, 1e9, 1, 10, 0.0, 1e9)
        assert comm == pytest.approx(1e-3, rel=1e-12)
        assert comp == 0.0 and energy == pytest.approx(5e-3)

    def test_zero_payload(self):
        assert round_delay(0, 1e9, 1, 10, 100.0, 1e9)[0] == 0.0

    def test_epoch_ratio_exact(self):
        one = round_delay(1e5, 1e9, 1, 37, 1.23e6, 1.7e9)[1]
        five = round_delay(1e5, 1e9, 5, 37, 1.23e6, 1.7e9)[1]
        assert five / one == 5.0

    @given(st.floats(1, 1e9), st.floats(1.5, 10))
    def test_payload_linear(self, bits, k):
        a = round_delay(bits, 1e9, 1, 1, 1.0, 1e9)[0]
        b = round_delay(bits * k, 1e9, 1, 1, 1.0, 1e9)[0]
        assert b == pytest.approx(k * a, rel=1e-12)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            round_delay(1, 0.0, 1, 1, 1.0, 1.0)


class TestExports:
    def test_csv_layouts(self, tmp_path, table_sats):
        cfg = ConstellationConfig()
        series = topology_series(table_sats, cfg, 2, "ring")
        write_constellation_csv(tmp_path / "c.csv", table_sats)
        write_topology_csv(tmp_path / "t.csv", series)
        write_degree_csv(tmp_path / "d.csv", series)
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["sat_id", "orbit_id", "phase_deg", "capacity_flops"] and len(rows) == 51
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["round", "src", "dst"]
        assert {int(r[0]) for r in rows[1:]} == {1, 2}
        assert all(int(r[1]) < int(r[2]) for r in rows[1:])
        rows = list(csv.reader(open(tmp_path / "d.csv")))
        assert len(rows) == 1 + 2 * 50

    def test_empty_rounds_header_only(self, tmp_path, table_sats):
        write_topology_csv(tmp_path / "t.csv", topology_series(table_sats, ConstellationConfig(), 0))
        assert open(tmp_path / "t.csv").read().strip() == "round,src,dst"
