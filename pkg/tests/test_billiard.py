"""Tests for the periodic Sinai billiard."""

import csv
import math

import numpy as np
import pytest
from scipy import stats

from zdmix.billiard import (
    BilliardTable,
    Obstacle,
    PhaseState,
    StateBatch,
    advance,
    base_mean,
    build_table,
    classify_horizon,
    evaluate_base,
    load_trace_cache,
    next_collision,
    orbit,
    sample_invariant,
    save_trace_cache,
    sigma_infinity,
    table_hash,
    time_reverse,
    trace_batch,
    write_orbit_csv,
)
from zdmix.core import ConfigError, GeometryError, TangentCollision, UnboundedFlightError


def _single(radius, **kw):
    return BilliardTable([Obstacle((0.0, 0.0), radius)], **kw)


def _angle_gap(a, b):
    return np.abs(np.angle(np.exp(1j * (np.asarray(a) - np.asarray(b)))))


# ── table construction ──────────────────────────────────────────────────


class TestBuildTable:
    def test_two_disks_valid(self):
        table = build_table(
            {
                "obstacles": [
                    {"center": [0, 0], "radius": 0.4},
                    {"center": [0.5, 0.5], "radius": 0.2},
                ]
            }
        )
        assert table.n_obstacles == 2
        assert table.perimeter_total == pytest.approx(2 * math.pi * 0.6)

    def test_single_disk_valid_and_flagged(self, caplog):
        table = build_table({"obstacle": {"center": [0, 0], "radius": 0.3}})
        assert table.single_obstacle
        assert "single-obstacle" in caplog.text

    def test_overlap_rejected(self):
        with pytest.raises(GeometryError, match="overlap"):
            build_table(
                {
                    "obstacles": [
                        {"center": [0, 0], "radius": 0.4},
                        {"center": [0.5, 0.5], "radius": 0.35},
                    ]
                }
            )

    def test_radius_bound(self):
        with pytest.raises(GeometryError, match="radius"):
            _single(0.5)

    def test_self_overlap_across_translates(self):
        # a disk always misses its own translates when r < 1/2
        assert _single(0.49).n_obstacles == 1

    def test_centers_reduced_to_unit_cell(self):
        table = build_table({"obstacles": [{"center": [1.25, -0.5], "radius": 0.1}]})
        assert table.obstacles[0].center == (0.25, 0.5)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown table preset"):
            build_table({"preset": "square"})

    def test_malformed_entry(self):
        with pytest.raises(ConfigError, match="malformed"):
            build_table({"obstacles": [{"center": [0, 0]}]})

    def test_flight_cap_type(self):
        with pytest.raises(ConfigError, match="flight_cap"):
            build_table({"preset": "finite", "flight_cap": "many"})

    def test_hash_depends_on_geometry(self, finite_table):
        assert table_hash(finite_table) == table_hash(build_table({"preset": "finite"}))
        assert table_hash(finite_table) != table_hash(_single(0.3))
        assert table_hash(_single(0.3)) != table_hash(_single(0.3, flight_cap=10))


# ── horizon and corridors ───────────────────────────────────────────────


class TestClassifyHorizon:
    def test_single_disk_corridors(self, infinite_table):
        horizon = classify_horizon(infinite_table)
        assert not horizon.finite
        found = {c.direction: c.width for c in horizon.corridors}
        assert set(found) == {(1, 0), (0, 1), (1, 1), (1, -1)}
        assert found[(1, 0)] == pytest.approx(0.4, abs=1e-12)
        assert found[(0, 1)] == pytest.approx(0.4, abs=1e-12)
        assert found[(1, 1)] == pytest.approx(1 / math.sqrt(2) - 0.6, abs=1e-12)
        assert found[(1, -1)] == pytest.approx(0.10711, abs=1e-5)

    def test_default_two_disk_table_is_finite(self, finite_table):
        assert classify_horizon(finite_table).finite
        assert finite_table.corridors == ()

    def test_thin_gaps(self):
        found = {c.direction: c.width for c in classify_horizon(_single(0.49)).corridors}
        assert set(found) == {(1, 0), (0, 1)}
        assert found[(1, 0)] == pytest.approx(0.02, abs=1e-12)

    def test_bounding_lines_name_tangent_disks(self, infinite_table):
        for c in infinite_table.corridors:
            assert len(c.bounding_lines) == 2
            for line in c.bounding_lines:
                assert line.tangent_ids == (0,)

    def test_free_flights_span_plane(self, infinite_table):
        flights = np.array([w for c in infinite_table.corridors for w in c.free_flights])
        assert np.linalg.matrix_rank(flights) == 2

    def test_directions_are_primitive(self):
        for c in classify_horizon(_single(0.1)).corridors:
            assert math.gcd(*map(abs, c.direction)) == 1
            assert c.width > 0


class TestSigmaInfinity:
    def test_single_disk_value(self, infinite_table):
        perim = 2 * math.pi * 0.3
        d_diag = 1 / math.sqrt(2) - 0.6
        expected = 4 * 0.16 / (2 * perim) + 2 * 4 * d_diag**2 / (2 * math.sqrt(2) * perim)
        s = sigma_infinity(infinite_table)
        assert s.entry(1, 1) == pytest.approx(expected)

    def test_isotropic_for_square_symmetry(self, infinite_table):
        s = sigma_infinity(infinite_table)
        assert s.is_symmetric()
        assert s.entry(1, 1) == pytest.approx(s.entry(2, 2))
        assert s.entry(1, 2) == pytest.approx(0.0, abs=1e-14)

    def test_shared_edge_counted_once(self):
        table = BilliardTable([Obstacle((0.0, 0.0), 0.2), Obstacle((0.5, 0.0), 0.2)])
        (horizontal,) = [c for c in table.corridors if c.direction == (1, 0)]
        assert horizontal.width == pytest.approx(0.6)
        for line in horizontal.bounding_lines:
            assert line.tangent_ids == (0, 1)

        expected = np.zeros((2, 2))
        for c in table.corridors:
            w = np.array(c.direction, dtype=float)
            expected += 2 * c.width**2 / (c.norm * table.perimeter_total) * np.outer(w, w)
        np.testing.assert_allclose(sigma_infinity(table).entries, expected, rtol=1e-12)

    def test_monotone_in_radius(self):
        small = sigma_infinity(_single(0.25)).entries
        large = sigma_infinity(_single(0.3)).entries
        assert np.linalg.eigvalsh(small - large).min() > 0

    def test_rejects_finite_horizon(self, finite_table):
        with pytest.raises(GeometryError, match="infinite-horizon"):
            sigma_infinity(finite_table)


# ── collision map ───────────────────────────────────────────────────────


class TestNextCollision:
    def test_head_on(self, infinite_table):
        state, kappa = next_collision(infinite_table, PhaseState(0, 0.0, 0.0))
        assert kappa.tolist() == [1, 0]
        assert math.cos(state.boundary_angle) == pytest.approx(-1.0)
        assert state.reflect_angle == pytest.approx(0.0, abs=1e-12)
        assert state.cell == (1, 0)

    def test_reflection_law(self, finite_table):
        rng = np.random.default_rng(11)
        start = sample_invariant(finite_table, rng)
        state, _ = next_collision(finite_table, start)
        incoming = start.velocity()
        normal = np.array([math.cos(state.boundary_angle), math.sin(state.boundary_angle)])
        expected = incoming - 2 * incoming.dot(normal) * normal
        assert np.allclose(state.velocity(), expected, atol=1e-12)
        assert math.cos(state.reflect_angle) > 0

    def test_hit_point_on_flight_line(self, finite_table):
        rng = np.random.default_rng(12)
        start = sample_invariant(finite_table, rng)
        state, _ = next_collision(finite_table, start)
        chord = state.position(finite_table) - start.position(finite_table)
        cross = chord[0] * start.velocity()[1] - chord[1] * start.velocity()[0]
        assert abs(cross) < 1e-10
        assert chord.dot(start.velocity()) > 0

    def test_finite_horizon_bounds_kappa(self, finite_table):
        batch = sample_invariant(finite_table, np.random.default_rng(13), size=20_000)
        _, disp, status = advance(finite_table, batch, 1)
        assert (status == 0).all()
        assert np.abs(disp).max() <= 3

    def test_reversibility(self, finite_table):
        batch = sample_invariant(finite_table, np.random.default_rng(14), size=2_000)
        forward, kappa, _ = advance(finite_table, batch, 1)
        back, kappa_back, _ = advance(finite_table, time_reverse(forward), 1)
        back = time_reverse(back)
        assert np.array_equal(back.obstacle, batch.obstacle)
        assert _angle_gap(back.theta, batch.theta).max() < 1e-9
        assert _angle_gap(back.phi, batch.phi).max() < 1e-9
        assert np.array_equal(kappa_back, -kappa)
        assert not back.cell.any()

    def test_tangent_start_rejected(self, infinite_table):
        with pytest.raises(TangentCollision):
            next_collision(infinite_table, PhaseState(0, 0.0, math.pi / 2))

    def test_corridor_flight_is_long(self, infinite_table):
        # starts at the top of the disk, gliding just above the horizontal corridor edge
        start = PhaseState(0, math.pi / 2, -math.pi / 2 + 1e-4)
        _, kappa = next_collision(infinite_table, start)
        assert kappa[1] == 1
        assert kappa[0] > 3000

    def test_flight_cap(self):
        table = _single(0.3, flight_cap=100)
        with pytest.raises(UnboundedFlightError):
            next_collision(table, PhaseState(0, math.pi / 2, -math.pi / 2 + 1e-4))


class TestOrbit:
    def test_zero_steps(self, finite_table):
        start = PhaseState(1, 0.3, 0.2)
        rec = orbit(finite_table, start, 0)
        assert rec.displacement.tolist() == [0, 0]
        assert rec.final == start

    def test_one_step_matches_next_collision(self, finite_table):
        start = PhaseState(0, 1.0, -0.4)
        _, kappa = next_collision(finite_table, start)
        assert orbit(finite_table, start, 1).displacement.tolist() == kappa.tolist()

    def test_cocycle(self, finite_table):
        start = sample_invariant(finite_table, np.random.default_rng(15))
        first = orbit(finite_table, start, 3)
        second = orbit(finite_table, first.final, 4)
        whole = orbit(finite_table, start, 7)
        assert np.array_equal(whole.displacement, first.displacement + second.displacement)
        assert whole.final == second.final

    def test_trace_consistency(self, finite_table):
        start = sample_invariant(finite_table, np.random.default_rng(16))
        rec = orbit(finite_table, start, 12, trace=True)
        assert np.array_equal(rec.kappas.sum(axis=0), rec.displacement)
        assert np.array_equal(rec.cells[-1] - rec.cells[0], rec.displacement)
        assert (rec.flights > 0).all()
        assert rec.final == orbit(finite_table, start, 12).final

    def test_negative_length(self, finite_table):
        with pytest.raises(ValueError):
            orbit(finite_table, PhaseState(0, 0.0, 0.0), -1)


# ── invariant measure and time reversal ─────────────────────────────────


class TestSampleInvariant:
    def test_mean_cos_phi(self, finite_table):
        batch = sample_invariant(finite_table, np.random.default_rng(21), size=200_000)
        sd = math.sqrt(2 / 3 - math.pi**2 / 16) / math.sqrt(len(batch))
        assert abs(np.cos(batch.phi).mean() - math.pi / 4) < 4 * sd

    def test_obstacle_frequency_follows_radius(self, finite_table):
        batch = sample_invariant(finite_table, np.random.default_rng(22), size=200_000)
        share = (batch.obstacle == 0).mean()
        assert abs(share - 2 / 3) < 4 * math.sqrt(2 / 9 / len(batch))

    def test_no_tangent_draws(self, finite_table):
        batch = sample_invariant(finite_table, np.random.default_rng(23), size=10_000)
        assert (np.cos(batch.phi) > 0).all()
        assert not batch.cell.any()

    def test_single_draw_is_phase_state(self, finite_table):
        assert isinstance(sample_invariant(finite_table, np.random.default_rng(1)), PhaseState)

    def test_pushforward_keeps_phi_marginal(self, finite_table):
        rng = np.random.default_rng(24)
        pushed, _, _ = advance(finite_table, sample_invariant(finite_table, rng, size=20_000), 1)
        fresh = sample_invariant(finite_table, rng, size=20_000)
        assert stats.ks_2samp(pushed.phi, fresh.phi).pvalue > 1e-3
        assert abs((pushed.obstacle == 0).mean() - 2 / 3) < 0.02


class TestTimeReverse:
    def test_involution(self):
        s = PhaseState(1, 0.7, 0.3, (2, -1))
        assert time_reverse(time_reverse(s)) == s

    def test_normal_direction_fixed(self):
        s = PhaseState(0, 1.1, 0.0)
        assert time_reverse(s).reflect_angle == 0.0

    def test_displacement_symmetry(self, finite_table):
        batch = sample_invariant(finite_table, np.random.default_rng(25), size=20_000)
        for n in (1, 10):
            _, disp, _ = advance(finite_table, batch, n)
            for j in range(2):
                x = disp[:, j].astype(float)
                assert abs(x.mean()) < 4 * x.std() / math.sqrt(len(x))
                pos, neg = (x > 0).mean(), (x < 0).mean()
                assert abs(pos - neg) < 4 * math.sqrt((pos + neg) / len(x))


# ── observables, caches, CSV ────────────────────────────────────────────


class TestBaseObservables:
    def test_means(self, finite_table):
        assert base_mean(finite_table, "one") == 1.0
        assert base_mean(finite_table, "cos_phi") == pytest.approx(math.pi / 4)
        assert base_mean(finite_table, "obstacle:1") == pytest.approx(1 / 3)
        assert base_mean(finite_table, "kappa:0") == 0.0
        assert base_mean(finite_table, "centered:cos_phi") == 0.0

    def test_centered_values(self, finite_table):
        obstacle = np.array([0, 1, 1])
        phi = np.array([0.0, 0.5, -0.5])
        out = evaluate_base(finite_table, "centered:obstacle:1", obstacle, phi)
        assert np.allclose(out, [-1 / 3, 2 / 3, 2 / 3])

    def test_kappa_tag_needs_displacement(self, finite_table):
        with pytest.raises(ValueError, match="outgoing displacement"):
            evaluate_base(finite_table, "kappa:1", np.array([0]), np.array([0.0]))
        kappa = np.array([[2, -1]])
        assert evaluate_base(finite_table, "kappa:1", np.array([0]), np.array([0.0]), kappa) == -1

    def test_bad_tags(self, finite_table):
        with pytest.raises(ConfigError):
            base_mean(finite_table, "obstacle:5")
        with pytest.raises(ConfigError):
            base_mean(finite_table, "speed")


class TestTraceFiles:
    def test_cache_roundtrip(self, finite_table, tmp_path):
        batch = sample_invariant(finite_table, np.random.default_rng(31), size=50)
        tr = trace_batch(finite_table, batch, 20)
        path = save_trace_cache(tmp_path / "trace.bin", finite_table, 31, tr.kappa)
        cache = load_trace_cache(path, finite_table)
        assert cache.seed == 31
        assert cache.steps == 20
        assert np.array_equal(cache.kappa, tr.kappa)
        assert path.stat().st_size > 50 * 20 * 2

    def test_cache_rejects_other_table(self, finite_table, infinite_table, tmp_path):
        path = save_trace_cache(
            tmp_path / "t.bin", finite_table, 0, np.zeros((1, 3, 2), dtype=np.int64)
        )
        with pytest.raises(ValueError, match="different table"):
            load_trace_cache(path, infinite_table)

    def test_wide_displacements(self, infinite_table, tmp_path):
        kappa = np.array([[[4000, 1], [-2, 0]]])
        path = save_trace_cache(tmp_path / "w.bin", infinite_table, 5, kappa)
        assert np.array_equal(load_trace_cache(path).kappa, kappa)

    def test_orbit_csv(self, finite_table, tmp_path):
        start = sample_invariant(finite_table, np.random.default_rng(32))
        rec = orbit(finite_table, start, 4, trace=True)
        path = write_orbit_csv([rec, rec], tmp_path / "orbit.csv")
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 10
        assert rows[4]["kappa_x"] == ""
        last = rows[4]
        assert (int(last["cell_x"]), int(last["cell_y"])) == tuple(rec.displacement.tolist())

    def test_orbit_csv_needs_trace(self, finite_table, tmp_path):
        rec = orbit(finite_table, PhaseState(0, 0.0, 0.1), 2)
        with pytest.raises(ValueError, match="trace=True"):
            write_orbit_csv([rec], tmp_path / "x.csv")


class TestStateBatch:
    def test_from_states(self):
        states = [PhaseState(0, 0.1, 0.2, (1, 2)), PhaseState(1, 0.3, -0.4)]
        batch = StateBatch.from_states(states)
        assert len(batch) == 2
        assert batch.state(0) == states[0]
        assert batch.state(1) == states[1]
