import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalpay.network import (
    RoadEdge,
    ScenarioError,
    bpr_time,
    generate_grid_scenario,
    scenario_from_json,
    scenario_to_json,
    validate_scenario,
    with_background_level,
    with_line_params,
)

EDGE = RoadEdge(
    tail=0, head=1, free_flow_time=0.1, capacity=100.0, length=1.0,
    background=0.0, operating_cost=0.6,
)


class TestBprTime:
    def test_free_flow(self):
        assert bpr_time(EDGE, 0.0) == pytest.approx(0.1)

    def test_at_capacity(self):
        # t0 * (1 + 0.15 * 1^4)
        assert bpr_time(EDGE, 100.0) == pytest.approx(0.1 * 1.15)

    def test_double_capacity(self):
        assert bpr_time(EDGE, 200.0) == pytest.approx(0.1 * (1 + 0.15 * 16))

    def test_negative_flow_raises(self):
        with pytest.raises(ValueError):
            bpr_time(EDGE, -1.0)

    @given(st.floats(min_value=0.0, max_value=1e4), st.floats(min_value=0.0, max_value=1e4))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_flow(self, q1, q2):
        lo, hi = sorted((q1, q2))
        assert bpr_time(EDGE, lo) <= bpr_time(EDGE, hi) + 1e-12


class TestGenerator:
    def test_deterministic(self):
        a = generate_grid_scenario(3, 3, n_lines=2, n_od=4, seed=7, background_level=0.5)
        b = generate_grid_scenario(3, 3, n_lines=2, n_od=4, seed=7, background_level=0.5)
        assert scenario_to_json(a) == scenario_to_json(b)
        assert a.fingerprint() == b.fingerprint()

    def test_seed_changes_output(self):
        a = generate_grid_scenario(3, 3, n_lines=2, n_od=4, seed=7, background_level=0.5)
        b = generate_grid_scenario(3, 3, n_lines=2, n_od=4, seed=8, background_level=0.5)
        assert a.fingerprint() != b.fingerprint()

    def test_generated_scenario_validates(self, desk_scenario):
        assert validate_scenario(desk_scenario) == []

    def test_background_matches_level(self, desk_scenario):
        for e in desk_scenario.road.edges:
            assert e.background == pytest.approx(0.5 * e.capacity)

    def test_too_many_od_pairs(self):
        with pytest.raises(ScenarioError):
            generate_grid_scenario(2, 2, n_lines=1, n_od=10000, seed=1, background_level=0.5)

    def test_grid_too_small(self):
        with pytest.raises(ScenarioError):
            generate_grid_scenario(1, 2, n_lines=1, n_od=1, seed=1, background_level=0.5)

    def test_paper_calibration_defaults(self, desk_scenario):
        s = desk_scenario
        assert s.transit.frequency_levels == (2, 3, 4, 5, 6, 12, 20)
        assert s.transit.fare == 3.0
        assert all(ln.capacity == 900.0 for ln in s.transit.lines)
        assert all(ln.operating_cost == 320.0 for ln in s.transit.lines)
        assert s.calibration.theta == 0.5


class TestSerialization:
    def test_round_trip(self, desk_scenario):
        text = scenario_to_json(desk_scenario)
        again = scenario_from_json(text)
        assert again.fingerprint() == desk_scenario.fingerprint()
        assert scenario_to_json(again) == text

    def test_committed_example_loads(self):
        from pathlib import Path

        path = Path(__file__).resolve().parents[1] / "docs" / "example_scenario.json"
        s = scenario_from_json(path.read_text())
        assert validate_scenario(s) == []
        assert scenario_to_json(s) == path.read_text()

    def test_corrupt_demand_detected(self, tiny_scenario):
        doc = json.loads(scenario_to_json(tiny_scenario))
        doc["demand"][0][2] = -5.0
        s = scenario_from_json(json.dumps(doc))
        assert validate_scenario(s) != []


class TestVariants:
    def test_with_background_level(self, tiny_scenario):
        s = with_background_level(tiny_scenario, 0.9)
        for e in s.road.edges:
            assert e.background == pytest.approx(0.9 * e.capacity)
        assert s.fingerprint() != tiny_scenario.fingerprint()

    def test_with_line_params(self, tiny_scenario):
        s = with_line_params(tiny_scenario, capacity=50.0, operating_cost=10.0)
        assert all(ln.capacity == 50.0 for ln in s.transit.lines)
        assert all(ln.operating_cost == 10.0 for ln in s.transit.lines)

    def test_variant_preserves_validity(self, tiny_scenario):
        s = with_line_params(with_background_level(tiny_scenario, 0.1), capacity=30.0)
        assert validate_scenario(s) == []


class TestTopology:
    def test_walking_aliases_cover_od_pairs(self, desk_scenario):
        s = desk_scenario
        for o, d in s.od_pairs:
            assert s.walking_aliases[o]["road"] is not None
            assert s.walking_aliases[d]["road"] is not None

    def test_amod_paths_connect_od(self, desk_scenario):
        s = desk_scenario
        idx = s.road.edge_index()
        for od, paths in s.paths.amod_paths.items():
            for nodes in paths:
                assert nodes[0] == s.road_alias(od[0])
                assert nodes[-1] == s.road_alias(od[1])
                for u, v in zip(nodes, nodes[1:]):
                    assert (u, v) in idx

    def test_transit_links_covered_by_lines(self, desk_scenario):
        s = desk_scenario
        covered = set()
        for ln in s.transit.lines:
            covered |= ln.covered_links()
        for tp in s.paths.transit_paths.values():
            for uv in tp.links:
                assert uv in covered

    def test_line_edge_incidence_shape(self, desk_scenario):
        inc = desk_scenario.transit.line_edge_incidence()
        assert len(inc) == len(desk_scenario.transit.lines)
        assert all(len(row) == len(desk_scenario.transit.links) for row in inc)
