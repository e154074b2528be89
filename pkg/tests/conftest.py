"""Shared fixtures: generated desk scenarios and handcrafted micro networks."""

from __future__ import annotations

import pytest

from modalpay.network import (
    CalibrationParams,
    DemandTable,
    MultimodalScenario,
    PathSets,
    RoadEdge,
    RoadNetwork,
    TransitLine,
    TransitNetwork,
    TransitPath,
    generate_grid_scenario,
)

W0, W1 = 20000, 20001
S0, S1 = 10000, 10001


def micro_scenario(
    *,
    demand_fwd: float = 60.0,
    demand_rev: float | None = None,
    road_capacity: float = 200.0,
    background_level: float = 0.3,
    line_capacity: float = 120.0,
    line_cost: float = 100.0,
    frequency_levels: tuple[float, ...] = (2.0, 4.0, 8.0),
    fare: float = 3.0,
    calibration: CalibrationParams | None = None,
) -> MultimodalScenario:
    """Two road nodes, two directed edges, one transit line, 1-2 OD pairs.

    Small enough for exhaustive grid-search oracles over (x^a, r).
    """
    cal = calibration or CalibrationParams()
    t0 = 1.0 / 30.0  # 1 km at 30 km/h
    edges = tuple(
        RoadEdge(
            tail=a,
            head=b,
            free_flow_time=t0,
            capacity=road_capacity,
            length=1.0,
            background=background_level * road_capacity,
            operating_cost=cal.amod_cost_per_km * 1.0,
        )
        for a, b in ((0, 1), (1, 0))
    )
    road = RoadNetwork(nodes=(0, 1), edges=edges)
    transit = TransitNetwork(
        stations=(S0, S1),
        links=((S0, S1), (S1, S0)),
        lines=(
            TransitLine(
                line_id=0,
                stations=(S0, S1),
                capacity=line_capacity,
                operating_cost=line_cost,
            ),
        ),
        frequency_levels=frequency_levels,
        fare=fare,
    )
    aliases = {
        W0: {"road": 0, "transit": S0},
        W1: {"road": 1, "transit": S1},
    }
    demand = {(W0, W1): demand_fwd}
    amod_paths = {(W0, W1): ((0, 1),)}
    transit_paths = {
        (W0, W1): TransitPath(fixed_time=1.0 / 25.0, lines=(0,), links=((S0, S1),))
    }
    if demand_rev is not None:
        demand[(W1, W0)] = demand_rev
        amod_paths[(W1, W0)] = ((1, 0),)
        transit_paths[(W1, W0)] = TransitPath(
            fixed_time=1.0 / 25.0, lines=(0,), links=((S1, S0),)
        )
    return MultimodalScenario(
        road=road,
        transit=transit,
        walking_aliases=aliases,
        demand=DemandTable(entries=demand),
        paths=PathSets(amod_paths=amod_paths, transit_paths=transit_paths),
        calibration=cal,
    )


@pytest.fixture(scope="session")
def tiny_scenario() -> MultimodalScenario:
    """Smallest generator output: 2x2 grid, one line, two OD pairs."""
    return generate_grid_scenario(2, 2, n_lines=1, n_od=2, seed=1, background_level=0.5)


@pytest.fixture(scope="session")
def desk_scenario() -> MultimodalScenario:
    """The 3x3 working scenario used across the oracle tests."""
    return generate_grid_scenario(3, 3, n_lines=2, n_od=4, seed=7, background_level=0.5)


@pytest.fixture(scope="session")
def tiny_target(tiny_scenario):
    from modalpay.target import solve_target

    return solve_target(tiny_scenario)


@pytest.fixture(scope="session")
def desk_target(desk_scenario):
    from modalpay.target import solve_target

    return solve_target(desk_scenario)
