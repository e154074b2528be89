"""Multimodal network model, demand, path sets, and the synthetic grid generator.

The scenario bundle is immutable after construction.  All operations here are
pure functions; the generator is fully determined by its arguments (a single
seed drives every random draw).
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, replace

import networkx as nx

# Node-id offsets keep the three layers disjoint (road/transit/walking).
TRANSIT_ID_OFFSET = 10_000
WALK_ID_OFFSET = 20_000

# Per-boarding penalty (hours) applied beyond the first boarding when the
# generator searches for the transit reference path.
TRANSFER_PENALTY_H = 5.0 / 60.0

ROAD_SPEED_KMH = 30.0
TRANSIT_SPEED_KMH = 25.0
WALK_SPEED_KMH = 5.0
CELL_KM = 1.0


class ScenarioError(ValueError):
    """Raised when a scenario cannot be constructed as requested."""


@dataclass(frozen=True)
class RoadEdge:
    tail: int
    head: int
    free_flow_time: float  # hours
    capacity: float  # veh/h
    length: float  # km
    background: float  # veh/h
    operating_cost: float  # currency per vehicle traversal


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple[int, ...]
    edges: tuple[RoadEdge, ...]
    bpr_alpha: float = 0.15
    bpr_beta: float = 4.0

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(e.tail, e.head): i for i, e in enumerate(self.edges)}

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for i, e in enumerate(self.edges):
            g.add_edge(e.tail, e.head, index=i, length=e.length)
        return g


@dataclass(frozen=True)
class TransitLine:
    line_id: int
    stations: tuple[int, ...]  # ordered; service runs in both directions
    capacity: float  # passengers per vehicle
    operating_cost: float  # currency per vehicle-revenue-hour

    def covered_links(self) -> set[tuple[int, int]]:
        links: set[tuple[int, int]] = set()
        for u, v in zip(self.stations, self.stations[1:]):
            links.add((u, v))
            links.add((v, u))
        return links


@dataclass(frozen=True)
class TransitNetwork:
    stations: tuple[int, ...]
    links: tuple[tuple[int, int], ...]
    lines: tuple[TransitLine, ...]
    frequency_levels: tuple[float, ...]  # vehicles/h, strictly increasing
    fare: float  # currency per trip

    def link_index(self) -> dict[tuple[int, int], int]:
        return {uv: i for i, uv in enumerate(self.links)}

    def line_edge_incidence(self) -> list[list[int]]:
        """incidence[line][link] in {0,1}."""
        out = []
        for line in self.lines:
            covered = line.covered_links()
            out.append([1 if uv in covered else 0 for uv in self.links])
        return out


@dataclass(frozen=True)
class DemandTable:
    entries: dict[tuple[int, int], float]  # (o, d) walking nodes -> travelers/h

    def od_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.entries)


@dataclass(frozen=True)
class TransitPath:
    fixed_time: float  # hours: access + in-vehicle + egress (+ transfer penalty)
    lines: tuple[int, ...]  # indices of lines boarded (the transfer set)
    links: tuple[tuple[int, int], ...]  # transit links traversed


@dataclass(frozen=True)
class PathSets:
    amod_paths: dict[tuple[int, int], tuple[tuple[int, ...], ...]]  # od -> node sequences
    transit_paths: dict[tuple[int, int], TransitPath]


@dataclass(frozen=True)
class CalibrationParams:
    vot: float = 30.0  # currency/h
    vot_env: float = 30.0  # currency/h, road-delay externality weight
    theta: float = 0.5  # entropy weight, 1/currency
    omega: float = 1.0  # perceived social benefit, currency/passenger
    amod_cost_per_km: float = 0.6


@dataclass(frozen=True)
class MultimodalScenario:
    road: RoadNetwork
    transit: TransitNetwork
    walking_aliases: dict[int, dict[str, int | None]]
    demand: DemandTable
    paths: PathSets
    calibration: CalibrationParams

    @property
    def od_pairs(self) -> list[tuple[int, int]]:
        return self.demand.od_pairs()

    def road_alias(self, walk_node: int) -> int:
        alias = self.walking_aliases[walk_node]["road"]
        assert alias is not None
        return alias

    def amod_path_edges(self, od: tuple[int, int]) -> list[tuple[int, ...]]:
        """Candidate road paths for an OD pair as tuples of edge indices."""
        idx = self.road.edge_index()
        out = []
        for nodes in self.paths.amod_paths[od]:
            out.append(tuple(idx[(u, v)] for u, v in zip(nodes, nodes[1:])))
        return out

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(scenario_to_json(self).encode()).hexdigest()[:16]


def bpr_time(edge: RoadEdge, flow: float, *, bpr_alpha: float = 0.15, bpr_beta: float = 4.0) -> float:
    """Volume-delay time t0*(1 + a*(q/c)^b) on one edge; nondecreasing in flow."""
    if flow < 0:
        raise ValueError(f"negative flow {flow} on edge ({edge.tail},{edge.head})")
    return edge.free_flow_time * (1.0 + bpr_alpha * (flow / edge.capacity) ** bpr_beta)


# ---------------------------------------------------------------------------
# Validation


def validate_scenario(s: MultimodalScenario) -> list[str]:
    """Return a list of invariant violations; empty iff the scenario is well formed."""
    v: list[str] = []
    road, transit = s.road, s.transit

    for e in road.edges:
        tag = f"road edge ({e.tail},{e.head})"
        if e.free_flow_time <= 0:
            v.append(f"{tag}: free_flow_time must be > 0")
        if e.capacity <= 0:
            v.append(f"{tag}: capacity must be > 0")
        if e.background < 0:
            v.append(f"{tag}: background traffic must be >= 0")
        if e.operating_cost < 0:
            v.append(f"{tag}: operating cost must be >= 0")
    if road.bpr_beta < 1:
        v.append("road: bpr_beta must be >= 1 for convexity")
    g = road.graph()
    if len(road.nodes) > 1 and not nx.is_strongly_connected(g):
        v.append("road: graph is not strongly connected")

    shared = set(road.nodes) & set(transit.stations)
    if shared:
        v.append(f"layers: road and transit node sets overlap at {sorted(shared)}")

    link_set = set(transit.links)
    for line in transit.lines:
        for u, w in zip(line.stations, line.stations[1:]):
            if (u, w) not in link_set:
                v.append(f"line {line.line_id}: consecutive stations ({u},{w}) not linked")
    levels = transit.frequency_levels
    if not levels:
        v.append("transit: frequency_levels is empty")
    elif any(x <= 0 for x in levels) or any(a >= b for a, b in zip(levels, levels[1:])):
        v.append("transit: frequency_levels must be strictly increasing and positive")

    for (o, d), alpha in s.demand.entries.items():
        if alpha <= 0:
            v.append(f"demand ({o},{d}): volume must be > 0")
        if o == d:
            v.append(f"demand ({o},{d}): origin equals destination")
        for node in (o, d):
            if node not in s.walking_aliases:
                v.append(f"demand ({o},{d}): {node} is not a walking-layer node")

    edge_idx = road.edge_index()
    for od in s.demand.entries:
        paths = s.paths.amod_paths.get(od, ())
        if not paths:
            v.append(f"paths {od}: empty road path set")
            continue
        o_road = s.walking_aliases.get(od[0], {}).get("road")
        d_road = s.walking_aliases.get(od[1], {}).get("road")
        for p in paths:
            if p[0] != o_road or p[-1] != d_road:
                v.append(f"paths {od}: path does not connect access to egress node")
            for u, w in zip(p, p[1:]):
                if (u, w) not in edge_idx:
                    v.append(f"paths {od}: ({u},{w}) is not a road edge")
        tp = s.paths.transit_paths.get(od)
        if tp is None:
            v.append(f"paths {od}: missing transit reference path")
        else:
            if tp.fixed_time <= 0:
                v.append(f"paths {od}: transit fixed time must be > 0")
            if not tp.lines:
                v.append(f"paths {od}: transit path boards no line")
            for uv in tp.links:
                if uv not in link_set:
                    v.append(f"paths {od}: {uv} is not a transit link")

    cal = s.calibration
    if cal.vot <= 0 or cal.vot_env <= 0 or cal.theta <= 0 or cal.omega < 0:
        v.append("calibration: vot, vot_env, theta must be > 0 and omega >= 0")
    return v


# ---------------------------------------------------------------------------
# Synthetic grid generator


def _grid_cell(r: int, c: int, cols: int) -> int:
    return r * cols + c


def _line_rows_cols(rows: int, cols: int, n_lines: int) -> list[list[tuple[int, int]]]:
    """Station cells (r, c) for each line, alternating row-lines and column-lines."""
    out: list[list[tuple[int, int]]] = []
    n_row = (n_lines + 1) // 2
    n_col = n_lines // 2
    for i in range(n_lines):
        if i % 2 == 0:
            k = i // 2
            r = ((2 * k + 1) * rows) // (2 * max(n_row, 1))
            out.append([(r, c) for c in range(cols)])
        else:
            k = i // 2
            c = ((2 * k + 1) * cols) // (2 * max(n_col, 1))
            out.append([(r, c) for r in range(rows)])
    return out


def _transit_reference_path(
    transit: TransitNetwork,
    access_station: int,
    egress_station: int,
    link_time: float,
) -> tuple[float, tuple[int, ...], tuple[tuple[int, int], ...]] | None:
    """Shortest generalized-time path with a fixed per-boarding penalty.

    Runs Dijkstra on a line-expanded graph: ground nodes per station, one node
    per (line, station); boarding costs TRANSFER_PENALTY_H (one penalty is
    refunded at the end so only transfers beyond the first are charged).
    Returns (in-vehicle + transfer time, boarded lines, traversed links).
    """
    station_lines: dict[int, list[int]] = {st: [] for st in transit.stations}
    for li, line in enumerate(transit.lines):
        for st in line.stations:
            station_lines[st].append(li)

    start = ("g", access_station)
    dist: dict[object, float] = {start: 0.0}
    prev: dict[object, tuple[object, object]] = {}
    heap: list[tuple[float, int, object]] = [(0.0, 0, start)]
    counter = itertools.count(1)

    def push(node, cost, parent, label):
        if cost < dist.get(node, math.inf) - 1e-15:
            dist[node] = cost
            prev[node] = (parent, label)
            heapq.heappush(heap, (cost, next(counter), node))

    adj: dict[tuple[int, int], list[int]] = {}
    for li, line in enumerate(transit.lines):
        seq = line.stations
        for a, b in zip(seq, seq[1:]):
            adj.setdefault((li, a), []).append(b)
            adj.setdefault((li, b), []).append(a)

    goal = ("g", egress_station)
    while heap:
        cost, _, node = heapq.heappop(heap)
        if cost > dist.get(node, math.inf) + 1e-15:
            continue
        if node == goal:
            break
        if node[0] == "g":
            st = node[1]
            for li in station_lines[st]:
                push(("l", li, st), cost + TRANSFER_PENALTY_H, node, ("board", li))
        else:
            _, li, st = node
            for nb in adj.get((li, st), []):
                push(("l", li, nb), cost + link_time, node, ("ride", (st, nb)))
            push(("g", st), cost, node, ("alight",))
    if goal not in dist:
        return None

    lines: list[int] = []
    links: list[tuple[int, int]] = []
    node: object = goal
    while node != start:
        parent, label = prev[node]
        if label[0] == "board":
            lines.append(label[1])
        elif label[0] == "ride":
            links.append(label[1])
        node = parent
    lines.reverse()
    links.reverse()
    if not lines:
        return None
    time = dist[goal] - TRANSFER_PENALTY_H  # first boarding is free
    return time, tuple(lines), tuple(links)


def generate_grid_scenario(
    rows: int,
    cols: int,
    n_lines: int,
    n_od: int,
    seed: int,
    background_level: float,
    *,
    road_capacity: float = 700.0,
    line_capacity: float = 900.0,
    line_cost: float = 320.0,
    frequency_levels: tuple[float, ...] = (2, 3, 4, 5, 6, 12, 20),
    fare: float = 3.0,
    demand_range: tuple[float, float] = (20.0, 120.0),
    n_paths: int = 5,
    calibration: CalibrationParams | None = None,
) -> MultimodalScenario:
    """Deterministic desk-scale scenario on a bidirected road grid.

    Transit lines run along grid rows/columns on a disjoint station layer;
    walking nodes alias coincident coordinates; background traffic is set
    uniformly to background_level * capacity on every road edge.
    """
    if rows * cols < 4:
        raise ScenarioError("grid must have at least 4 cells")
    if n_lines < 1 or n_od < 1:
        raise ScenarioError("need at least one line and one OD pair")
    import random

    rng = random.Random(seed)
    cal = calibration or CalibrationParams()

    road_nodes = tuple(range(rows * cols))
    edges: list[RoadEdge] = []
    t0 = CELL_KM / ROAD_SPEED_KMH
    for r in range(rows):
        for c in range(cols):
            u = _grid_cell(r, c, cols)
            for dr, dc in ((0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if rr < rows and cc < cols:
                    w = _grid_cell(rr, cc, cols)
                    for a, b in ((u, w), (w, u)):
                        edges.append(
                            RoadEdge(
                                tail=a,
                                head=b,
                                free_flow_time=t0,
                                capacity=road_capacity,
                                length=CELL_KM,
                                background=background_level * road_capacity,
                                operating_cost=cal.amod_cost_per_km * CELL_KM,
                            )
                        )
    road = RoadNetwork(nodes=road_nodes, edges=tuple(edges))

    line_cells = _line_rows_cols(rows, cols, n_lines)
    station_of_cell: dict[int, int] = {}
    for cells in line_cells:
        for r, c in cells:
            cell = _grid_cell(r, c, cols)
            station_of_cell.setdefault(cell, TRANSIT_ID_OFFSET + cell)
    lines: list[TransitLine] = []
    links: set[tuple[int, int]] = set()
    for li, cells in enumerate(line_cells):
        stations = tuple(station_of_cell[_grid_cell(r, c, cols)] for r, c in cells)
        lines.append(
            TransitLine(line_id=li, stations=stations, capacity=line_capacity, operating_cost=line_cost)
        )
        for u, v in zip(stations, stations[1:]):
            links.add((u, v))
            links.add((v, u))
    transit = TransitNetwork(
        stations=tuple(sorted(station_of_cell.values())),
        links=tuple(sorted(links)),
        lines=tuple(lines),
        frequency_levels=tuple(float(x) for x in frequency_levels),
        fare=fare,
    )

    walking_aliases: dict[int, dict[str, int | None]] = {}
    for cell in road_nodes:
        walking_aliases[WALK_ID_OFFSET + cell] = {
            "road": cell,
            "transit": station_of_cell.get(cell),
        }

    # Candidate OD pairs need a transit reference path that boards a line.
    station_cells = sorted(station_of_cell)
    link_time = CELL_KM / TRANSIT_SPEED_KMH

    def nearest_station_cell(cell: int) -> int:
        r, c = divmod(cell, cols)
        best = min(
            station_cells,
            key=lambda sc: (abs(divmod(sc, cols)[0] - r) + abs(divmod(sc, cols)[1] - c), sc),
        )
        return best

    transit_cache: dict[tuple[int, int], TransitPath | None] = {}

    def transit_path_for(o_cell: int, d_cell: int) -> TransitPath | None:
        so, sd = nearest_station_cell(o_cell), nearest_station_cell(d_cell)
        if so == sd:
            return None
        key = (o_cell, d_cell)
        if key in transit_cache:
            return transit_cache[key]
        found = _transit_reference_path(transit, station_of_cell[so], station_of_cell[sd], link_time)
        if found is None:
            transit_cache[key] = None
            return None
        ride_time, boarded, used_links = found

        def walk_h(cell_a: int, cell_b: int) -> float:
            ra, ca = divmod(cell_a, cols)
            rb, cb = divmod(cell_b, cols)
            return (abs(ra - rb) + abs(ca - cb)) * CELL_KM / WALK_SPEED_KMH

        fixed = walk_h(o_cell, so) + ride_time + walk_h(d_cell, sd)
        tp = TransitPath(fixed_time=max(fixed, 1e-6), lines=boarded, links=used_links)
        transit_cache[key] = tp
        return tp

    candidates = [
        (o, d)
        for o in road_nodes
        for d in road_nodes
        if o != d and transit_path_for(o, d) is not None
    ]
    if n_od > len(candidates):
        raise ScenarioError(f"requested {n_od} OD pairs but only {len(candidates)} are available")
    chosen = sorted(rng.sample(candidates, n_od))

    g = road.graph()
    amod_paths: dict[tuple[int, int], tuple[tuple[int, ...], ...]] = {}
    transit_paths: dict[tuple[int, int], TransitPath] = {}
    demand_entries: dict[tuple[int, int], float] = {}
    for o_cell, d_cell in chosen:
        od = (WALK_ID_OFFSET + o_cell, WALK_ID_OFFSET + d_cell)
        gen = nx.shortest_simple_paths(g, o_cell, d_cell, weight="length")
        amod_paths[od] = tuple(tuple(p) for p in itertools.islice(gen, n_paths))
        tp = transit_path_for(o_cell, d_cell)
        assert tp is not None
        transit_paths[od] = tp
        demand_entries[od] = round(rng.uniform(*demand_range), 3)

    return MultimodalScenario(
        road=road,
        transit=transit,
        walking_aliases=walking_aliases,
        demand=DemandTable(entries=demand_entries),
        paths=PathSets(amod_paths=amod_paths, transit_paths=transit_paths),
        calibration=cal,
    )


# ---------------------------------------------------------------------------
# Scenario file format (JSON, schema documented in docs/scenario_format.md)


def scenario_to_json(s: MultimodalScenario) -> str:
    doc = {
        "road": {
            "nodes": list(s.road.nodes),
            "edges": [
                [
                    e.tail,
                    e.head,
                    {
                        "free_flow_time": e.free_flow_time,
                        "capacity": e.capacity,
                        "length": e.length,
                        "background": e.background,
                        "operating_cost": e.operating_cost,
                    },
                ]
                for e in s.road.edges
            ],
            "bpr_alpha": s.road.bpr_alpha,
            "bpr_beta": s.road.bpr_beta,
        },
        "transit": {
            "stations": list(s.transit.stations),
            "links": [list(uv) for uv in s.transit.links],
            "lines": [
                {
                    "id": ln.line_id,
                    "stations": list(ln.stations),
                    "capacity": ln.capacity,
                    "operating_cost": ln.operating_cost,
                }
                for ln in s.transit.lines
            ],
            "frequency_levels": list(s.transit.frequency_levels),
            "fare": s.transit.fare,
        },
        "walking_aliases": {
            str(k): {"road": v["road"], "transit": v["transit"]}
            for k, v in sorted(s.walking_aliases.items())
        },
        "demand": [[o, d, a] for (o, d), a in sorted(s.demand.entries.items())],
        "paths": {
            "amod": [[o, d, [list(p) for p in paths]] for (o, d), paths in sorted(s.paths.amod_paths.items())],
            "transit": [
                [
                    o,
                    d,
                    {
                        "fixed_time": tp.fixed_time,
                        "lines": list(tp.lines),
                        "links": [list(uv) for uv in tp.links],
                    },
                ]
                for (o, d), tp in sorted(s.paths.transit_paths.items())
            ],
        },
        "calibration": {
            "vot": s.calibration.vot,
            "vot_env": s.calibration.vot_env,
            "theta": s.calibration.theta,
            "omega": s.calibration.omega,
            "amod_cost_per_km": s.calibration.amod_cost_per_km,
        },
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def scenario_from_json(text: str) -> MultimodalScenario:
    doc = json.loads(text)
    rd = doc["road"]
    road = RoadNetwork(
        nodes=tuple(rd["nodes"]),
        edges=tuple(
            RoadEdge(
                tail=i,
                head=j,
                free_flow_time=a["free_flow_time"],
                capacity=a["capacity"],
                length=a["length"],
                background=a["background"],
                operating_cost=a["operating_cost"],
            )
            for i, j, a in rd["edges"]
        ),
        bpr_alpha=rd["bpr_alpha"],
        bpr_beta=rd["bpr_beta"],
    )
    td = doc["transit"]
    transit = TransitNetwork(
        stations=tuple(td["stations"]),
        links=tuple(tuple(uv) for uv in td["links"]),
        lines=tuple(
            TransitLine(
                line_id=ln["id"],
                stations=tuple(ln["stations"]),
                capacity=ln["capacity"],
                operating_cost=ln["operating_cost"],
            )
            for ln in td["lines"]
        ),
        frequency_levels=tuple(td["frequency_levels"]),
        fare=td["fare"],
    )
    aliases = {
        int(k): {"road": v["road"], "transit": v["transit"]}
        for k, v in doc["walking_aliases"].items()
    }
    demand = DemandTable(entries={(o, d): a for o, d, a in doc["demand"]})
    amod_paths = {
        (o, d): tuple(tuple(p) for p in paths) for o, d, paths in doc["paths"]["amod"]
    }
    transit_paths = {
        (o, d): TransitPath(
            fixed_time=tp["fixed_time"],
            lines=tuple(tp["lines"]),
            links=tuple(tuple(uv) for uv in tp["links"]),
        )
        for o, d, tp in doc["paths"]["transit"]
    }
    cal = CalibrationParams(**doc["calibration"])
    return MultimodalScenario(
        road=road,
        transit=transit,
        walking_aliases=aliases,
        demand=demand,
        paths=PathSets(amod_paths=amod_paths, transit_paths=transit_paths),
        calibration=cal,
    )


def save_scenario(s: MultimodalScenario, path) -> None:
    from pathlib import Path

    Path(path).write_text(scenario_to_json(s))


def load_scenario(path) -> MultimodalScenario:
    from pathlib import Path

    return scenario_from_json(Path(path).read_text())


def with_background_level(s: MultimodalScenario, background_level: float) -> MultimodalScenario:
    """Copy of the scenario with b = background_level * capacity on every road edge."""
    edges = tuple(replace(e, background=background_level * e.capacity) for e in s.road.edges)
    return replace(s, road=replace(s.road, edges=edges))


def with_line_params(
    s: MultimodalScenario, *, capacity: float | None = None, operating_cost: float | None = None
) -> MultimodalScenario:
    lines = tuple(
        replace(
            ln,
            capacity=capacity if capacity is not None else ln.capacity,
            operating_cost=operating_cost if operating_cost is not None else ln.operating_cost,
        )
        for ln in s.transit.lines
    )
    return replace(s, transit=replace(s.transit, lines=lines))
