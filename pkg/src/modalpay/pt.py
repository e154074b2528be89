"""PT best-response oracle against a fixed AMoD action.

MICP relaxation of the frequency-setting profit maximization (convex
mode-choice inequality + big-M envelopes), the logit-flow exactness
certificate, and a capacity-repair recovery that yields a feasible lower
bound when the relaxation is inexact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from modalpay.choice import logistic
from modalpay.network import MultimodalScenario
from modalpay.solver import (
    ENUMERATION_CAP,
    BinaryAssignment,
    ConvexProgram,
    ConvexRow,
    ConvexSolution,
    ObjectiveTerm,
    SolverError,
    branch_and_bound,
    enumerate_binaries,
    solve_convex,
)

EXACTNESS_TOL = 1e-6


class PtError(SolverError):
    pass


@dataclass(frozen=True)
class PtBestResponseProblem:
    """Frequency setting and induced ridership with AMoD utilities frozen."""

    scenario: MultimodalScenario
    v_amod: dict[tuple[int, int], float]

    def __post_init__(self):
        for od in self.scenario.od_pairs:
            v = self.v_amod.get(od)
            if v is None or not math.isfinite(v):
                raise PtError(f"missing or non-finite AMoD utility for OD {od}")

    @property
    def c_od(self) -> dict[tuple[int, int], float]:
        """Fixed non-waiting transit generalized cost per OD."""
        s = self.scenario
        return {
            od: s.calibration.vot * s.paths.transit_paths[od].fixed_time + s.transit.fare
            for od in s.od_pairs
        }

    @property
    def passenger_value(self) -> float:
        """Marginal value of one served passenger: fare plus social weight."""
        return self.scenario.transit.fare + self.scenario.calibration.omega


@dataclass
class PtOracleResult:
    frequencies: tuple[float, ...]  # s_l* from the relaxation
    assignment: BinaryAssignment
    relaxed_flow: dict[tuple[int, int], float]
    relaxed_objective: float  # profit upper bound, currency/h
    exact: bool
    max_violation: float
    logit_flow: dict[tuple[int, int], float]  # x^L(s*)
    repaired: tuple[tuple[float, ...], dict[tuple[int, int], float], float] | None
    gap: float
    gap_is_absolute: bool
    shed_demand: dict[tuple[int, int], float]
    scenario_fingerprint: str = ""

    @property
    def lower_objective(self) -> float:
        """Feasible profit: the repaired value when inexact, else the exact one."""
        return self.repaired[2] if self.repaired is not None else self.relaxed_objective


def build_pt_micp(
    s: MultimodalScenario, v_amod: dict[tuple[int, int], float]
) -> PtBestResponseProblem:
    return PtBestResponseProblem(scenario=s, v_amod=dict(v_amod))


def _build_node_program(
    p: PtBestResponseProblem,
    fixed: BinaryAssignment | None = None,
    z_bounds: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Convex node program; minimizes the negated PT objective."""
    s = p.scenario
    ods = s.od_pairs
    levels = s.transit.frequency_levels
    n_levels = len(levels)
    lines = s.transit.lines
    c_od = p.c_od
    value = p.passenger_value
    vot = s.calibration.vot

    prog = ConvexProgram()
    x = prog.add_variable("xpt", len(ods), lb=0.0)
    u_entries: list[tuple[int, int, int]] = []
    for oi, od in enumerate(ods):
        for line in s.paths.transit_paths[od].lines:
            for si in range(n_levels):
                u_entries.append((oi, line, si))
    u = prog.add_variable("u", len(u_entries), lb=0.0)

    z_idx = None
    if fixed is None:
        z_lo, z_hi = z_bounds
        z = prog.add_variable("z", len(lines) * n_levels, lb=0.0, ub=1.0)
        z_idx = [[z.start + l * n_levels + si for si in range(n_levels)] for l in range(len(lines))]
        for l in range(len(lines)):
            for si in range(n_levels):
                prog.set_bounds(z_idx[l][si], float(z_lo[l, si]), float(z_hi[l, si]))
            prog.add_eq([(z_idx[l][si], 1.0) for si in range(n_levels)], 1.0)

    for oi, od in enumerate(ods):
        alpha = s.demand.entries[od]
        prog.set_bounds(x.start + oi, 0.0, alpha)
        prog.add_term(ObjectiveTerm(kind="linear", index=x.start + oi, coeff=-value))
    if fixed is not None:
        prog.constant = sum(
            line.operating_cost * levels[fixed.choices[l]] for l, line in enumerate(lines)
        )
    else:
        for l, line in enumerate(lines):
            for si in range(n_levels):
                prog.add_term(
                    ObjectiveTerm(
                        kind="linear", index=z_idx[l][si], coeff=line.operating_cost * levels[si]
                    )
                )

    # envelopes u = x * z
    u_by_od: dict[int, list[int]] = {}
    for k, (oi, line, si) in enumerate(u_entries):
        alpha = s.demand.entries[ods[oi]]
        prog.set_bounds(u.start + k, 0.0, alpha)
        if fixed is not None:
            zval = 1.0 if fixed.choices[line] == si else 0.0
            prog.add_envelope(u.start + k, x.start + oi, zval, alpha)
        else:
            prog.add_envelope(u.start + k, x.start + oi, z_idx[line][si], alpha)
        u_by_od.setdefault(oi, []).append(k)

    # capacity rows
    link_pos = s.transit.link_index()
    incidence = s.transit.line_edge_incidence()
    link_ods: dict[int, list[int]] = {}
    for oi, od in enumerate(ods):
        for uv in s.paths.transit_paths[od].links:
            link_ods.setdefault(link_pos[uv], []).append(oi)
    for li in range(len(s.transit.links)):
        users = link_ods.get(li, [])
        coeffs = [(x.start + oi, 1.0) for oi in users]
        cap_fixed = 0.0
        for l, line in enumerate(lines):
            if not incidence[l][li]:
                continue
            if fixed is not None:
                cap_fixed += line.capacity * levels[fixed.choices[l]]
            else:
                for si in range(n_levels):
                    coeffs.append((z_idx[l][si], -line.capacity * levels[si]))
        prog.add_ineq(coeffs, cap_fixed)

    # convex mode-choice inequality per OD
    for oi, od in enumerate(ods):
        alpha = s.demand.entries[od]
        coeffs = [(x.start + oi, c_od[od] + p.v_amod[od])]
        for k in u_by_od.get(oi, []):
            _, _, si = u_entries[k]
            coeffs.append((u.start + k, vot / (2.0 * levels[si])))
        prog.add_convex_row(
            ConvexRow(
                terms=[ObjectiveTerm(kind="log_odds", index=x.start + oi, total=alpha)],
                coeffs=coeffs,
                rhs=0.0,
            )
        )
    return prog, z_idx


def solve_pt_relaxation(
    p: PtBestResponseProblem, mip_gap: float = 0.01
) -> tuple[BinaryAssignment, dict[tuple[int, int], float], float, ConvexSolution]:
    """Global relaxed optimum: (assignment, x^pt*, profit upper bound, solution)."""
    s = p.scenario
    n_lines = len(s.transit.lines)
    n_levels = len(s.transit.frequency_levels)
    if n_levels**n_lines <= ENUMERATION_CAP:
        best = None
        for assignment in enumerate_binaries(n_lines, n_levels, cap=ENUMERATION_CAP):
            prog, _ = _build_node_program(p, fixed=assignment)
            sol = solve_convex(prog)
            if sol.status == "infeasible":  # pragma: no cover - x=0 always feasible
                continue
            if best is None or sol.objective < best[1].objective - 1e-9:
                best = (assignment, sol)
        assignment, sol = best
    else:
        def builder(z_lo, z_hi):
            return _build_node_program(p, z_bounds=(z_lo, z_hi))

        res = branch_and_bound(builder, n_lines, n_levels, mip_gap=mip_gap)
        assignment = res.assignment
        prog, _ = _build_node_program(p, fixed=assignment)
        sol = solve_convex(prog)
    flow = {od: float(v) for od, v in zip(s.od_pairs, sol.value("xpt"))}
    return assignment, flow, -sol.objective, sol


def waiting_time(p: PtBestResponseProblem, od, frequencies) -> float:
    return sum(0.5 / frequencies[line] for line in p.scenario.paths.transit_paths[od].lines)


def logit_flow_at(
    frequencies: tuple[float, ...], p: PtBestResponseProblem
) -> dict[tuple[int, int], float]:
    """Closed-form logit equilibrium flow at a frequency vector."""
    s = p.scenario
    c_od = p.c_od
    vot = s.calibration.vot
    out = {}
    for od in s.od_pairs:
        alpha = s.demand.entries[od]
        w = waiting_time(p, od, frequencies)
        out[od] = alpha * logistic(-vot * w - c_od[od] - p.v_amod[od])
    return out


def _link_loads(
    p: PtBestResponseProblem, flow: dict[tuple[int, int], float]
) -> tuple[np.ndarray, list[list[int]]]:
    s = p.scenario
    link_pos = s.transit.link_index()
    loads = np.zeros(len(s.transit.links))
    link_ods: list[list[int]] = [[] for _ in s.transit.links]
    for oi, od in enumerate(s.od_pairs):
        for uv in s.paths.transit_paths[od].links:
            loads[link_pos[uv]] += flow[od]
            link_ods[link_pos[uv]].append(oi)
    return loads, link_ods


def _link_capacities(p: PtBestResponseProblem, frequencies: tuple[float, ...]) -> np.ndarray:
    s = p.scenario
    incidence = s.transit.line_edge_incidence()
    caps = np.zeros(len(s.transit.links))
    for li in range(len(s.transit.links)):
        for l, line in enumerate(s.transit.lines):
            if incidence[l][li]:
                caps[li] += line.capacity * frequencies[l]
    return caps


def check_exactness(
    frequencies: tuple[float, ...],
    relaxed_flow: dict[tuple[int, int], float],
    p: PtBestResponseProblem,
) -> tuple[bool, float]:
    """Lemma-5 certificate: exact iff the logit flow respects every capacity row."""
    logit = logit_flow_at(frequencies, p)
    loads, _ = _link_loads(p, logit)
    caps = _link_capacities(p, frequencies)
    max_violation = float(np.max(loads - caps, initial=0.0))
    exact = max_violation <= EXACTNESS_TOL
    if exact:
        for od in p.scenario.od_pairs:
            alpha = p.scenario.demand.entries[od]
            if abs(relaxed_flow[od] - logit[od]) > 1e-5 * max(alpha, 1.0):
                exact = False
                max_violation = max(max_violation, abs(relaxed_flow[od] - logit[od]))
                break
    return exact, max_violation


def capacity_repair(
    frequencies: tuple[float, ...],
    relaxed_flow: dict[tuple[int, int], float],
    p: PtBestResponseProblem,
) -> tuple[tuple[float, ...], dict[tuple[int, int], float], float, dict[tuple[int, int], float]]:
    """Raise bottleneck frequencies until the logit flow fits; shed as last resort.

    Returns (frequencies, served flow, objective, shed_demand).
    """
    s = p.scenario
    levels = s.transit.frequency_levels
    incidence = s.transit.line_edge_incidence()
    choices = [levels.index(fr) for fr in frequencies]
    while True:
        freqs = tuple(levels[c] for c in choices)
        flow = logit_flow_at(freqs, p)
        loads, _ = _link_loads(p, flow)
        caps = _link_capacities(p, freqs)
        viol = loads - caps
        if float(np.max(viol, initial=0.0)) <= EXACTNESS_TOL:
            obj = p.passenger_value * sum(flow.values()) - sum(
                line.operating_cost * fr for line, fr in zip(s.transit.lines, freqs)
            )
            return freqs, flow, obj, {od: 0.0 for od in s.od_pairs}
        # most-violated link that still has an upgradable line
        candidates = []
        for li in np.argsort(-viol):
            if viol[li] <= EXACTNESS_TOL:
                break
            candidates = [
                l
                for l in range(len(s.transit.lines))
                if incidence[l][li] and choices[l] < len(levels) - 1
            ]
            if candidates:
                break
        if not candidates:
            break
        choices[min(candidates)] += 1  # lowest line index on ties

    # denied-boarding regime: uniform per-OD scaling on saturated links
    freqs = tuple(levels[c] for c in choices)
    flow = logit_flow_at(freqs, p)
    loads, _ = _link_loads(p, flow)
    caps = _link_capacities(p, freqs)
    link_pos = s.transit.link_index()
    served: dict[tuple[int, int], float] = {}
    shed: dict[tuple[int, int], float] = {}
    for od in s.od_pairs:
        scale = 1.0
        for uv in s.paths.transit_paths[od].links:
            li = link_pos[uv]
            if loads[li] > caps[li] + EXACTNESS_TOL and loads[li] > 0:
                scale = min(scale, caps[li] / loads[li])
        served[od] = flow[od] * scale
        shed[od] = flow[od] - served[od]
    obj = p.passenger_value * sum(served.values()) - sum(
        line.operating_cost * fr for line, fr in zip(s.transit.lines, freqs)
    )
    return freqs, served, obj, shed


def pt_gap(relaxed_objective: float, repaired_objective: float) -> tuple[float, bool]:
    """(gap, is_absolute): relative bracket width, absolute when repaired == 0."""
    if repaired_objective == 0.0:
        return relaxed_objective - repaired_objective, True
    return (relaxed_objective - repaired_objective) / abs(repaired_objective), False


def solve_pt_oracle(
    s: MultimodalScenario,
    v_amod: dict[tuple[int, int], float],
    mip_gap: float = 0.01,
) -> PtOracleResult:
    """Full PT deviation pipeline: relax, certify, repair when needed."""
    p = build_pt_micp(s, v_amod)
    assignment, flow, relaxed_obj, _ = solve_pt_relaxation(p, mip_gap)
    freqs = tuple(s.transit.frequency_levels[c] for c in assignment.choices)
    exact, max_violation = check_exactness(freqs, flow, p)
    logit = logit_flow_at(freqs, p)
    if exact:
        return PtOracleResult(
            frequencies=freqs,
            assignment=assignment,
            relaxed_flow=flow,
            relaxed_objective=relaxed_obj,
            exact=True,
            max_violation=max_violation,
            logit_flow=logit,
            repaired=None,
            gap=0.0,
            gap_is_absolute=False,
            shed_demand={od: 0.0 for od in s.od_pairs},
            scenario_fingerprint=s.fingerprint(),
        )
    rep_freqs, rep_flow, rep_obj, shed = capacity_repair(freqs, flow, p)
    gap, absolute = pt_gap(relaxed_obj, rep_obj)
    return PtOracleResult(
        frequencies=freqs,
        assignment=assignment,
        relaxed_flow=flow,
        relaxed_objective=relaxed_obj,
        exact=False,
        max_violation=max_violation,
        logit_flow=logit,
        repaired=(rep_freqs, rep_flow, rep_obj),
        gap=gap,
        gap_is_absolute=absolute,
        shed_demand=shed,
        scenario_fingerprint=s.fingerprint(),
    )


def fixed_amod_utilities(
    s: MultimodalScenario,
    t_amod: dict[tuple[int, int], float],
    prices: dict[tuple[int, int], float],
) -> dict[tuple[int, int], float]:
    """V^a per OD from the target's travel times and prices."""
    return {
        od: -s.calibration.vot * t_amod[od] - prices[od] for od in s.od_pairs
    }
