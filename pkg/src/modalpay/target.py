"""Target oracle: the socially optimal joint operating profile.

Step 1 solves the reduced mixed-integer convex program over physical flows
and frequency selection (prices and the logit constraint removed, entropy
regularization added). Step 2 recovers the AMoD prices that rationalize the
resulting mode shares. A structure check verifies the entropy-induced logit
identity from the solver duals, and ``unregularized_gap`` quantifies the
social-cost loss caused by the regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from modalpay.choice import DEFAULT_CLIP_FRACTION, ModeSplit, clip_shares, recover_price
from modalpay.network import MultimodalScenario, bpr_time
from modalpay.solver import (
    ENUMERATION_CAP,
    BinaryAssignment,
    ConvexProgram,
    ConvexSolution,
    ObjectiveTerm,
    SolverError,
    _rows_to_matrix,
    branch_and_bound,
    enumerate_binaries,
    solve_convex,
)

# Mode shares below this fraction of OD volume are treated as boundary
# (all-or-nothing) for the purpose of the logit-structure check.
INTERIOR_FRACTION = 1e-5


class TargetError(SolverError):
    pass


@dataclass(frozen=True)
class TargetProfile:
    """Socially optimal joint action plus the recovered prices."""

    assignment: BinaryAssignment
    frequencies: tuple[float, ...]  # s_l, vehicles/h
    prices: dict[tuple[int, int], float]
    mode_split: dict[tuple[int, int], ModeSplit]  # clipped shares used for pricing
    path_flows: dict[tuple[int, int], tuple[float, ...]]
    edge_flows: tuple[float, ...]  # f_ij, total AMoD flow per road edge
    rebalancing: tuple[float, ...]  # r_ij per road edge
    t_amod: dict[tuple[int, int], float]
    t_pt: dict[tuple[int, int], float]
    social_cost: float  # unregularized objective at the solution
    regularized_objective: float
    decomposition: dict[str, float]
    clip_magnitude: float  # largest share adjustment applied before pricing
    theta: float | None
    scenario_fingerprint: str


def _w_index(s: MultimodalScenario):
    """Flat ordering of the (od, line, level) linearization products."""
    entries = []
    levels = s.transit.frequency_levels
    for oi, od in enumerate(s.od_pairs):
        for line in s.paths.transit_paths[od].lines:
            for si in range(len(levels)):
                entries.append((oi, line, si))
    return entries


def _build_program(
    s: MultimodalScenario,
    theta: float | None,
    fixed: BinaryAssignment | None = None,
    z_bounds: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Reduced program; z either fixed one-hot or relaxed within bounds.

    Returns (program, z_indices) where z_indices is None in the fixed case.
    """
    ods = s.od_pairs
    if not ods:
        raise TargetError("scenario has no demand")
    cal = s.calibration
    road = s.road
    levels = s.transit.frequency_levels
    n_levels = len(levels)
    lines = s.transit.lines
    path_edges = {od: s.amod_path_edges(od) for od in ods}
    for od in ods:
        if not path_edges[od]:
            raise TargetError(f"empty AMoD path set for OD {od}")

    p = ConvexProgram()
    xp_offsets: dict[tuple[int, int], int] = {}
    n_xp = 0
    for od in ods:
        xp_offsets[od] = n_xp
        n_xp += len(path_edges[od])
    xp = p.add_variable("xp", n_xp, lb=0.0)
    xa = p.add_variable("xa", len(ods), lb=0.0)
    xpt = p.add_variable("xpt", len(ods), lb=0.0)
    f = p.add_variable("f", len(road.edges), lb=0.0)
    r = p.add_variable("r", len(road.edges), lb=0.0)
    w_entries = _w_index(s)
    w = p.add_variable("w", len(w_entries), lb=0.0)

    z_idx = None
    if fixed is None:
        z_lo, z_hi = z_bounds
        z = p.add_variable("z", len(lines) * n_levels, lb=0.0, ub=1.0)
        z_idx = [[z.start + l * n_levels + si for si in range(n_levels)] for l in range(len(lines))]
        for l in range(len(lines)):
            for si in range(n_levels):
                p.set_bounds(z_idx[l][si], float(z_lo[l, si]), float(z_hi[l, si]))
            p.add_eq([(z_idx[l][si], 1.0) for si in range(n_levels)], 1.0)

    for oi, od in enumerate(ods):
        alpha = s.demand.entries[od]
        p.set_bounds(xa.start + oi, 0.0, alpha)
        p.set_bounds(xpt.start + oi, 0.0, alpha)

    # flow composition: f_e - r_e - sum of path flows through e = 0
    edge_paths: list[list[int]] = [[] for _ in road.edges]
    for od in ods:
        for pi, edges in enumerate(path_edges[od]):
            for e in edges:
                edge_paths[e].append(xp.start + xp_offsets[od] + pi)
    for e in range(len(road.edges)):
        coeffs = [(f.start + e, 1.0), (r.start + e, -1.0)]
        coeffs += [(j, -1.0) for j in edge_paths[e]]
        p.add_eq(coeffs, 0.0)

    # rebalancing conservation at every road node
    node_rows: dict[int, list[tuple[int, float]]] = {v: [] for v in road.nodes}
    for e, edge in enumerate(road.edges):
        node_rows[edge.head].append((r.start + e, 1.0))
        node_rows[edge.tail].append((r.start + e, -1.0))
    for od in ods:
        o_road = s.road_alias(od[0])
        d_road = s.road_alias(od[1])
        for pi in range(len(path_edges[od])):
            j = xp.start + xp_offsets[od] + pi
            node_rows[o_road].append((j, -1.0))
            node_rows[d_road].append((j, 1.0))
    for v in road.nodes:
        p.add_eq(node_rows[v], 0.0)

    for oi, od in enumerate(ods):
        alpha = s.demand.entries[od]
        coeffs = [(xa.start + oi, 1.0)]
        coeffs += [(xp.start + xp_offsets[od] + pi, -1.0) for pi in range(len(path_edges[od]))]
        p.add_eq(coeffs, 0.0)
        p.add_eq([(xa.start + oi, 1.0), (xpt.start + oi, 1.0)], alpha)

    # transit capacity per transit link
    link_list = s.transit.links
    incidence = s.transit.line_edge_incidence()
    link_ods: dict[int, list[int]] = {}
    link_pos = s.transit.link_index()
    for oi, od in enumerate(ods):
        for uv in s.paths.transit_paths[od].links:
            link_ods.setdefault(link_pos[uv], []).append(oi)
    for li in range(len(link_list)):
        users = link_ods.get(li, [])
        cap_fixed = 0.0
        coeffs = [(xpt.start + oi, 1.0) for oi in users]
        for l, line in enumerate(lines):
            if not incidence[l][li]:
                continue
            if fixed is not None:
                cap_fixed += line.capacity * levels[fixed.choices[l]]
            else:
                for si in range(n_levels):
                    coeffs.append((z_idx[l][si], -line.capacity * levels[si]))
        if users or coeffs:
            p.add_ineq(coeffs, cap_fixed)

    # envelope rows tying w to x^pt * z
    for k, (oi, line, si) in enumerate(w_entries):
        alpha = s.demand.entries[ods[oi]]
        p.set_bounds(w.start + k, 0.0, alpha)
        if fixed is not None:
            zval = 1.0 if fixed.choices[line] == si else 0.0
            p.add_envelope(w.start + k, xpt.start + oi, zval, alpha)
        else:
            p.add_envelope(w.start + k, xpt.start + oi, z_idx[line][si], alpha)

    # objective
    for e, edge in enumerate(road.edges):
        p.add_term(
            ObjectiveTerm(
                kind="bpr_total",
                index=f.start + e,
                coeff=cal.vot_env,
                t0=edge.free_flow_time,
                bpr_alpha=road.bpr_alpha,
                bpr_beta=road.bpr_beta,
                capacity=edge.capacity,
                background=edge.background,
            )
        )
        if edge.operating_cost:
            p.add_term(ObjectiveTerm(kind="linear", index=f.start + e, coeff=edge.operating_cost))
    for oi, od in enumerate(ods):
        tau = s.paths.transit_paths[od].fixed_time
        if tau:
            p.add_term(ObjectiveTerm(kind="linear", index=xpt.start + oi, coeff=cal.vot * tau))
        if theta is not None:
            p.add_term(ObjectiveTerm(kind="entropy", index=xa.start + oi, coeff=1.0 / theta))
            p.add_term(ObjectiveTerm(kind="entropy", index=xpt.start + oi, coeff=1.0 / theta))
    for k, (oi, line, si) in enumerate(w_entries):
        p.add_term(
            ObjectiveTerm(kind="linear", index=w.start + k, coeff=cal.vot / (2.0 * levels[si]))
        )
    if fixed is not None:
        p.constant = sum(
            line.operating_cost * levels[fixed.choices[l]] for l, line in enumerate(lines)
        )
    else:
        for l, line in enumerate(lines):
            for si in range(n_levels):
                p.add_term(
                    ObjectiveTerm(
                        kind="linear", index=z_idx[l][si], coeff=line.operating_cost * levels[si]
                    )
                )
    return p, z_idx


def build_reduced_program(
    s: MultimodalScenario, z: BinaryAssignment, theta: float | None
) -> ConvexProgram:
    """Step-1 reduced program for a fixed one-hot frequency selection."""
    if any(not 0 <= c < len(s.transit.frequency_levels) for c in z.choices):
        raise TargetError("assignment level out of range")
    program, _ = _build_program(s, theta, fixed=z)
    return program


def _best_assignment(s: MultimodalScenario, theta: float | None, mip_gap: float):
    """Optimize over one-hot frequency selections; exact enumeration when small."""
    n_lines = len(s.transit.lines)
    n_levels = len(s.transit.frequency_levels)
    if n_levels**n_lines <= ENUMERATION_CAP:
        best: tuple[BinaryAssignment, ConvexSolution] | None = None
        for assignment in enumerate_binaries(n_lines, n_levels, cap=ENUMERATION_CAP):
            program = build_reduced_program(s, assignment, theta)
            sol = solve_convex(program)
            if sol.status == "infeasible":
                continue
            if best is None or sol.objective < best[1].objective - 1e-9:
                best = (assignment, sol)
        if best is None:
            raise TargetError("infeasible at every frequency assignment")
        return best

    def builder(z_lo, z_hi):
        return _build_program(s, theta, z_bounds=(z_lo, z_hi))

    result = branch_and_bound(builder, n_lines, n_levels, mip_gap=mip_gap)
    # re-solve at the integral incumbent so the fixed-z structure (duals,
    # constant K_l s_l term) matches the enumeration path exactly
    program = build_reduced_program(s, result.assignment, theta)
    sol = solve_convex(program)
    if sol.status == "infeasible":  # pragma: no cover - incumbent was feasible
        raise TargetError("incumbent re-solve infeasible")
    return result.assignment, sol


def _path_time(s: MultimodalScenario, edges: tuple[int, ...], flows: np.ndarray) -> float:
    road = s.road
    return sum(
        bpr_time(
            road.edges[e],
            road.edges[e].background + float(flows[e]),
            bpr_alpha=road.bpr_alpha,
            bpr_beta=road.bpr_beta,
        )
        for e in edges
    )


def solve_target(
    s: MultimodalScenario,
    theta: float | None = None,
    mip_gap: float = 0.01,
) -> TargetProfile:
    """Two-step target computation: reduced MICP, then price recovery."""
    profile, _ = solve_target_full(s, theta, mip_gap)
    return profile


def solve_target_full(
    s: MultimodalScenario,
    theta: float | None = None,
    mip_gap: float = 0.01,
) -> tuple[TargetProfile, ConvexSolution]:
    """Like solve_target but also returns the Step-1 solution (for dual checks)."""
    if theta is None:
        theta = s.calibration.theta
    assignment, sol = _best_assignment(s, theta, mip_gap)
    return assemble_profile(s, assignment, sol, theta), sol


def assemble_profile(
    s: MultimodalScenario,
    assignment: BinaryAssignment,
    sol: ConvexSolution,
    theta: float | None,
) -> TargetProfile:
    """Step-2 post-processing of an optimal reduced solution."""
    ods = s.od_pairs
    cal = s.calibration
    levels = s.transit.frequency_levels
    freqs = tuple(levels[c] for c in assignment.choices)
    flows = sol.value("f")
    reb = sol.value("r")
    xa = sol.value("xa")
    xpt = sol.value("xpt")
    xp = sol.value("xp")

    path_edges = {od: s.amod_path_edges(od) for od in ods}
    path_flows: dict[tuple[int, int], tuple[float, ...]] = {}
    prices: dict[tuple[int, int], float] = {}
    split: dict[tuple[int, int], ModeSplit] = {}
    t_amod: dict[tuple[int, int], float] = {}
    t_pt: dict[tuple[int, int], float] = {}
    clip_mag = 0.0

    offset = 0
    for oi, od in enumerate(ods):
        n_paths = len(path_edges[od])
        flows_od = tuple(float(xp[offset + pi]) for pi in range(n_paths))
        offset += n_paths
        path_flows[od] = flows_od
        times = [_path_time(s, edges, flows) for edges in path_edges[od]]
        alpha = s.demand.entries[od]
        if xa[oi] > 1e-9 * alpha:
            t_a = sum(fl * t for fl, t in zip(flows_od, times)) / float(xa[oi])
        else:
            t_a = min(times)  # no assigned flow: best available path time
        tp = s.paths.transit_paths[od]
        t_p = tp.fixed_time + sum(0.5 / freqs[line] for line in tp.lines)
        raw = ModeSplit(x_amod=float(xa[oi]), x_pt=float(xpt[oi]), total=alpha)
        clipped = clip_shares(raw, DEFAULT_CLIP_FRACTION * alpha)
        clip_mag = max(clip_mag, abs(clipped.x_amod - raw.x_amod))
        prices[od] = recover_price(
            t_a, t_p, clipped.x_amod, clipped.x_pt, s.transit.fare, cal.vot
        )
        split[od] = clipped
        t_amod[od] = t_a
        t_pt[od] = t_p

    decomposition = _decompose_objective(sol)
    return TargetProfile(
        assignment=assignment,
        frequencies=freqs,
        prices=prices,
        mode_split=split,
        path_flows=path_flows,
        edge_flows=tuple(float(v) for v in flows),
        rebalancing=tuple(float(v) for v in reb),
        t_amod=t_amod,
        t_pt=t_pt,
        social_cost=sol.program.objective_value(sol.x, skip=("entropy",)),
        regularized_objective=sol.objective,
        decomposition=decomposition,
        clip_magnitude=clip_mag,
        theta=theta,
        scenario_fingerprint=s.fingerprint(),
    )


def _decompose_objective(sol: ConvexSolution) -> dict[str, float]:
    from modalpay.solver import term_value

    p = sol.program
    groups = {"road_delay": 0.0, "transit_time": 0.0, "amod_cost": 0.0, "entropy": 0.0}
    f_sl = p.slices["f"]
    w_sl = p.slices["w"]
    xpt_sl = p.slices["xpt"]
    for t in p.terms:
        v = term_value(t, sol.x[t.index])
        if t.kind == "bpr_total":
            groups["road_delay"] += v
        elif t.kind == "entropy":
            groups["entropy"] += v
        elif f_sl.start <= t.index < f_sl.stop:
            groups["amod_cost"] += v
        elif w_sl.start <= t.index < w_sl.stop or xpt_sl.start <= t.index < xpt_sl.stop:
            groups["transit_time"] += v
    groups["pt_cost"] = p.constant
    return groups


def check_logit_structure(
    profile: TargetProfile, solution: ConvexSolution, theta: float
) -> float:
    """Lemma-2 identity from the duals: max |ln(xa/xpt) - theta*(MSC_pt - MSC_a)|.

    MSC of a mode is the derivative of the full Lagrangian minus the entropy
    term with respect to that mode's demand variable.
    """
    p = solution.program
    x = solution.x
    grad = p.objective_gradient(x, skip=("entropy",))
    a_eq, b_eq = _rows_to_matrix(p.eq_rows, p.n)
    a_in, b_in = _rows_to_matrix(p.ineq_rows, p.n)
    if a_eq.shape[0]:
        grad = grad + a_eq.T @ solution.eq_duals
    if a_in.shape[0]:
        grad = grad + a_in.T @ solution.ineq_duals
    from modalpay.solver import term_gradient

    for row, rho in zip(p.convex_rows, solution.convex_duals):
        for t in row.terms:
            grad[t.index] += rho * term_gradient(t, x[t.index])
        for j, c in row.coeffs:
            grad[j] += rho * c
    grad = grad - solution.lb_duals + solution.ub_duals

    xa_sl = p.slices["xa"]
    xpt_sl = p.slices["xpt"]
    resid = -math.inf
    checked = 0
    for oi, (od, sp) in enumerate(sorted(profile.mode_split.items())):
        alpha = sp.total
        x_a = x[xa_sl.start + oi]
        x_p = x[xpt_sl.start + oi]
        if x_a < INTERIOR_FRACTION * alpha or x_p < INTERIOR_FRACTION * alpha:
            continue
        msc_a = grad[xa_sl.start + oi]
        msc_pt = grad[xpt_sl.start + oi]
        resid = max(resid, abs(math.log(x_a / x_p) - theta * (msc_pt - msc_a)))
        checked += 1
    if not checked:
        raise ValueError("all mode shares on the boundary; structure check not applicable")
    return resid


def unregularized_gap(
    s: MultimodalScenario, theta: float, mip_gap: float = 0.01
) -> tuple[float, float, float]:
    """(eta_r, eta_d, loss): regularization loss against the decomposed optimum."""
    _, sol_d = _best_assignment(s, None, mip_gap)
    eta_d = sol_d.objective
    profile = solve_target(s, theta, mip_gap)
    eta_r = profile.social_cost
    loss = (eta_r - eta_d) / eta_d
    return eta_r, eta_d, loss


def social_cost_at(
    s: MultimodalScenario,
    frequencies: tuple[float, ...],
    edge_flows: np.ndarray,
    xpt_by_od: dict[tuple[int, int], float],
) -> float:
    """Unregularized social objective at an arbitrary joint operating point."""
    cal = s.calibration
    road = s.road
    total = 0.0
    for e, edge in enumerate(road.edges):
        q = edge.background + float(edge_flows[e])
        total += cal.vot_env * q * bpr_time(
            edge, q, bpr_alpha=road.bpr_alpha, bpr_beta=road.bpr_beta
        )
        total += edge.operating_cost * float(edge_flows[e])
    for od, x_p in xpt_by_od.items():
        tp = s.paths.transit_paths[od]
        t_p = tp.fixed_time + sum(0.5 / frequencies[line] for line in tp.lines)
        total += cal.vot * x_p * t_p
    for line, s_l in zip(s.transit.lines, frequencies):
        total += line.operating_cost * s_l
    return total
