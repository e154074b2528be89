"""AMoD best-response oracle against a fixed transit action.

Exact reformulation with the nonconvexity isolated in the edge term
(f - r) T(b + f), a convex-relaxation upper bound on operator profit, a
trust-region SCA loop producing a feasible incumbent, and the certified
relative gap between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from modalpay.choice import DEFAULT_CLIP_FRACTION
from modalpay.network import MultimodalScenario, bpr_time
from modalpay.solver import (
    ConvexProgram,
    ConvexSolution,
    ObjectiveTerm,
    SolverError,
    solve_convex,
)

EPS_F_DEFAULT = 1e-4
EPS_R_DEFAULT = 1e-4
EPS_OBJ_DEFAULT = 1e-3
TRUST_FRACTION_DEFAULT = 0.10  # of max edge capacity
FEASIBILITY_TOL = 1e-6


class AmodError(SolverError):
    pass


@dataclass(frozen=True)
class AmodBestResponseProblem:
    """Profit maximization with the PT utilities frozen at the target."""

    scenario: MultimodalScenario
    v_pt: dict[tuple[int, int], float]

    def __post_init__(self):
        for od in self.scenario.od_pairs:
            v = self.v_pt.get(od)
            if v is None or not math.isfinite(v):
                raise AmodError(f"missing or non-finite PT utility for OD {od}")


@dataclass(frozen=True)
class AmodPoint:
    """One feasible operating point in program layout order."""

    xp: np.ndarray  # path flows, concatenated in OD order
    xa: np.ndarray  # per-OD AMoD demand
    f: np.ndarray  # total edge flow
    r: np.ndarray  # rebalancing edge flow


@dataclass
class AmodOracleResult:
    upper_bound: float  # eta_bar, currency/h
    lower_bound: float  # eta_underbar: exact profit of the incumbent
    gap: float
    gap_is_absolute: bool  # eta_bar <= 0: relative gap undefined
    incumbent: AmodPoint
    prices: dict[tuple[int, int], float]
    iterations: list[dict]
    status: str  # converged | max_iter
    scenario_fingerprint: str = ""


class AmodReformulation:
    """Lemma-3 objective evaluator plus the shared linear constraint set."""

    def __init__(self, problem: AmodBestResponseProblem):
        s = problem.scenario
        self.problem = problem
        self.scenario = s
        self.ods = s.od_pairs
        self.alphas = np.array([s.demand.entries[od] for od in self.ods])
        self.path_edges = {od: s.amod_path_edges(od) for od in self.ods}
        self.v_pt = np.array([problem.v_pt[od] for od in self.ods])
        self.xp_offsets: dict[tuple[int, int], int] = {}
        n = 0
        for od in self.ods:
            if not self.path_edges[od]:
                raise AmodError(f"empty AMoD path set for OD {od}")
            self.xp_offsets[od] = n
            n += len(self.path_edges[od])
        self.n_xp = n

    # -- construction -----------------------------------------------------

    def base_program(self) -> ConvexProgram:
        """Constraints and the convex objective pieces common to all solves.

        The congestion term (f-r)T(b+f) is NOT included; relaxation and SCA
        each install their own convex stand-in.
        """
        s = self.scenario
        road = s.road
        p = ConvexProgram()
        xp = p.add_variable("xp", self.n_xp, lb=0.0)
        xa = p.add_variable("xa", len(self.ods), lb=0.0)
        f = p.add_variable("f", len(road.edges), lb=0.0)
        r = p.add_variable("r", len(road.edges), lb=0.0)

        for oi, od in enumerate(self.ods):
            p.set_bounds(xa.start + oi, 0.0, self.alphas[oi])

        edge_paths: list[list[int]] = [[] for _ in road.edges]
        for od in self.ods:
            for pi, edges in enumerate(self.path_edges[od]):
                for e in edges:
                    edge_paths[e].append(xp.start + self.xp_offsets[od] + pi)
        for e in range(len(road.edges)):
            coeffs = [(f.start + e, 1.0), (r.start + e, -1.0)]
            coeffs += [(j, -1.0) for j in edge_paths[e]]
            p.add_eq(coeffs, 0.0)

        node_rows: dict[int, list[tuple[int, float]]] = {v: [] for v in road.nodes}
        for e, edge in enumerate(road.edges):
            node_rows[edge.head].append((r.start + e, 1.0))
            node_rows[edge.tail].append((r.start + e, -1.0))
        for od in self.ods:
            o_road = s.road_alias(od[0])
            d_road = s.road_alias(od[1])
            for pi in range(len(self.path_edges[od])):
                j = xp.start + self.xp_offsets[od] + pi
                node_rows[o_road].append((j, -1.0))
                node_rows[d_road].append((j, 1.0))
        for v in road.nodes:
            p.add_eq(node_rows[v], 0.0)

        for oi, od in enumerate(self.ods):
            coeffs = [(xa.start + oi, 1.0)]
            coeffs += [
                (xp.start + self.xp_offsets[od] + pi, -1.0)
                for pi in range(len(self.path_edges[od]))
            ]
            p.add_eq(coeffs, 0.0)

        for oi in range(len(self.ods)):
            p.add_term(
                ObjectiveTerm(kind="log_odds", index=xa.start + oi, total=float(self.alphas[oi]))
            )
            p.add_term(
                ObjectiveTerm(kind="linear", index=xa.start + oi, coeff=float(self.v_pt[oi]))
            )
        for e, edge in enumerate(road.edges):
            if edge.operating_cost:
                p.add_term(ObjectiveTerm(kind="linear", index=f.start + e, coeff=edge.operating_cost))
        return p

    # -- evaluation -------------------------------------------------------

    def edge_times(self, f: np.ndarray) -> np.ndarray:
        road = self.scenario.road
        return np.array(
            [
                bpr_time(
                    edge, edge.background + float(f[e]),
                    bpr_alpha=road.bpr_alpha, bpr_beta=road.bpr_beta,
                )
                for e, edge in enumerate(road.edges)
            ]
        )

    def phi(self, point: AmodPoint) -> float:
        """Exact reformulated objective (minimization form)."""
        s = self.scenario
        cal = s.calibration
        total = 0.0
        for oi in range(len(self.ods)):
            x = float(point.xa[oi])
            alpha = float(self.alphas[oi])
            eps = DEFAULT_CLIP_FRACTION * alpha
            x = min(max(x, 0.0), alpha)
            if x > 0.0:
                total += x * math.log(max(x, eps))
                total -= x * math.log(max(alpha - x, eps))
            total += x * float(self.v_pt[oi])
        for e, edge in enumerate(s.road.edges):
            total += edge.operating_cost * float(point.f[e])
        times = self.edge_times(point.f)
        total += cal.vot * float(np.sum((point.f - point.r) * times))
        return total

    def profit(self, point: AmodPoint) -> float:
        return -self.phi(point)

    def prices(self, point: AmodPoint) -> dict[tuple[int, int], float]:
        """Per-OD price supporting the point's shares (eq. choice-price form)."""
        cal = self.scenario.calibration
        times = self.edge_times(point.f)
        out: dict[tuple[int, int], float] = {}
        for oi, od in enumerate(self.ods):
            alpha = float(self.alphas[oi])
            eps = DEFAULT_CLIP_FRACTION * alpha
            x = min(max(float(point.xa[oi]), eps), alpha - eps)
            t_a = self._expected_time(oi, od, point, times)
            out[od] = -(math.log(x) - math.log(alpha - x) + cal.vot * t_a + float(self.v_pt[oi]))
        return out

    def _expected_time(self, oi: int, od, point: AmodPoint, times: np.ndarray) -> float:
        base = self.xp_offsets[od]
        path_times = [sum(times[e] for e in edges) for edges in self.path_edges[od]]
        flows = [float(point.xp[base + pi]) for pi in range(len(path_times))]
        tot = sum(flows)
        if tot <= 1e-9 * float(self.alphas[oi]):
            return min(path_times)
        return sum(fl * t for fl, t in zip(flows, path_times)) / tot

    def profit_via_prices(self, point: AmodPoint) -> float:
        """Revenue minus operating cost with prices from the choice inversion."""
        prices = self.prices(point)
        revenue = sum(prices[od] * float(point.xa[oi]) for oi, od in enumerate(self.ods))
        cost = sum(
            edge.operating_cost * float(point.f[e])
            for e, edge in enumerate(self.scenario.road.edges)
        )
        return revenue - cost

    def feasibility_violation(self, point: AmodPoint) -> float:
        """Max violation of flow composition, node balance, and demand totals."""
        s = self.scenario
        road = s.road
        scale = 1.0 + float(np.max(np.abs(point.f), initial=0.0))
        pax = np.zeros(len(road.edges))
        for od in self.ods:
            base = self.xp_offsets[od]
            for pi, edges in enumerate(self.path_edges[od]):
                for e in edges:
                    pax[e] += point.xp[base + pi]
        worst = float(np.max(np.abs(point.f - point.r - pax), initial=0.0))
        net = {v: 0.0 for v in road.nodes}
        for e, edge in enumerate(road.edges):
            net[edge.head] += float(point.r[e])
            net[edge.tail] -= float(point.r[e])
        for oi, od in enumerate(self.ods):
            base = self.xp_offsets[od]
            tot = sum(float(point.xp[base + pi]) for pi in range(len(self.path_edges[od])))
            net[s.road_alias(od[0])] -= tot
            net[s.road_alias(od[1])] += tot
            worst = max(worst, abs(tot - float(point.xa[oi])))
        worst = max(worst, max(abs(v) for v in net.values()))
        neg = -min(
            0.0,
            float(np.min(point.xp, initial=0.0)),
            float(np.min(point.r, initial=0.0)),
            float(np.min(point.xa, initial=0.0)),
        )
        return max(worst, neg) / scale


def build_exact_reformulation(
    s: MultimodalScenario, v_pt: dict[tuple[int, int], float]
) -> AmodReformulation:
    return AmodReformulation(AmodBestResponseProblem(scenario=s, v_pt=dict(v_pt)))


def _point_from_solution(ref: AmodReformulation, sol: ConvexSolution) -> AmodPoint:
    return AmodPoint(
        xp=np.array(sol.value("xp")),
        xa=np.array(sol.value("xa")),
        f=np.array(sol.value("f")),
        r=np.array(sol.value("r")),
    )


def solve_relaxation(
    p: AmodBestResponseProblem,
) -> tuple[float, AmodPoint, ConvexSolution]:
    """Upper bound: replace (f-r)T(b+f) with the underestimator v T(b+v)."""
    ref = AmodReformulation(p) if not isinstance(p, AmodReformulation) else p
    s = ref.scenario
    road = s.road
    prog = ref.base_program()
    f = prog.slices["f"]
    r = prog.slices["r"]
    v = prog.add_variable("v", len(road.edges), lb=0.0)
    for e, edge in enumerate(road.edges):
        prog.add_eq([(v.start + e, 1.0), (f.start + e, -1.0), (r.start + e, 1.0)], 0.0)
        prog.add_term(
            ObjectiveTerm(
                kind="bpr_partial",
                index=v.start + e,
                coeff=s.calibration.vot,
                t0=edge.free_flow_time,
                bpr_alpha=road.bpr_alpha,
                bpr_beta=road.bpr_beta,
                capacity=edge.capacity,
                background=edge.background,
            )
        )
    sol = solve_convex(prog)
    if sol.status == "infeasible":  # pragma: no cover - problem is always feasible
        raise AmodError("relaxation infeasible")
    return -sol.objective, _point_from_solution(ref, sol), sol


def cold_start(p: AmodBestResponseProblem) -> AmodPoint:
    """Zero rebalancing is infeasible in general; start from the relaxed point
    projected back to the exact problem (it satisfies all shared constraints)."""
    _, point, _ = solve_relaxation(p)
    return point


def _sca_subproblem(
    ref: AmodReformulation,
    center: AmodPoint,
    delta_f: float,
    delta_r: float,
) -> ConvexProgram:
    s = ref.scenario
    road = s.road
    vot = s.calibration.vot
    prog = ref.base_program()
    f = prog.slices["f"]
    r = prog.slices["r"]
    times = ref.edge_times(center.f)
    for e, edge in enumerate(road.edges):
        q = edge.background + float(center.f[e])
        grad_t = (
            edge.free_flow_time
            * road.bpr_alpha
            * road.bpr_beta
            / edge.capacity
            * (q / edge.capacity) ** (road.bpr_beta - 1.0)
        )
        # exact convex part f*T(b+f)
        prog.add_term(
            ObjectiveTerm(
                kind="bpr_partial",
                index=f.start + e,
                coeff=vot,
                t0=edge.free_flow_time,
                bpr_alpha=road.bpr_alpha,
                bpr_beta=road.bpr_beta,
                capacity=edge.capacity,
                background=edge.background,
            )
        )
        # first-order model of G = -r T(b+f) around the center
        prog.add_term(ObjectiveTerm(kind="linear", index=r.start + e, coeff=-vot * float(times[e])))
        prog.add_term(
            ObjectiveTerm(kind="linear", index=f.start + e, coeff=-vot * float(center.r[e]) * grad_t)
        )
        prog.constant += vot * float(center.r[e]) * grad_t * float(center.f[e])
        prog.set_bounds(
            f.start + e,
            max(0.0, float(center.f[e]) - delta_f),
            float(center.f[e]) + delta_f,
        )
        prog.set_bounds(
            r.start + e,
            max(0.0, float(center.r[e]) - delta_r),
            float(center.r[e]) + delta_r,
        )
    return prog


def sca_solve(
    p: AmodBestResponseProblem,
    start: AmodPoint | None = None,
    delta_f: float | None = None,
    delta_r: float | None = None,
    eps_f: float = EPS_F_DEFAULT,
    eps_r: float = EPS_R_DEFAULT,
    eps_obj: float = EPS_OBJ_DEFAULT,
    max_iter: int = 50,
) -> AmodOracleResult:
    """Trust-region SCA; incumbent is always scored with the exact objective."""
    ref = AmodReformulation(p)
    upper, relaxed_point, _ = solve_relaxation(ref)
    if start is None:
        start = relaxed_point
    if ref.feasibility_violation(start) > FEASIBILITY_TOL:
        raise AmodError("SCA start point is infeasible")

    cap_max = max(e.capacity for e in ref.scenario.road.edges)
    delta_f0 = delta_f if delta_f is not None else TRUST_FRACTION_DEFAULT * cap_max
    delta_r0 = delta_r if delta_r is not None else TRUST_FRACTION_DEFAULT * cap_max
    df, dr = delta_f0, delta_r0

    incumbent = start
    inc_phi = ref.phi(start)
    center = start
    center_phi = inc_phi
    trace: list[dict] = []
    status = "max_iter"
    streak = 0

    for it in range(max_iter):
        prog = _sca_subproblem(ref, center, df, dr)
        sol = solve_convex(prog)
        if sol.status == "infeasible":
            df /= 2.0
            dr /= 2.0
            streak = 0
            trace.append({"iteration": it, "status": "infeasible", "delta_f": df, "delta_r": dr})
            if df < eps_f and dr < eps_r:
                status = "converged"
                break
            continue
        cand = _point_from_solution(ref, sol)
        cand_phi = ref.phi(cand)
        step_f = float(np.max(np.abs(cand.f - center.f), initial=0.0))
        step_r = float(np.max(np.abs(cand.r - center.r), initial=0.0))
        improved = cand_phi < center_phi - 1e-12
        trace.append(
            {
                "iteration": it,
                "exact_objective": cand_phi,
                "linearized_objective": sol.objective,
                "step_f": step_f,
                "step_r": step_r,
                "delta_f": df,
                "delta_r": dr,
                "accepted": improved,
            }
        )
        if improved:
            obj_change = center_phi - cand_phi
            center = cand
            center_phi = cand_phi
            if cand_phi < inc_phi:
                incumbent = cand
                inc_phi = cand_phi
            streak += 1
            if streak >= 2:
                df, dr = delta_f0, delta_r0
            if step_f <= eps_f and step_r <= eps_r:
                status = "converged"
                break
            if obj_change <= eps_obj:
                status = "converged"
                break
        else:
            df /= 2.0
            dr /= 2.0
            streak = 0
            if df < eps_f and dr < eps_r:
                status = "converged"
                break

    lower = -inc_phi
    result = AmodOracleResult(
        upper_bound=upper,
        lower_bound=lower,
        gap=0.0,
        gap_is_absolute=False,
        incumbent=incumbent,
        prices=ref.prices(incumbent),
        iterations=trace,
        status=status,
        scenario_fingerprint=ref.scenario.fingerprint(),
    )
    result.gap = certified_gap(result)
    return result


def certified_gap(result: AmodOracleResult) -> float:
    """(eta_bar - eta_underbar)/eta_bar; absolute difference when eta_bar <= 0."""
    ub, lb = result.upper_bound, result.lower_bound
    if ub > 0:
        result.gap_is_absolute = False
        return (ub - lb) / ub
    result.gap_is_absolute = True
    return ub - lb


def fixed_pt_utilities(
    s: MultimodalScenario, frequencies: tuple[float, ...]
) -> dict[tuple[int, int], float]:
    """V^pt per OD for a given frequency vector (target or deviated)."""
    cal = s.calibration
    out: dict[tuple[int, int], float] = {}
    for od in s.od_pairs:
        tp = s.paths.transit_paths[od]
        t_pt = tp.fixed_time + sum(0.5 / frequencies[line] for line in tp.lines)
        out[od] = -cal.vot * t_pt - s.transit.fare
    return out
