"""Shared optimization engines.

Three pieces the oracles have in common: a continuous solver for separable
convex objectives over linear (plus separable-convex inequality) constraints,
an exhaustive enumerator / branch-and-bound over one-hot frequency selections,
and the exact big-M product envelope.

The continuous solves are delegated to a conic interior-point backend
(Clarabel via cvxpy); the ConvexProgram surface, dual extraction, and KKT
verification are owned here.
"""

from __future__ import annotations

import heapq
import itertools
import math
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

TERM_KINDS = ("linear", "bpr_total", "bpr_partial", "entropy", "log_odds")

ENUMERATION_CAP = 10**6
DEFAULT_TOL = 1e-7
DOMAIN_GUARD_FRACTION = 1e-9  # log_odds/entropy evaluated on [eps, alpha - eps]


class SolverError(RuntimeError):
    pass


class EnumerationCapError(ValueError):
    """Too many assignments to enumerate; use branch_and_bound instead."""


@dataclass(frozen=True)
class ObjectiveTerm:
    """One separable objective term bound to a single flat variable index."""

    kind: str
    index: int
    coeff: float = 1.0
    # bpr_* parameters
    t0: float = 0.0
    bpr_alpha: float = 0.0
    bpr_beta: float = 4.0
    capacity: float = 1.0
    background: float = 0.0
    # log_odds total (the OD volume bound)
    total: float = 0.0


@dataclass
class LinearRow:
    coeffs: list[tuple[int, float]]
    rhs: float


@dataclass
class ConvexRow:
    """Separable-convex inequality:  sum(terms) + sum(c_j x_j) <= rhs."""

    terms: list[ObjectiveTerm]
    coeffs: list[tuple[int, float]]
    rhs: float


class ConvexProgram:
    """Named nonnegative continuous variables, linear rows, convex terms."""

    def __init__(self) -> None:
        self.n = 0
        self.slices: dict[str, slice] = {}
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.eq_rows: list[LinearRow] = []
        self.ineq_rows: list[LinearRow] = []
        self.convex_rows: list[ConvexRow] = []
        self.terms: list[ObjectiveTerm] = []
        self.constant = 0.0

    def add_variable(self, name: str, size: int, lb: float = 0.0, ub: float = math.inf) -> slice:
        if name in self.slices:
            raise ValueError(f"duplicate variable {name}")
        sl = slice(self.n, self.n + size)
        self.slices[name] = sl
        self.n += size
        self.lb.extend([lb] * size)
        self.ub.extend([ub] * size)
        return sl

    def index(self, name: str, i: int = 0) -> int:
        sl = self.slices[name]
        if not 0 <= i < sl.stop - sl.start:
            raise IndexError(f"{name}[{i}] out of range")
        return sl.start + i

    def set_bounds(self, idx: int, lb: float, ub: float) -> None:
        self.lb[idx] = lb
        self.ub[idx] = ub

    def add_eq(self, coeffs: list[tuple[int, float]], rhs: float) -> None:
        self.eq_rows.append(LinearRow(coeffs, rhs))

    def add_ineq(self, coeffs: list[tuple[int, float]], rhs: float) -> None:
        """Row sum(c_j x_j) <= rhs."""
        self.ineq_rows.append(LinearRow(coeffs, rhs))

    def add_term(self, term: ObjectiveTerm) -> None:
        if term.kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind {term.kind}")
        self.terms.append(term)

    def add_convex_row(self, row: ConvexRow) -> None:
        self.convex_rows.append(row)

    def add_envelope(self, w_idx: int, x_idx: int, z, alpha: float) -> None:
        """Big-M rows tying w to the product x*z; z is a variable index or a constant."""
        for a_w, a_x, a_z, rhs in big_m_envelope(alpha):
            coeffs = [(w_idx, a_w)]
            row_rhs = rhs
            if a_x:
                coeffs.append((x_idx, a_x))
            if a_z:
                if isinstance(z, (int, np.integer)):
                    coeffs.append((int(z), a_z))
                else:
                    row_rhs -= a_z * float(z)
            self.add_ineq(coeffs, row_rhs)

    def validate(self) -> None:
        for t in self.terms + [t for row in self.convex_rows for t in row.terms]:
            if not 0 <= t.index < self.n:
                raise ValueError("term index out of range")
            if t.kind == "log_odds":
                if t.total <= 0:
                    raise ValueError("log_odds term needs a positive total")
                if self.ub[t.index] > t.total + 1e-12:
                    raise ValueError("log_odds variable must be bounded above by its total")
            if t.kind == "entropy" and self.lb[t.index] < 0:
                raise ValueError("entropy variable must be nonnegative")
            if t.kind in ("bpr_total", "bpr_partial"):
                if t.bpr_beta < 1:
                    raise ValueError("bpr beta must be >= 1")
                if t.kind == "bpr_partial" and abs(t.bpr_beta - round(t.bpr_beta)) > 1e-12:
                    raise ValueError("bpr_partial requires an integer exponent")
        for row in self.eq_rows + self.ineq_rows:
            for j, _ in row.coeffs:
                if not 0 <= j < self.n:
                    raise ValueError("constraint index out of range")

    # -- evaluation -------------------------------------------------------

    def objective_value(self, x: np.ndarray, *, skip=None) -> float:
        total = self.constant
        for t in self.terms:
            if skip and t.kind in skip:
                continue
            total += term_value(t, x[t.index])
        return total

    def objective_gradient(self, x: np.ndarray, *, skip=None) -> np.ndarray:
        g = np.zeros(self.n)
        for t in self.terms:
            if skip and t.kind in skip:
                continue
            g[t.index] += term_gradient(t, x[t.index])
        return g

    def dump(self) -> str:
        """Plain-text description for external cross-checking."""
        lines = [f"variables: {self.n}"]
        for name, sl in self.slices.items():
            lines.append(f"  {name}: [{sl.start}, {sl.stop})")
        lines.append("objective terms:")
        for t in self.terms:
            lines.append(f"  {t.kind} x[{t.index}] coeff={t.coeff:g}")
        if self.constant:
            lines.append(f"  constant {self.constant:g}")

        def fmt(row: LinearRow, sense: str) -> str:
            body = " + ".join(f"{c:g}*x[{j}]" for j, c in row.coeffs)
            return f"  {body} {sense} {row.rhs:g}"

        lines.append(f"equalities: {len(self.eq_rows)}")
        lines.extend(fmt(r, "==") for r in self.eq_rows)
        lines.append(f"inequalities: {len(self.ineq_rows)}")
        lines.extend(fmt(r, "<=") for r in self.ineq_rows)
        lines.append(f"convex rows: {len(self.convex_rows)}")
        for row in self.convex_rows:
            body = " + ".join(f"{t.kind}(x[{t.index}])*{t.coeff:g}" for t in row.terms)
            lin = " + ".join(f"{c:g}*x[{j}]" for j, c in row.coeffs)
            lines.append(f"  {body} + {lin} <= {row.rhs:g}")
        return "\n".join(lines)


@dataclass
class ConvexSolution:
    x: np.ndarray
    objective: float
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    convex_duals: np.ndarray
    lb_duals: np.ndarray
    ub_duals: np.ndarray
    status: str  # optimal | max_iter | infeasible
    kkt_residual: float
    program: ConvexProgram

    def value(self, name: str) -> np.ndarray:
        return self.x[self.program.slices[name]]


# ---------------------------------------------------------------------------
# Term evaluation


def _bpr_t(t: ObjectiveTerm, q: float) -> float:
    return t.t0 * (1.0 + t.bpr_alpha * (q / t.capacity) ** t.bpr_beta)


def _bpr_t_prime(t: ObjectiveTerm, q: float) -> float:
    return t.t0 * t.bpr_alpha * t.bpr_beta * (q / t.capacity) ** (t.bpr_beta - 1.0) / t.capacity


def _bpr_t_prime2(t: ObjectiveTerm, q: float) -> float:
    b = t.bpr_beta
    if b == 1.0:
        return 0.0
    return t.t0 * t.bpr_alpha * b * (b - 1.0) * (q / t.capacity) ** (b - 2.0) / t.capacity**2


def term_value(t: ObjectiveTerm, xi: float) -> float:
    if t.kind == "linear":
        return t.coeff * xi
    if t.kind == "entropy":
        x = max(xi, 0.0)
        return t.coeff * (x * math.log(x) if x > 0 else 0.0)
    if t.kind == "log_odds":
        eps = DOMAIN_GUARD_FRACTION * t.total
        x = min(max(xi, eps), t.total - eps)
        return t.coeff * (x * math.log(x) - x * math.log(t.total - x))
    if t.kind == "bpr_total":
        q = t.background + xi
        return t.coeff * q * _bpr_t(t, q)
    if t.kind == "bpr_partial":
        return t.coeff * xi * _bpr_t(t, t.background + xi)
    raise ValueError(t.kind)


def term_hessian(t: ObjectiveTerm, xi: float) -> float:
    if t.kind == "linear":
        return 0.0
    if t.kind == "entropy":
        x = max(xi, 1e-300)
        return t.coeff / x
    if t.kind == "log_odds":
        eps = DOMAIN_GUARD_FRACTION * t.total
        x = min(max(xi, eps), t.total - eps)
        rem = t.total - x
        return t.coeff * (1.0 / x + 1.0 / rem + t.total / rem**2)
    if t.kind == "bpr_total":
        q = t.background + xi
        return t.coeff * (2.0 * _bpr_t_prime(t, q) + q * _bpr_t_prime2(t, q))
    if t.kind == "bpr_partial":
        q = t.background + xi
        return t.coeff * (2.0 * _bpr_t_prime(t, q) + xi * _bpr_t_prime2(t, q))
    raise ValueError(t.kind)


def term_gradient(t: ObjectiveTerm, xi: float) -> float:
    if t.kind == "linear":
        return t.coeff
    if t.kind == "entropy":
        x = max(xi, 1e-300)
        return t.coeff * (math.log(x) + 1.0)
    if t.kind == "log_odds":
        eps = DOMAIN_GUARD_FRACTION * t.total
        x = min(max(xi, eps), t.total - eps)
        return t.coeff * (math.log(x) + 1.0 - math.log(t.total - x) + x / (t.total - x))
    if t.kind == "bpr_total":
        q = t.background + xi
        return t.coeff * (_bpr_t(t, q) + q * _bpr_t_prime(t, q))
    if t.kind == "bpr_partial":
        q = t.background + xi
        return t.coeff * (_bpr_t(t, q) + xi * _bpr_t_prime(t, q))
    raise ValueError(t.kind)


def _term_cvxpy(t: ObjectiveTerm, xi):
    if t.kind == "linear":
        return t.coeff * xi
    if t.kind == "entropy":
        return t.coeff * (-cp.entr(xi))
    if t.kind == "log_odds":
        # x ln x - x ln(a - x) == kl_div(x, a - x) + 2x - a
        return t.coeff * (cp.kl_div(xi, t.total - xi) + 2.0 * xi - t.total)
    if t.kind == "bpr_total":
        # power atom on the capacity-normalized argument; raw q^(beta+1) at
        # q ~ 1e3 overflows the conic scaling and triggers false infeasibility
        q = t.background + xi
        poly = q + t.bpr_alpha * t.capacity * cp.power(q / t.capacity, t.bpr_beta + 1.0)
        return t.coeff * t.t0 * poly
    if t.kind == "bpr_partial":
        # v*(b+v)^beta expanded binomially so every monomial is a convex power
        # of the capacity-normalized v.
        beta = int(round(t.bpr_beta))
        expr = xi
        ratio = t.background / t.capacity
        for k in range(beta + 1):
            coef = t.bpr_alpha * t.capacity * math.comb(beta, k) * ratio ** (beta - k)
            if coef == 0.0:
                continue
            p = k + 1
            v = xi / t.capacity
            expr = expr + coef * (v if p == 1 else cp.power(v, p))
        return t.coeff * t.t0 * expr
    raise ValueError(t.kind)


# ---------------------------------------------------------------------------
# Active-set Newton polish
#
# Conic exp-cone iterates land around 1e-6/1e-7 stationarity; a few Newton
# steps on the active-set KKT system (diagonal Hessians, so this is cheap)
# refine primal and duals to the configured residual tolerance.


def _constraint_row(program, entry, x, a_eq, b_eq, a_in, b_in):
    kind, i = entry
    n = program.n
    if kind == "eq":
        row = np.asarray(a_eq[i].todense()).ravel()
        return row, float(row @ x - b_eq[i])
    if kind == "ineq":
        row = np.asarray(a_in[i].todense()).ravel()
        return row, float(row @ x - b_in[i])
    if kind == "lb":
        row = np.zeros(n)
        row[i] = -1.0
        return row, float(program.lb[i] - x[i])
    if kind == "ub":
        row = np.zeros(n)
        row[i] = 1.0
        return row, float(x[i] - program.ub[i])
    if kind == "cvx":
        crow = program.convex_rows[i]
        row = np.zeros(n)
        val = -crow.rhs
        for t in crow.terms:
            row[t.index] += term_gradient(t, x[t.index])
            val += term_value(t, x[t.index])
        for j, c in crow.coeffs:
            row[j] += c
            val += c * x[j]
        return row, val
    raise ValueError(kind)


def _domain_step_cap(program, x, dx):
    """Largest step fraction keeping log-domain variables strictly interior."""
    cap = 1.0
    for t in program.terms + [t for row in program.convex_rows for t in row.terms]:
        if t.kind == "entropy":
            lo_gap = x[t.index]
            if dx[t.index] < 0 and lo_gap > 0:
                cap = min(cap, 0.9 * lo_gap / -dx[t.index])
        elif t.kind == "log_odds":
            lo_gap = x[t.index]
            hi_gap = t.total - x[t.index]
            if dx[t.index] < 0 and lo_gap > 0:
                cap = min(cap, 0.9 * lo_gap / -dx[t.index])
            if dx[t.index] > 0 and hi_gap > 0:
                cap = min(cap, 0.9 * hi_gap / dx[t.index])
    return max(cap, 0.0)


def _log_domain_indices(program: ConvexProgram) -> set[int]:
    """Variables with a log-barrier-like objective; never pinned to a bound."""
    out = set()
    for t in program.terms + [t for row in program.convex_rows for t in row.terms]:
        if t.kind in ("entropy", "log_odds"):
            out.add(t.index)
    return out


def _polish(
    program: ConvexProgram,
    x0: np.ndarray,
    eq_duals,
    ineq_duals,
    convex_duals,
    lb_duals,
    ub_duals,
    a_eq,
    b_eq,
    a_in,
    b_in,
):
    """Refine (x, duals) with Newton steps on the active-set KKT system.

    The Newton systems are rank-deficient in general (redundant active rows)
    and badly scaled (entropy curvature 1/x), so each step is a minimum-norm
    solve of the Jacobi-equilibrated system. Constraints whose multiplier
    comes out negative are dropped and the refinement is rerun.
    """
    import scipy.linalg as sla

    n = program.n
    scale_x = 1.0 + float(np.max(np.abs(x0))) if n else 1.0
    act_tol = 1e-6 * scale_x
    dual_tol = 1e-8
    log_vars = _log_domain_indices(program)

    entries: list[tuple[str, int]] = [("eq", i) for i in range(a_eq.shape[0])]
    if a_in.shape[0]:
        slack = a_in @ x0 - b_in
        for i in range(a_in.shape[0]):
            if slack[i] >= -act_tol or ineq_duals[i] > dual_tol:
                entries.append(("ineq", i))
    for j in range(n):
        if j in log_vars:
            continue  # interior by construction: the log gradient diverges at the bound
        if math.isfinite(program.lb[j]) and (x0[j] - program.lb[j] <= act_tol or lb_duals[j] > dual_tol):
            entries.append(("lb", j))
        if math.isfinite(program.ub[j]) and (program.ub[j] - x0[j] <= act_tol or ub_duals[j] > dual_tol):
            entries.append(("ub", j))
    for i, crow in enumerate(program.convex_rows):
        val = -crow.rhs + sum(term_value(t, x0[t.index]) for t in crow.terms)
        val += sum(c * x0[j] for j, c in crow.coeffs)
        if val >= -act_tol or convex_duals[i] > dual_tol:
            entries.append(("cvx", i))

    n_eq_base = a_eq.shape[0]
    start_y = {
        "eq": eq_duals,
        "ineq": ineq_duals,
        "lb": lb_duals,
        "ub": ub_duals,
        "cvx": convex_duals,
    }
    for _ in range(12):  # drop wrong-signed actives and retry
        m = len(entries)
        y = np.array([start_y[kind][i] for kind, i in entries])
        x = x0.copy()
        converged = False
        for _ in range(40):
            grad = program.objective_gradient(x)
            h = np.zeros(n)
            for t in program.terms:
                h[t.index] += term_hessian(t, x[t.index])
            rows = np.zeros((m, n))
            cvals = np.zeros(m)
            for k, entry in enumerate(entries):
                rows[k], cvals[k] = _constraint_row(program, entry, x, a_eq, b_eq, a_in, b_in)
                if entry[0] == "cvx":
                    for t in program.convex_rows[entry[1]].terms:
                        h[t.index] += y[k] * term_hessian(t, x[t.index])
            f1 = grad + rows.T @ y
            resid = max(
                float(np.max(np.abs(f1))) if n else 0.0,
                float(np.max(np.abs(cvals))) if m else 0.0,
            )
            grad_scale = 1.0 + float(np.max(np.abs(grad))) if n else 1.0
            if resid <= 1e-12 * grad_scale:
                converged = True
                break
            kkt = np.zeros((n + m, n + m))
            kkt[:n, :n] = np.diag(h)
            kkt[:n, n:] = rows.T
            kkt[n:, :n] = rows
            rhs = np.concatenate([-f1, -cvals])
            d = np.sqrt(np.maximum(np.max(np.abs(kkt), axis=0), 1e-8))
            step = sla.lstsq(
                kkt / d[None, :] / d[:, None], rhs / d, cond=1e-12, lapack_driver="gelsd"
            )[0] / d
            dx, dy = step[:n], step[n:]
            t_cap = _domain_step_cap(program, x, dx)
            if t_cap <= 0:
                break
            x = x + t_cap * dx
            y = y + t_cap * dy
        if not converged:
            return None

        wrong = [k for k in range(n_eq_base, m) if y[k] < -1e-9 * (1.0 + float(np.max(np.abs(y))))]
        if not wrong:
            new_eq = y[:n_eq_base].copy()
            new_in = np.zeros(a_in.shape[0])
            new_lb = np.zeros(n)
            new_ub = np.zeros(n)
            new_cvx = np.zeros(len(program.convex_rows))
            for k in range(n_eq_base, m):
                kind, i = entries[k]
                val = max(y[k], 0.0)
                if kind == "ineq":
                    new_in[i] = val
                elif kind == "lb":
                    new_lb[i] = val
                elif kind == "ub":
                    new_ub[i] = val
                else:
                    new_cvx[i] = val
            return x, new_eq, new_in, new_lb, new_ub, new_cvx
        entries = [e for k, e in enumerate(entries) if k < n_eq_base or k not in wrong]
    return None


# ---------------------------------------------------------------------------
# Continuous solve


def _rows_to_matrix(rows: list[LinearRow], n: int):
    data, ri, ci = [], [], []
    rhs = np.zeros(len(rows))
    for i, row in enumerate(rows):
        rhs[i] = row.rhs
        for j, c in row.coeffs:
            ri.append(i)
            ci.append(j)
            data.append(c)
    a = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
    return a, rhs


def solve_convex(
    program: ConvexProgram,
    tol: float = DEFAULT_TOL,
    max_iter: int = 200,
) -> ConvexSolution:
    """Solve a ConvexProgram; duals and a verified KKT residual on optimal exits."""
    program.validate()
    n = program.n
    x = cp.Variable(n)
    constraints = []
    a_eq, b_eq = _rows_to_matrix(program.eq_rows, n)
    a_in, b_in = _rows_to_matrix(program.ineq_rows, n)
    eq_con = in_con = None
    if a_eq.shape[0]:
        eq_con = a_eq @ x == b_eq
        constraints.append(eq_con)
    if a_in.shape[0]:
        in_con = a_in @ x <= b_in
        constraints.append(in_con)

    lb = np.array(program.lb)
    ub = np.array(program.ub)
    lb_mask = np.isfinite(lb)
    ub_mask = np.isfinite(ub)
    lb_con = ub_con = None
    if lb_mask.any():
        lb_con = x[lb_mask] >= lb[lb_mask]
        constraints.append(lb_con)
    if ub_mask.any():
        ub_con = x[ub_mask] <= ub[ub_mask]
        constraints.append(ub_con)

    cvx_cons = []
    for row in program.convex_rows:
        expr = 0
        for t in row.terms:
            expr = expr + _term_cvxpy(t, x[t.index])
        for j, c in row.coeffs:
            expr = expr + c * x[j]
        con = expr <= row.rhs
        cvx_cons.append(con)
        constraints.append(con)

    obj_expr = 0
    for t in program.terms:
        obj_expr = obj_expr + _term_cvxpy(t, x[t.index])
    problem = cp.Problem(cp.Minimize(obj_expr), constraints)

    try:
        with warnings.catch_warnings():
            # inaccurate conic exits are expected; the Newton polish below
            # brings them to tolerance or the status reflects the failure
            warnings.simplefilter("ignore", UserWarning)
            problem.solve(
                solver=cp.CLARABEL,
                max_iter=max_iter,
                tol_gap_abs=1e-10,
                tol_gap_rel=1e-10,
                tol_feas=1e-10,
            )
    except cp.error.SolverError as exc:  # pragma: no cover - backend failure
        raise SolverError(str(exc)) from exc

    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        empty = np.zeros(0)
        return ConvexSolution(
            x=np.full(n, np.nan),
            objective=math.inf,
            eq_duals=empty,
            ineq_duals=empty,
            convex_duals=empty,
            lb_duals=empty,
            ub_duals=empty,
            status="infeasible",
            kkt_residual=math.inf,
            program=program,
        )
    if problem.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise SolverError("problem is unbounded")
    if x.value is None:  # pragma: no cover
        raise SolverError(f"solver returned no iterate (status {problem.status})")

    xv = np.asarray(x.value, dtype=float).reshape(n)
    # Clip tiny bound violations from the conic backend.
    xv = np.minimum(np.maximum(xv, np.where(lb_mask, lb, -np.inf)), np.where(ub_mask, ub, np.inf))

    def dual_of(con, size: int) -> np.ndarray:
        if con is None or con.dual_value is None:
            return np.zeros(size)
        return np.maximum(np.asarray(con.dual_value, dtype=float).reshape(size), 0.0) if size else np.zeros(0)

    eq_duals = (
        np.asarray(eq_con.dual_value, dtype=float).reshape(a_eq.shape[0])
        if eq_con is not None and eq_con.dual_value is not None
        else np.zeros(a_eq.shape[0])
    )
    ineq_duals = dual_of(in_con, a_in.shape[0])
    lb_duals = np.zeros(n)
    ub_duals = np.zeros(n)
    if lb_con is not None and lb_con.dual_value is not None:
        lb_duals[lb_mask] = np.maximum(np.asarray(lb_con.dual_value, dtype=float).ravel(), 0.0)
    if ub_con is not None and ub_con.dual_value is not None:
        ub_duals[ub_mask] = np.maximum(np.asarray(ub_con.dual_value, dtype=float).ravel(), 0.0)
    convex_duals = np.array(
        [max(float(c.dual_value), 0.0) if c.dual_value is not None else 0.0 for c in cvx_cons]
    )

    residual = kkt_residual(
        program, xv, eq_duals, ineq_duals, convex_duals, lb_duals, ub_duals, a_eq, b_eq, a_in, b_in
    )
    if residual > tol:
        polished = _polish(
            program, xv, eq_duals, ineq_duals, convex_duals, lb_duals, ub_duals, a_eq, b_eq, a_in, b_in
        )
        if polished is not None:
            px, p_eq, p_in, p_lb, p_ub, p_cvx = polished
            p_res = kkt_residual(
                program, px, p_eq, p_in, p_cvx, p_lb, p_ub, a_eq, b_eq, a_in, b_in
            )
            if p_res < residual:
                xv, eq_duals, ineq_duals, lb_duals, ub_duals, convex_duals = (
                    px, p_eq, p_in, p_lb, p_ub, p_cvx
                )
                residual = p_res

    objective = program.objective_value(xv)
    # the verified residual is authoritative: the polish routinely rescues
    # "inaccurate" conic exits
    status = "optimal" if residual <= tol else "max_iter"
    return ConvexSolution(
        x=xv,
        objective=objective,
        eq_duals=eq_duals,
        ineq_duals=ineq_duals,
        convex_duals=convex_duals,
        lb_duals=lb_duals,
        ub_duals=ub_duals,
        status=status,
        kkt_residual=residual,
        program=program,
    )


def kkt_residual(
    program: ConvexProgram,
    x: np.ndarray,
    eq_duals: np.ndarray,
    ineq_duals: np.ndarray,
    convex_duals: np.ndarray,
    lb_duals: np.ndarray,
    ub_duals: np.ndarray,
    a_eq,
    b_eq,
    a_in,
    b_in,
) -> float:
    """Scaled max of stationarity, feasibility, and complementary-slackness residuals."""
    scale_x = 1.0 + float(np.max(np.abs(x))) if x.size else 1.0

    feas = 0.0
    if a_eq.shape[0]:
        feas = max(feas, float(np.max(np.abs(a_eq @ x - b_eq))) / scale_x)
    slack_in = None
    if a_in.shape[0]:
        slack_in = a_in @ x - b_in
        feas = max(feas, float(np.max(slack_in)) / scale_x)

    grad = program.objective_gradient(x)
    if a_eq.shape[0]:
        grad = grad + a_eq.T @ eq_duals
    if a_in.shape[0]:
        grad = grad + a_in.T @ ineq_duals
    grad = grad - lb_duals + ub_duals
    comp = 0.0
    for rho, row in zip(convex_duals, program.convex_rows):
        g_val = -row.rhs
        for t in row.terms:
            g_val += term_value(t, x[t.index])
            grad[t.index] += rho * term_gradient(t, x[t.index])
        for j, c in row.coeffs:
            g_val += c * x[j]
            grad[j] += rho * c
        feas = max(feas, g_val / scale_x)
        comp = max(comp, abs(rho * g_val))

    grad_scale = 1.0 + float(np.max(np.abs(program.objective_gradient(x)))) if x.size else 1.0
    stat = float(np.max(np.abs(grad))) / grad_scale if x.size else 0.0

    if slack_in is not None and slack_in.size:
        comp = max(comp, float(np.max(np.abs(ineq_duals * slack_in))))
    lb_arr = np.array(program.lb)
    ub_arr = np.array(program.ub)
    with np.errstate(invalid="ignore"):
        lb_slack = np.where(np.isfinite(lb_arr), x - lb_arr, 0.0)
        ub_slack = np.where(np.isfinite(ub_arr), ub_arr - x, 0.0)
    comp = max(comp, float(np.max(np.abs(lb_duals * lb_slack))) if x.size else 0.0)
    comp = max(comp, float(np.max(np.abs(ub_duals * ub_slack))) if x.size else 0.0)
    comp = comp / (grad_scale * scale_x)

    return max(feas, stat, comp)


# ---------------------------------------------------------------------------
# Binary machinery


@dataclass(frozen=True)
class BinaryAssignment:
    """One-hot frequency-level selection per line."""

    choices: tuple[int, ...]  # chosen level index per line
    n_levels: int

    def z(self, line: int, level: int) -> float:
        return 1.0 if self.choices[line] == level else 0.0

    def matrix(self) -> np.ndarray:
        m = np.zeros((len(self.choices), self.n_levels))
        for l, s in enumerate(self.choices):
            m[l, s] = 1.0
        return m


def enumerate_binaries(lines: int, levels: int, cap: int = ENUMERATION_CAP):
    """All one-hot assignments in lexicographic order of level-index tuples."""
    if levels**lines > cap:
        raise EnumerationCapError(
            f"{levels}**{lines} assignments exceed the cap ({cap}); use branch_and_bound"
        )
    for choices in itertools.product(range(levels), repeat=lines):
        yield BinaryAssignment(choices=choices, n_levels=levels)


def big_m_envelope(alpha: float) -> list[tuple[float, float, float, float]]:
    """Four rows (a_w, a_x, a_z, rhs) meaning a_w*w + a_x*x + a_z*z <= rhs.

    They force w = x*z for binary z and x in [0, alpha].
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return [
        (1.0, -1.0, 0.0, 0.0),  # w <= x
        (1.0, 0.0, -alpha, 0.0),  # w <= alpha*z
        (-1.0, 1.0, alpha, alpha),  # w >= x - alpha*(1-z)
        (-1.0, 0.0, 0.0, 0.0),  # w >= 0
    ]


def envelope_interval(x: float, z: float, alpha: float) -> tuple[float, float]:
    """Feasible interval for w under the envelope rows at given (x, z)."""
    hi = min(x, alpha * z)
    lo = max(0.0, x - alpha * (1.0 - z))
    return lo, hi


@dataclass
class BnbResult:
    assignment: BinaryAssignment
    solution: ConvexSolution
    gap: float
    nodes: int


def branch_and_bound(
    builder,
    lines: int,
    levels: int,
    mip_gap: float = 0.01,
    tol: float = DEFAULT_TOL,
) -> BnbResult:
    """Best-bound branch and bound over one-hot selections (minimization).

    builder(z_lo, z_hi) must return (ConvexProgram, z_indices) where z_lo/z_hi
    are (lines, levels) bound arrays and z_indices maps (l, s) to the flat
    variable index of the relaxed binary.
    """
    z_lo = np.zeros((lines, levels))
    z_hi = np.ones((lines, levels))
    root_program, _ = builder(z_lo, z_hi)
    del root_program

    counter = itertools.count()
    heap: list[tuple[float, int, np.ndarray, np.ndarray]] = []

    def solve_node(lo, hi):
        program, z_idx = builder(lo, hi)
        sol = solve_convex(program, tol=tol)
        return sol, z_idx

    incumbent: tuple[BinaryAssignment, ConvexSolution] | None = None
    incumbent_obj = math.inf
    nodes = 0

    sol, z_idx = solve_node(z_lo, z_hi)
    nodes += 1
    if sol.status == "infeasible":
        raise SolverError("root relaxation infeasible")
    heapq.heappush(heap, (sol.objective, next(counter), z_lo, z_hi, sol, z_idx))

    best_bound = sol.objective
    proved = False
    while heap:
        bound, _, lo, hi, sol, z_idx = heapq.heappop(heap)
        best_bound = bound
        if incumbent_obj < math.inf and bound >= incumbent_obj - mip_gap * max(abs(incumbent_obj), 1e-12):
            break
        z_val = np.array([[sol.x[z_idx[l][s]] for s in range(levels)] for l in range(lines)])
        frac = np.abs(z_val - np.round(z_val))
        if frac.max() <= 1e-6:
            choices = tuple(int(np.argmax(z_val[l])) for l in range(lines))
            if sol.objective < incumbent_obj:
                incumbent_obj = sol.objective
                incumbent = (BinaryAssignment(choices=choices, n_levels=levels), sol)
            continue
        # branch on the most fractional entry; lowest (line, level) on ties
        l_star, s_star = min(
            ((l, s) for l in range(lines) for s in range(levels)),
            key=lambda ls: (-frac[ls[0], ls[1]], ls[0], ls[1]),
        )
        for fix in (0.0, 1.0):
            c_lo, c_hi = lo.copy(), hi.copy()
            c_lo[l_star, s_star] = fix
            c_hi[l_star, s_star] = fix
            if fix == 1.0:
                # one-hot: siblings of the fixed level are forced off
                for s in range(levels):
                    if s != s_star:
                        c_hi[l_star, s] = 0.0
            child_sol, child_idx = solve_node(c_lo, c_hi)
            nodes += 1
            if child_sol.status == "infeasible":
                continue
            if child_sol.objective < incumbent_obj - 1e-12 or incumbent is None:
                heapq.heappush(
                    heap, (child_sol.objective, next(counter), c_lo, c_hi, child_sol, child_idx)
                )

    else:
        proved = True  # heap exhausted: every open node was pruned or fathomed

    if incumbent is None:
        raise SolverError("branch and bound found no integral incumbent")
    if proved:
        gap = 0.0
    else:
        gap = max(0.0, (incumbent_obj - best_bound) / max(abs(incumbent_obj), 1e-12))
    return BnbResult(assignment=incumbent[0], solution=incumbent[1], gap=gap, nodes=nodes)
