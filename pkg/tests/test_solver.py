import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalpay.solver import (
    BinaryAssignment,
    ConvexProgram,
    ConvexRow,
    EnumerationCapError,
    ObjectiveTerm,
    big_m_envelope,
    branch_and_bound,
    enumerate_binaries,
    envelope_interval,
    kkt_residual,
    solve_convex,
    term_gradient,
    term_hessian,
    term_value,
)

BPR = dict(t0=0.05, bpr_alpha=0.15, bpr_beta=4.0, capacity=700.0, background=210.0)


def _terms():
    return [
        ObjectiveTerm(kind="linear", index=0, coeff=2.5),
        ObjectiveTerm(kind="entropy", index=0, coeff=1.7),
        ObjectiveTerm(kind="log_odds", index=0, coeff=1.0, total=80.0),
        ObjectiveTerm(kind="bpr_total", index=0, coeff=30.0, **BPR),
        ObjectiveTerm(kind="bpr_partial", index=0, coeff=30.0, **BPR),
    ]


class TestTermCalculus:
    def test_bpr_total_value(self):
        t = ObjectiveTerm(kind="bpr_total", index=0, coeff=2.0, **BPR)
        q = BPR["background"] + 100.0
        expected = 2.0 * q * BPR["t0"] * (1 + 0.15 * (q / 700.0) ** 4)
        assert term_value(t, 100.0) == pytest.approx(expected, rel=1e-12)

    def test_bpr_partial_value(self):
        t = ObjectiveTerm(kind="bpr_partial", index=0, coeff=2.0, **BPR)
        q = BPR["background"] + 100.0
        expected = 2.0 * 100.0 * BPR["t0"] * (1 + 0.15 * (q / 700.0) ** 4)
        assert term_value(t, 100.0) == pytest.approx(expected, rel=1e-12)

    def test_entropy_value(self):
        t = ObjectiveTerm(kind="entropy", index=0, coeff=3.0)
        assert term_value(t, 2.0) == pytest.approx(3.0 * 2.0 * math.log(2.0))
        assert term_value(t, 0.0) == 0.0

    def test_log_odds_value(self):
        t = ObjectiveTerm(kind="log_odds", index=0, total=10.0)
        x = 4.0
        assert term_value(t, x) == pytest.approx(x * math.log(x / 6.0))

    @given(st.floats(min_value=1.0, max_value=70.0), st.sampled_from(range(5)))
    @settings(max_examples=60, deadline=None)
    def test_gradient_matches_finite_difference(self, x, ti):
        t = _terms()[ti]
        h = 1e-6 * max(abs(x), 1.0)
        fd = (term_value(t, x + h) - term_value(t, x - h)) / (2 * h)
        assert term_gradient(t, x) == pytest.approx(fd, rel=1e-4, abs=1e-6)

    @given(st.floats(min_value=1.0, max_value=70.0), st.sampled_from(range(5)))
    @settings(max_examples=60, deadline=None)
    def test_hessian_matches_finite_difference(self, x, ti):
        t = _terms()[ti]
        h = 1e-4 * max(abs(x), 1.0)
        fd = (term_gradient(t, x + h) - term_gradient(t, x - h)) / (2 * h)
        assert term_hessian(t, x) == pytest.approx(fd, rel=1e-3, abs=1e-6)

    @given(
        st.floats(min_value=0.5, max_value=79.0),
        st.floats(min_value=0.5, max_value=79.0),
        st.floats(min_value=0.0, max_value=1.0),
        st.sampled_from(range(5)),
    )
    @settings(max_examples=80, deadline=None)
    def test_convexity_along_segments(self, x1, x2, lam, ti):
        t = _terms()[ti]
        xm = lam * x1 + (1 - lam) * x2
        chord = lam * term_value(t, x1) + (1 - lam) * term_value(t, x2)
        assert term_value(t, xm) <= chord + 1e-8 * max(1.0, abs(chord))


class TestConvexProgram:
    def test_variable_layout(self):
        p = ConvexProgram()
        a = p.add_variable("a", 3)
        b = p.add_variable("b", 2, lb=-1.0, ub=5.0)
        assert (a.start, a.stop) == (0, 3)
        assert (b.start, b.stop) == (3, 5)
        assert p.index("b", 1) == 4
        with pytest.raises(IndexError):
            p.index("a", 3)
        with pytest.raises(ValueError):
            p.add_variable("a", 1)

    def test_objective_value_and_gradient(self):
        p = ConvexProgram()
        p.add_variable("x", 2)
        p.add_term(ObjectiveTerm(kind="linear", index=0, coeff=2.0))
        p.add_term(ObjectiveTerm(kind="entropy", index=1, coeff=1.0))
        p.constant = 7.0
        x = np.array([3.0, 2.0])
        assert p.objective_value(x) == pytest.approx(6.0 + 2.0 * math.log(2.0) + 7.0)
        assert p.objective_value(x, skip={"entropy"}) == pytest.approx(13.0)
        grad = p.objective_gradient(x)
        assert grad[0] == pytest.approx(2.0)
        assert grad[1] == pytest.approx(math.log(2.0) + 1.0)


class TestSolveConvex:
    def test_uniform_entropy_optimum(self):
        # min sum x ln x over the simplex -> uniform, objective -ln n
        n = 4
        p = ConvexProgram()
        x = p.add_variable("x", n)
        p.add_eq([(i, 1.0) for i in range(n)], 1.0)
        for i in range(n):
            p.add_term(ObjectiveTerm(kind="entropy", index=i))
        sol = solve_convex(p)
        assert sol.status == "optimal"
        assert sol.value("x") == pytest.approx(np.full(n, 0.25), abs=1e-7)
        assert sol.objective == pytest.approx(-math.log(n), abs=1e-8)

    def test_softmax_optimum(self):
        # min sum x ln x + c.x over the simplex -> softmax(-c)
        c = np.array([0.3, -1.2, 2.0])
        p = ConvexProgram()
        p.add_variable("x", 3)
        p.add_eq([(i, 1.0) for i in range(3)], 1.0)
        for i in range(3):
            p.add_term(ObjectiveTerm(kind="entropy", index=i))
            p.add_term(ObjectiveTerm(kind="linear", index=i, coeff=float(c[i])))
        sol = solve_convex(p)
        expected = np.exp(-c) / np.exp(-c).sum()
        assert sol.value("x") == pytest.approx(expected, abs=1e-7)

    def test_bpr_partial_scalar_optimum(self):
        # min vot * x T(b+x) - g x on x >= 0; oracle: dense scan + golden refine
        from scipy.optimize import minimize_scalar

        t = ObjectiveTerm(kind="bpr_partial", index=0, coeff=30.0, **BPR)
        gain = 8.0
        p = ConvexProgram()
        p.add_variable("x", 1, ub=5000.0)
        p.add_term(t)
        p.add_term(ObjectiveTerm(kind="linear", index=0, coeff=-gain))
        sol = solve_convex(p)
        oracle = minimize_scalar(
            lambda v: term_value(t, v) - gain * v, bounds=(0.0, 5000.0), method="bounded",
            options={"xatol": 1e-10},
        )
        assert sol.status == "optimal"
        assert sol.value("x")[0] == pytest.approx(oracle.x, rel=1e-5, abs=1e-5)
        assert sol.objective == pytest.approx(oracle.fun, rel=1e-7, abs=1e-7)

    def test_infeasible_detected(self):
        p = ConvexProgram()
        p.add_variable("x", 1, ub=1.0)
        p.add_eq([(0, 1.0)], 5.0)
        sol = solve_convex(p)
        assert sol.status == "infeasible"

    def test_kkt_residual_at_optimum(self):
        p = ConvexProgram()
        p.add_variable("x", 3)
        p.add_eq([(i, 1.0) for i in range(3)], 1.0)
        for i in range(3):
            p.add_term(ObjectiveTerm(kind="entropy", index=i))
        sol = solve_convex(p)
        assert sol.kkt_residual <= 1e-7

    def test_convex_row_binding(self):
        # min -x subject to log_odds(x) + c*x <= 0 binds the choice inequality:
        # optimum satisfies ln(x/(a-x)) = -c  =>  x = a*logistic(-c)
        alpha, c = 10.0, 0.8
        p = ConvexProgram()
        p.add_variable("x", 1, ub=alpha)
        p.add_term(ObjectiveTerm(kind="linear", index=0, coeff=-1.0))
        p.add_convex_row(
            ConvexRow(
                terms=[ObjectiveTerm(kind="log_odds", index=0, total=alpha)],
                coeffs=[(0, c)],
                rhs=0.0,
            )
        )
        sol = solve_convex(p)
        assert sol.status == "optimal"
        # feasible set is {x: ln(x/(a-x)) <= -c}, so the max is a*logistic(-c)
        expected = alpha / (1.0 + math.exp(c))
        assert sol.value("x")[0] == pytest.approx(expected, rel=1e-6)


class TestEnvelopes:
    def test_big_m_rows_force_product_at_binary_z(self):
        alpha = 50.0
        for z in (0.0, 1.0):
            for x in (0.0, 12.5, 50.0):
                lo, hi = envelope_interval(x, z, alpha)
                assert lo == pytest.approx(x * z, abs=1e-12)
                assert hi == pytest.approx(x * z, abs=1e-12)

    def test_interval_slack_at_fractional_z(self):
        lo, hi = envelope_interval(10.0, 0.5, 50.0)
        assert lo <= 10.0 * 0.5 <= hi
        assert hi - lo > 0

    def test_row_count_and_alpha_guard(self):
        assert len(big_m_envelope(1.0)) == 4
        with pytest.raises(ValueError):
            big_m_envelope(0.0)

    def test_add_envelope_constant_z(self):
        p = ConvexProgram()
        p.add_variable("w", 1)
        p.add_variable("x", 1)
        p.add_envelope(0, 1, 1.0, 5.0)
        assert len(p.ineq_rows) == 4

    @given(
        st.floats(min_value=0.0, max_value=20.0),
        st.sampled_from([0.0, 1.0]),
    )
    @settings(max_examples=50, deadline=None)
    def test_envelope_exactness_sampled(self, x, z):
        alpha = 20.0
        lo, hi = envelope_interval(x, z, alpha)
        assert lo == pytest.approx(x * z, abs=1e-9)
        assert hi == pytest.approx(x * z, abs=1e-9)


class TestEnumeration:
    def test_counts(self):
        assert len(list(enumerate_binaries(3, 4))) == 64

    def test_lexicographic_order(self):
        out = [a.choices for a in enumerate_binaries(2, 2)]
        assert out == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_cap(self):
        with pytest.raises(EnumerationCapError):
            list(enumerate_binaries(30, 7))

    def test_one_hot_matrix(self):
        a = BinaryAssignment(choices=(2, 0), n_levels=3)
        m = a.matrix()
        assert m.sum(axis=1) == pytest.approx(np.ones(2))
        assert a.z(0, 2) == 1.0 and a.z(0, 1) == 0.0


class TestBranchAndBound:
    @staticmethod
    def _selection_problem(costs):
        """min sum_l q(level_l) with q from per-(line,level) costs; brute-forceable."""
        lines, levels = costs.shape

        def builder(z_lo, z_hi):
            p = ConvexProgram()
            z = p.add_variable("z", lines * levels, lb=0.0, ub=1.0)
            z_idx = [[z.start + l * levels + s for s in range(levels)] for l in range(lines)]
            for l in range(lines):
                for s in range(levels):
                    p.set_bounds(z_idx[l][s], float(z_lo[l, s]), float(z_hi[l, s]))
                    p.add_term(
                        ObjectiveTerm(kind="linear", index=z_idx[l][s], coeff=float(costs[l, s]))
                    )
                    # strictly convex piece so the relaxation prefers fractional z
                    p.add_term(ObjectiveTerm(kind="entropy", index=z_idx[l][s], coeff=0.1))
                p.add_eq([(z_idx[l][s], 1.0) for s in range(levels)], 1.0)
            return p, z_idx

        return builder

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        costs = rng.uniform(-2.0, 2.0, size=(2, 3))
        builder = self._selection_problem(costs)
        res = branch_and_bound(builder, 2, 3, mip_gap=1e-9)
        # brute force over the 9 assignments using the same node program
        best = None
        for a in enumerate_binaries(2, 3):
            lo = np.zeros((2, 3))
            hi = np.zeros((2, 3))
            for l, s in enumerate(a.choices):
                lo[l, s] = hi[l, s] = 1.0
            p, _ = builder(lo, hi)
            sol = solve_convex(p)
            if best is None or sol.objective < best[1]:
                best = (a.choices, sol.objective)
        assert res.assignment.choices == best[0]
        assert res.solution.objective == pytest.approx(best[1], abs=1e-6)

    def test_exhausted_heap_proves_optimality(self):
        costs = np.array([[0.0, 1.0], [1.0, 0.0]])
        res = branch_and_bound(self._selection_problem(costs), 2, 2, mip_gap=1e-9)
        assert res.gap == 0.0
