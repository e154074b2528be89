import numpy as np
import pytest

from conftest import micro_scenario
from modalpay.amod import (
    AmodBestResponseProblem,
    AmodOracleResult,
    fixed_pt_utilities,
    sca_solve,
)
from modalpay.payment import (
    BaselineReport,
    PaymentError,
    compute_payment,
    evaluate_operator_utilities,
    joint_br_baseline,
    min_cost_rebalancing,
    snap_frequencies,
    static_baseline,
)
from modalpay.pt import PtOracleResult, fixed_amod_utilities, solve_pt_oracle
from modalpay.target import solve_target


@pytest.fixture(scope="module")
def micro_pipeline():
    s = micro_scenario(demand_fwd=60.0, demand_rev=60.0)
    z = solve_target(s)
    amod = sca_solve(
        AmodBestResponseProblem(scenario=s, v_pt=fixed_pt_utilities(s, z.frequencies))
    )
    pt = solve_pt_oracle(s, fixed_amod_utilities(s, z.t_amod, z.prices))
    return s, z, amod, pt


def _fake_amod(lower, upper, fingerprint=""):
    return AmodOracleResult(
        upper_bound=upper, lower_bound=lower, gap=0.0, gap_is_absolute=False,
        incumbent=None, prices={}, iterations=[], status="converged",
        scenario_fingerprint=fingerprint,
    )


def _fake_pt(lower, upper, fingerprint=""):
    repaired = None if lower == upper else ((), {}, lower)
    return PtOracleResult(
        frequencies=(), assignment=None, relaxed_flow={}, relaxed_objective=upper,
        exact=lower == upper, max_violation=0.0, logit_flow={}, repaired=repaired,
        gap=0.0, gap_is_absolute=False, shed_demand={},
        scenario_fingerprint=fingerprint,
    )


class TestComputePayment:
    def test_additivity_and_bracket(self, micro_pipeline):
        s, z, amod, pt = micro_pipeline
        rep = compute_payment(z, amod, pt, s)
        assert rep.k_raw == pytest.approx(rep.delta_amod + rep.delta_pt, rel=1e-12)
        assert rep.k_total == pytest.approx(
            rep.transfers["amod"] + rep.transfers["pt"], rel=1e-12
        )
        assert rep.k_lower <= rep.k_raw + 1e-9 <= rep.k_upper + 1e-6

    def test_deviation_values_from_oracles(self, micro_pipeline):
        s, z, amod, pt = micro_pipeline
        rep = compute_payment(z, amod, pt, s)
        u_a, u_pt = evaluate_operator_utilities(z, s)
        assert rep.delta_amod == pytest.approx(amod.lower_bound - u_a, rel=1e-9)
        assert rep.delta_pt == pytest.approx(pt.lower_objective - u_pt, rel=1e-9)

    def test_fingerprint_mismatch_rejected(self, micro_pipeline):
        s, z, _, pt = micro_pipeline
        bad = _fake_amod(0.0, 1.0, fingerprint="deadbeefdeadbeef")
        with pytest.raises(PaymentError):
            compute_payment(z, bad, pt, s)

    def test_negative_delta_clipped_in_headline(self, micro_pipeline):
        s, z, _, _ = micro_pipeline
        u_a, u_pt = evaluate_operator_utilities(z, s)
        amod = _fake_amod(u_a - 5.0, u_a - 4.0)
        pt = _fake_pt(u_pt + 2.0, u_pt + 3.0)
        rep = compute_payment(z, amod, pt, s)
        assert rep.delta_amod == pytest.approx(-5.0)
        assert rep.delta_pt == pytest.approx(2.0)
        assert rep.clipped
        assert rep.k_total == pytest.approx(2.0)  # floored amod + positive pt
        assert rep.k_raw == pytest.approx(-3.0)
        assert rep.transfers == {"amod": 0.0, "pt": pytest.approx(2.0)}

    def test_json_serializable(self, micro_pipeline):
        import json

        s, z, amod, pt = micro_pipeline
        rep = compute_payment(z, amod, pt, s)
        parsed = json.loads(rep.to_json())
        assert parsed["k_total"] == pytest.approx(rep.k_total)


class TestOperatorUtilities:
    def test_manual_recomputation(self, micro_pipeline):
        s, z, _, _ = micro_pipeline
        u_a, u_pt = evaluate_operator_utilities(z, s)
        rev = sum(z.prices[od] * z.mode_split[od].x_amod for od in s.od_pairs)
        cost = sum(
            e.operating_cost * f for e, f in zip(s.road.edges, z.edge_flows)
        )
        assert u_a == pytest.approx(rev - cost, rel=1e-12)
        value = s.transit.fare + s.calibration.omega
        pt_rev = value * sum(z.mode_split[od].x_pt for od in s.od_pairs)
        pt_cost = sum(
            ln.operating_cost * f for ln, f in zip(s.transit.lines, z.frequencies)
        )
        assert u_pt == pytest.approx(pt_rev - pt_cost, rel=1e-12)


class TestRebalancing:
    def test_min_cost_rebalancing_restores_balance(self):
        s = micro_scenario()
        pax = np.array([25.0, 0.0])  # loaded flow 0 -> 1
        net = {0: 25.0, 1: -25.0}  # origin needs vehicles back
        r = min_cost_rebalancing(s, pax, net)
        assert r[1] == pytest.approx(25.0, abs=1e-5)  # reverse edge carries them
        assert r[0] == pytest.approx(0.0, abs=1e-5)

    def test_zero_imbalance_zero_flow(self):
        s = micro_scenario()
        r = min_cost_rebalancing(s, np.zeros(2), {0: 0.0, 1: 0.0})
        assert np.allclose(r, 0.0, atol=1e-6)


class TestBaselines:
    def test_joint_br_not_below_target(self, micro_pipeline):
        s, z, amod, pt = micro_pipeline
        jb = joint_br_baseline(z, amod, pt, s)
        assert jb >= z.social_cost - 1e-6 * abs(z.social_cost)

    def test_static_not_below_target(self, micro_pipeline):
        s, z, _, _ = micro_pipeline
        legacy = tuple(min(s.transit.frequency_levels) for _ in s.transit.lines)
        st = static_baseline(legacy, s)
        assert st >= z.social_cost - 1e-6 * abs(z.social_cost)

    def test_report_excess_fields(self):
        rep = BaselineReport(
            target_social_cost=100.0, joint_br_social_cost=110.0,
            static_social_cost=120.0,
        )
        assert rep.joint_br_excess == pytest.approx(0.10)
        assert rep.static_excess == pytest.approx(0.20)


class TestSnapFrequencies:
    def test_nearest_level(self):
        levels = (2.0, 3.0, 4.0, 5.0, 6.0, 12.0, 20.0)
        assert snap_frequencies((3.4, 11.0, 25.0), levels) == (3.0, 12.0, 20.0)

    def test_tie_takes_lower_level(self):
        assert snap_frequencies((2.5,), (2.0, 3.0)) == (2.0,)
