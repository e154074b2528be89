"""Coordination-payment synthesis for multimodal AMoD/transit networks.

Computes a socially optimal joint operating profile for an on-demand fleet
operator and a fixed-line transit operator, certifies each operator's best
unilateral deviation value around that profile, and synthesizes the minimum
transfer payment that makes the profile deviation-proof.
"""

from modalpay.amod import AmodBestResponseProblem, AmodOracleResult, sca_solve
from modalpay.network import (
    CalibrationParams,
    DemandTable,
    MultimodalScenario,
    PathSets,
    RoadEdge,
    RoadNetwork,
    TransitLine,
    TransitNetwork,
    bpr_time,
    generate_grid_scenario,
    load_scenario,
    save_scenario,
    validate_scenario,
)
from modalpay.payment import (
    BaselineReport,
    PaymentReport,
    compute_payment,
    joint_br_baseline,
    static_baseline,
)
from modalpay.pt import PtOracleResult, solve_pt_oracle
from modalpay.target import TargetProfile, solve_target

__all__ = [
    "AmodBestResponseProblem",
    "AmodOracleResult",
    "BaselineReport",
    "CalibrationParams",
    "DemandTable",
    "MultimodalScenario",
    "PathSets",
    "PaymentReport",
    "PtOracleResult",
    "RoadEdge",
    "RoadNetwork",
    "TargetProfile",
    "TransitLine",
    "TransitNetwork",
    "bpr_time",
    "compute_payment",
    "generate_grid_scenario",
    "joint_br_baseline",
    "load_scenario",
    "save_scenario",
    "sca_solve",
    "solve_pt_oracle",
    "solve_target",
    "static_baseline",
    "validate_scenario",
]
