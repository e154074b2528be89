"""Command-line entry point for the regulation pipeline.

Subcommands: gen, target, amod-br, pt-br, payment, exactness-grid, baselines.
Config comes from an optional JSON file (--config) merged with flags; flags
win. All artifacts are written atomically (temp file + rename) and only on
success; every command exits nonzero on failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from modalpay.amod import (
    AmodBestResponseProblem,
    AmodOracleResult,
    fixed_pt_utilities,
    sca_solve,
)
from modalpay.choice import ModeSplit
from modalpay.network import (
    MultimodalScenario,
    generate_grid_scenario,
    load_scenario,
    save_scenario,
    scenario_from_json,
    scenario_to_json,
    with_background_level,
    with_line_params,
)
from modalpay.payment import (
    BaselineReport,
    PaymentReport,
    compute_payment,
    joint_br_baseline,
    static_baseline,
)
from modalpay.pt import PtOracleResult, fixed_amod_utilities, solve_pt_oracle
from modalpay.solver import BinaryAssignment
from modalpay.target import TargetProfile, solve_target, unregularized_gap


@dataclass
class RunConfig:
    """Everything a run needs beyond the scenario itself."""

    rows: int = 4
    cols: int = 4
    lines: int = 2
    od: int = 10
    bl: float = 0.5
    seed: int = 0
    theta: float | None = None  # None -> scenario calibration value
    mip_gap: float = 0.01
    eps_f: float = 1e-4
    eps_r: float = 1e-4
    eps_obj: float = 1e-3
    max_iter: int = 50
    jobs: int = 1
    legacy_frequencies: list[float] = field(default_factory=list)
    bl_grid: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9, 1.1])
    cap_grid: list[float] = field(default_factory=lambda: [900.0])
    cost_grid: list[float] = field(default_factory=lambda: [320.0])
    sweep: str | None = None  # e.g. "bl=0.1:1.1:0.2" or "theta=0.1,0.5,2,10"

    def validate(self) -> None:
        for name in ("mip_gap", "eps_f", "eps_r", "eps_obj"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("bl_grid", "cap_grid", "cost_grid"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        for key, val in data.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key: {key}")
            setattr(cfg, key, val)
    for key in vars(cfg):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    return cfg


# -- artifact I/O ---------------------------------------------------------


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _od_key(od: tuple[int, int]) -> str:
    return f"{od[0]},{od[1]}"


def _od_from_key(key: str) -> tuple[int, int]:
    a, b = key.split(",")
    return int(a), int(b)


def profile_to_dict(z: TargetProfile) -> dict:
    return {
        "assignment": list(z.assignment.choices),
        "n_levels": z.assignment.n_levels,
        "frequencies": list(z.frequencies),
        "prices": {_od_key(od): v for od, v in z.prices.items()},
        "mode_split": {
            _od_key(od): [ms.x_amod, ms.x_pt, ms.total] for od, ms in z.mode_split.items()
        },
        "path_flows": {_od_key(od): list(fl) for od, fl in z.path_flows.items()},
        "edge_flows": list(z.edge_flows),
        "rebalancing": list(z.rebalancing),
        "t_amod": {_od_key(od): v for od, v in z.t_amod.items()},
        "t_pt": {_od_key(od): v for od, v in z.t_pt.items()},
        "social_cost": z.social_cost,
        "regularized_objective": z.regularized_objective,
        "decomposition": dict(z.decomposition),
        "clip_magnitude": z.clip_magnitude,
        "theta": z.theta,
        "scenario_fingerprint": z.scenario_fingerprint,
    }


def profile_from_dict(d: dict) -> TargetProfile:
    return TargetProfile(
        assignment=BinaryAssignment(
            choices=tuple(d["assignment"]), n_levels=d["n_levels"]
        ),
        frequencies=tuple(d["frequencies"]),
        prices={_od_from_key(k): v for k, v in d["prices"].items()},
        mode_split={
            _od_from_key(k): ModeSplit(x_amod=v[0], x_pt=v[1], total=v[2])
            for k, v in d["mode_split"].items()
        },
        path_flows={_od_from_key(k): tuple(v) for k, v in d["path_flows"].items()},
        edge_flows=tuple(d["edge_flows"]),
        rebalancing=tuple(d["rebalancing"]),
        t_amod={_od_from_key(k): v for k, v in d["t_amod"].items()},
        t_pt={_od_from_key(k): v for k, v in d["t_pt"].items()},
        social_cost=d["social_cost"],
        regularized_objective=d["regularized_objective"],
        decomposition=dict(d["decomposition"]),
        clip_magnitude=d["clip_magnitude"],
        theta=d["theta"],
        scenario_fingerprint=d["scenario_fingerprint"],
    )


def amod_result_to_dict(res: AmodOracleResult) -> dict:
    return {
        "upper_bound": res.upper_bound,
        "lower_bound": res.lower_bound,
        "gap": res.gap,
        "gap_is_absolute": bool(res.gap_is_absolute),
        "status": res.status,
        "n_iterations": len(res.iterations),
        "prices": {_od_key(od): v for od, v in res.prices.items()},
        "scenario_fingerprint": res.scenario_fingerprint,
    }


def pt_result_to_dict(res: PtOracleResult) -> dict:
    out = {
        "frequencies": list(res.frequencies),
        "relaxed_objective": res.relaxed_objective,
        "lower_objective": res.lower_objective,
        "exact": bool(res.exact),
        "max_violation": res.max_violation,
        "gap": res.gap,
        "gap_is_absolute": bool(res.gap_is_absolute),
        "relaxed_flow": {_od_key(od): v for od, v in res.relaxed_flow.items()},
        "logit_flow": {_od_key(od): v for od, v in res.logit_flow.items()},
        "shed_demand": {_od_key(od): v for od, v in res.shed_demand.items()},
        "scenario_fingerprint": res.scenario_fingerprint,
    }
    if res.repaired is not None:
        out["repaired_frequencies"] = list(res.repaired[0])
        out["repaired_objective"] = res.repaired[2]
    return out


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- pipeline stages ------------------------------------------------------


def get_scenario(args: argparse.Namespace, cfg: RunConfig) -> MultimodalScenario:
    if getattr(args, "scenario", None):
        return load_scenario(args.scenario)
    return generate_grid_scenario(
        cfg.rows, cfg.cols, n_lines=cfg.lines, n_od=cfg.od,
        seed=cfg.seed, background_level=cfg.bl,
    )


def get_target(
    s: MultimodalScenario, cfg: RunConfig, target_path: str | None
) -> TargetProfile:
    if target_path:
        z = profile_from_dict(json.loads(Path(target_path).read_text()))
        if z.scenario_fingerprint != s.fingerprint():
            raise ValueError("target profile does not match the scenario")
        return z
    return solve_target(s, theta=cfg.theta, mip_gap=cfg.mip_gap)


def run_amod_oracle(
    s: MultimodalScenario, z: TargetProfile, cfg: RunConfig
) -> AmodOracleResult:
    problem = AmodBestResponseProblem(
        scenario=s, v_pt=fixed_pt_utilities(s, z.frequencies)
    )
    return sca_solve(
        problem, eps_f=cfg.eps_f, eps_r=cfg.eps_r, eps_obj=cfg.eps_obj,
        max_iter=cfg.max_iter,
    )


def run_pt_oracle(
    s: MultimodalScenario, z: TargetProfile, cfg: RunConfig
) -> PtOracleResult:
    v_amod = fixed_amod_utilities(s, z.t_amod, z.prices)
    return solve_pt_oracle(s, v_amod, mip_gap=cfg.mip_gap)


def run_pipeline(s: MultimodalScenario, cfg: RunConfig):
    """target -> both oracles -> payment; returns all four artifacts."""
    z = solve_target(s, theta=cfg.theta, mip_gap=cfg.mip_gap)
    amod = run_amod_oracle(s, z, cfg)
    pt = run_pt_oracle(s, z, cfg)
    report = compute_payment(z, amod, pt, s)
    return z, amod, pt, report


def parse_sweep(spec: str) -> tuple[str, list[float]]:
    """'bl=0.1:1.1:0.2' (start:stop:step, inclusive) or 'theta=0.1,0.5,2'."""
    key, _, body = spec.partition("=")
    key = key.strip()
    if key not in ("bl", "theta"):
        raise ValueError(f"unknown sweep variable: {key!r}")
    body = body.strip()
    if ":" in body:
        parts = [float(v) for v in body.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"bad sweep range: {body!r}")
        start, stop, step = parts
        vals, v, i = [], start, 0
        while v <= stop + 1e-9:
            vals.append(round(v, 10))
            i += 1
            v = start + i * step
    else:
        vals = [float(v) for v in body.split(",") if v.strip()]
    if not vals:
        raise ValueError("empty sweep")
    return key, vals


def _sweep_point(args: tuple[str, str, float, dict]) -> list:
    """One row of the payment sweep; module-level for multiprocessing."""
    var, scenario_json, val, cfg_dict = args
    cfg = RunConfig(**cfg_dict)
    s = scenario_from_json(scenario_json)
    if var == "bl":
        s = with_background_level(s, val)
    else:
        cfg.theta = val
    _, amod, pt, report = run_pipeline(s, cfg)
    row = [val, report.k_total, report.delta_amod, report.delta_pt,
           report.target_social_cost]
    if var == "theta":
        _, _, loss = unregularized_gap(s, val, cfg.mip_gap)
        row.append(loss)
    return row


def _grid_point(args: tuple[str, float, float, float, dict]) -> list:
    scenario_json, cap, cost, bl, cfg_dict = args
    cfg = RunConfig(**cfg_dict)
    s = scenario_from_json(scenario_json)
    s = with_line_params(with_background_level(s, bl), capacity=cap, operating_cost=cost)
    z = solve_target(s, theta=cfg.theta, mip_gap=cfg.mip_gap)
    pt = run_pt_oracle(s, z, cfg)
    return [cap, cost, bl, "E" if pt.exact else "N", pt.gap, pt.max_violation]


def _run_points(worker, points: list, jobs: int) -> list:
    if jobs <= 1:
        return [worker(p) for p in points]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, points))


def _csv_text(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


# -- subcommands ----------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = generate_grid_scenario(
        cfg.rows, cfg.cols, n_lines=cfg.lines, n_od=cfg.od,
        seed=cfg.seed, background_level=cfg.bl,
    )
    out = args.out or "scenario.json"
    atomic_write(out, scenario_to_json(s))
    print(
        f"wrote {out}: {len(s.road.nodes)} road nodes, {len(s.road.edges)} road "
        f"edges, {len(s.transit.lines)} lines, {len(s.od_pairs)} OD pairs"
    )
    return 0


def cmd_target(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = get_scenario(args, cfg)
    z = solve_target(s, theta=cfg.theta, mip_gap=cfg.mip_gap)
    out = args.out or "target.json"
    atomic_write(out, _dumps(profile_to_dict(z)))
    print(f"wrote {out}: social cost {z.social_cost:.3f}, frequencies {z.frequencies}")
    return 0


def cmd_amod_br(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = get_scenario(args, cfg)
    z = get_target(s, cfg, args.target)
    res = run_amod_oracle(s, z, cfg)
    out = args.out or "amod_br.json"
    atomic_write(out, _dumps(amod_result_to_dict(res)))
    print(
        f"wrote {out}: eta_bar {res.upper_bound:.3f}, eta_lower {res.lower_bound:.3f}, "
        f"gap {res.gap:.2e}{' (absolute)' if res.gap_is_absolute else ''}"
    )
    return 0


def cmd_pt_br(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = get_scenario(args, cfg)
    z = get_target(s, cfg, args.target)
    res = run_pt_oracle(s, z, cfg)
    out = args.out or "pt_br.json"
    atomic_write(out, _dumps(pt_result_to_dict(res)))
    tag = "exact" if res.exact else f"inexact (violation {res.max_violation:.3f})"
    print(f"wrote {out}: relaxed {res.relaxed_objective:.3f}, {tag}")
    return 0


def _print_summary(report: PaymentReport, baselines: BaselineReport | None) -> None:
    rows = [
        ("target social cost", f"{report.target_social_cost:.3f}"),
        ("U^a / U^pt at target", f"{report.u_amod_at_target:.3f} / {report.u_pt_at_target:.3f}"),
        ("Delta^a bracket", f"[{report.amod_deviation_bounds[0] - report.u_amod_at_target:.3f}, "
                            f"{report.amod_deviation_bounds[1] - report.u_amod_at_target:.3f}]"),
        ("Delta^pt bracket", f"[{report.pt_deviation_bounds[0] - report.u_pt_at_target:.3f}, "
                             f"{report.pt_deviation_bounds[1] - report.u_pt_at_target:.3f}]"),
        ("k bracket", f"[{report.k_lower:.3f}, {report.k_upper:.3f}]"),
        ("k (headline)", f"{report.k_total:.3f}"),
    ]
    if baselines is not None:
        rows.append(("joint-BR excess", f"{100 * baselines.joint_br_excess:.2f}%"))
        rows.append(("static excess", f"{100 * baselines.static_excess:.2f}%"))
    width = max(len(r[0]) for r in rows)
    for name, val in rows:
        print(f"{name:<{width}}  {val}")


def cmd_payment(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = get_scenario(args, cfg)
    out_dir = Path(args.out or "out")
    if cfg.sweep:
        var, vals = parse_sweep(cfg.sweep)
        cfg_dict = asdict(replace(cfg, sweep=None))
        points = [(var, scenario_to_json(s), v, cfg_dict) for v in vals]
        rows = _run_points(_sweep_point, points, cfg.jobs)
        header = [var, "k_total", "delta_amod", "delta_pt", "target_social_cost"]
        if var == "theta":
            header.append("optimality_loss")
        atomic_write(out_dir / f"sweep_{var}.csv", _csv_text(header, rows))
        print(f"wrote {out_dir / f'sweep_{var}.csv'} ({len(rows)} rows)")
        return 0
    z, amod, pt, report = run_pipeline(s, cfg)
    jb = joint_br_baseline(z, amod, pt, s)
    legacy = tuple(cfg.legacy_frequencies) or tuple(
        min(s.transit.frequency_levels) for _ in s.transit.lines
    )
    st = static_baseline(legacy, s)
    baselines = BaselineReport(z.social_cost, jb, st)
    atomic_write(out_dir / "target.json", _dumps(profile_to_dict(z)))
    atomic_write(out_dir / "amod_br.json", _dumps(amod_result_to_dict(amod)))
    atomic_write(out_dir / "pt_br.json", _dumps(pt_result_to_dict(pt)))
    atomic_write(out_dir / "payment.json", report.to_json() + "\n")
    atomic_write(out_dir / "baselines.json", baselines.to_json() + "\n")
    _print_summary(report, baselines)
    return 0


def cmd_exactness_grid(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = get_scenario(args, cfg)
    cfg_dict = asdict(cfg)
    text = scenario_to_json(s)
    points = [
        (text, cap, cost, bl, cfg_dict)
        for cap in cfg.cap_grid
        for cost in cfg.cost_grid
        for bl in cfg.bl_grid
    ]
    rows = _run_points(_grid_point, points, cfg.jobs)
    out = args.out or "exactness_grid.csv"
    atomic_write(out, _csv_text(
        ["capacity", "operating_cost", "bl", "exact", "gap", "max_violation"], rows
    ))
    print(f"wrote {out} ({len(rows)} cells)")
    return 0


def cmd_baselines(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    s = get_scenario(args, cfg)
    z, amod, pt, report = run_pipeline(s, cfg)
    jb = joint_br_baseline(z, amod, pt, s)
    legacy = tuple(cfg.legacy_frequencies) or tuple(
        min(s.transit.frequency_levels) for _ in s.transit.lines
    )
    st = static_baseline(legacy, s)
    baselines = BaselineReport(z.social_cost, jb, st)
    out = args.out or "baselines.json"
    atomic_write(out, baselines.to_json() + "\n")
    _print_summary(report, baselines)
    return 0


# -- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modalpay",
        description="k-implementation payments for multimodal AMoD/transit regulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, target: bool = False):
        p.add_argument("--scenario", help="scenario JSON file (default: generate)")
        p.add_argument("--config", help="JSON config file; flags override")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--theta", type=float, default=None)
        p.add_argument("--mip-gap", type=float, dest="mip_gap", default=None)
        if target:
            p.add_argument("--target", help="precomputed target profile JSON", default=None)

    p = sub.add_parser("gen", help="generate a grid scenario")
    common(p)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--lines", type=int, default=None)
    p.add_argument("--od", type=int, default=None)
    p.add_argument("--bl", type=float, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("target", help="compute the socially optimal target profile")
    common(p)
    p.set_defaults(func=cmd_target)

    p = sub.add_parser("amod-br", help="AMoD best-response bounds at the target")
    common(p, target=True)
    p.set_defaults(func=cmd_amod_br)

    p = sub.add_parser("pt-br", help="PT best-response relaxation at the target")
    common(p, target=True)
    p.set_defaults(func=cmd_pt_br)

    p = sub.add_parser("payment", help="full pipeline: target, oracles, payment, baselines")
    common(p)
    p.add_argument("--sweep", default=None, help="e.g. bl=0.1:1.1:0.2 or theta=0.1,0.5,2")
    p.set_defaults(func=cmd_payment)

    p = sub.add_parser("exactness-grid", help="PT exactness over a (C_l, K_l, BL) grid")
    common(p)
    p.set_defaults(func=cmd_exactness_grid)

    p = sub.add_parser("baselines", help="joint-BR and static uncoordinated baselines")
    common(p)
    p.set_defaults(func=cmd_baselines)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
