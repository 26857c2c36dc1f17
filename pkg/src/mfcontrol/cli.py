"""Command line entry point.

Exit codes: 0 when every checked criterion passes, 2 when one fails, 1 on
errors (bad config, numerical failure).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from mfcontrol import experiments as ex
from mfcontrol.hjb_solver import extract_feedback, measure_lipschitz
from mfcontrol.limit_mfcp import optimal_trajectory
from mfcontrol.simulator import SimConfig, simulate_coupled_particles

log = logging.getLogger("mfcontrol")

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
ADJOINT_TOL = 5e-3
RESIDUAL_TOL = 1e-3
COMMANDS = ("solve", "reference", "simulate", "converge", "transfer", "chaos", "pontryagin", "selftest")


def _formats(value: str) -> list:
    return ["csv", "json"] if value == "both" else [value]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed (u64)")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--format", choices=("csv", "json", "both"), help="result formats")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mfcontrol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "solve V^N for every N in the config and dump values",
        "reference": "solve the reference V^{N_ref} and the optimal limit flow",
        "simulate": "simulate the coupled particle systems",
        "converge": "value-function convergence rate",
        "transfer": "epsilon-optimality transfer gap",
        "chaos": "propagation of chaos distances",
        "pontryagin": "adjoint and mean field game consistency checks",
        "selftest": "fast oracle checks",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if args.format is not None:
        changes["formats"] = _formats(args.format)
    if changes:
        raw = cfg.to_dict()
        raw.update(changes)
        cfg = ex.ExperimentConfig.from_dict(raw)
    return cfg


def _report_line(report: ex.RateReport) -> str:
    slope = "exact" if report.exact_match else (f"{report.slope:.4f}" if report.slope is not None else "n/a")
    verdict = "PASS" if report.passed else "FAIL"
    return f"{verdict} {report.name}: slope={slope} threshold={report.threshold}"


def cmd_rate(cfg, runner) -> int:
    report = runner(cfg)
    ex.emit_results(report, cfg.out_dir, cfg.formats, cfg)
    print(_report_line(report))
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_solve(cfg) -> int:
    spec = cfg.build_spec()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = ex.provenance(cfg)
    rows = []
    for N in cfg.N_list:
        field_ = ex._solve_cached(spec, cfg, N)
        if "csv" in cfg.formats:
            field_.to_csv(out / f"value_N{N}.csv")
        space, tm = measure_lipschitz(field_)
        rows.append((N, space, tm))
    if "csv" in cfg.formats:
        ex.write_csv(out / "lipschitz.csv", ["N", "space_lipschitz", "time_lipschitz"], rows, meta)
    if "json" in cfg.formats:
        ex.write_json(out / "solve.json", {"meta": meta, "config": cfg.content(),
                                           "lipschitz": [dict(zip(("N", "space", "time"), r)) for r in rows]})
    print(f"solved N={cfg.N_list}")
    return EXIT_PASS


def cmd_reference(cfg) -> int:
    spec = cfg.build_spec()
    ref = ex.reference_for(cfg, spec)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref.field.save(out / f"reference_N{cfg.N_ref}.mfcvf", {"config_hash": cfg.config_hash()})
    m0 = cfg.initial()
    payload = {"meta": ex.provenance(cfg), "config": cfg.content(), "V0": float(ref(0.0, m0))}
    if spec.flag in ("B", "C"):
        flow, _ = optimal_trajectory(spec, ref, m0)
        if "csv" in cfg.formats:
            flow.to_csv(out / "flow.csv")
        payload["J"] = ex.flow_cost(spec, flow)
    if "json" in cfg.formats:
        ex.write_json(out / "reference.json", payload)
    print(f"reference N_ref={cfg.N_ref} V(0, m0)={payload['V0']:.6g}")
    return EXIT_PASS


def cmd_simulate(cfg) -> int:
    spec = cfg.build_spec()
    m0 = cfg.initial()
    ref = ex.reference_for(cfg, spec)
    flow, limit = optimal_trajectory(spec, ref, m0)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = ex.provenance(cfg)
    summary = []
    for N in cfg.N_list:
        policy = extract_feedback(spec, ex._solve_cached(spec, cfg, N))
        sim = SimConfig(N=N, paths=cfg.paths, seed=cfg.seed, threads=cfg.threads)
        res = simulate_coupled_particles(spec, policy, limit, flow, sim, m0)
        if "csv" in cfg.formats:
            for name in ("X", "Y", "Xt"):
                ex.write_csv(out / f"events_N{N}_{name}.csv", ["path", "t", "particle", "from", "to"],
                             res[name].event_rows(), meta)
        summary.append({"N": N, "particle_sup": float(res["particle_sup"].mean()),
                        "mismatch_fraction": float(res["mismatch_fraction"].mean())})
    if "json" in cfg.formats:
        ex.write_json(out / "simulate.json", {"meta": meta, "config": cfg.content(), "summary": summary})
    print(f"simulated N={cfg.N_list} paths={cfg.paths}")
    return EXIT_PASS


def cmd_pontryagin(cfg) -> int:
    from mfcontrol.pontryagin import adjoint_gap, build_u, mfg_residual, solve_adjoint

    spec = cfg.build_spec()
    m0 = cfg.initial()
    ref = ex.reference_for(cfg, spec)
    flow, _ = optimal_trajectory(spec, ref, m0)
    adj = solve_adjoint(spec, flow)
    gap = adjoint_gap(adj, ref)
    resid = mfg_residual(spec, build_u(spec, adj), flow)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    passed = gap <= ADJOINT_TOL and resid <= RESIDUAL_TOL
    if "csv" in cfg.formats:
        adj.to_csv(out / "adjoint.csv")
    if "json" in cfg.formats:
        ex.write_json(out / "pontryagin.json", {
            "meta": ex.provenance(cfg), "config": cfg.content(),
            "adjoint_gap": gap, "mfg_residual": resid, "passed": passed,
        })
    print(f"{'PASS' if passed else 'FAIL'} pontryagin: adjoint_gap={gap:.3e} residual={resid:.3e}")
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_selftest(cfg) -> int:
    from mfcontrol.selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_PASS if all(ok for _, ok, _ in results) else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "converge":
            return cmd_rate(cfg, ex.run_convergence)
        if args.command == "transfer":
            return cmd_rate(cfg, ex.run_epsilon_transfer)
        if args.command == "chaos":
            return cmd_rate(cfg, ex.run_chaos)
        handler = {
            "solve": cmd_solve,
            "reference": cmd_reference,
            "simulate": cmd_simulate,
            "pontryagin": cmd_pontryagin,
            "selftest": cmd_selftest,
        }[args.command]
        return handler(cfg)
    except (ex.ConfigError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
