"""Command-line entry point.

Subcommands: facelift, solve, simulate, certify, bracket, convergence, oracle,
pipeline.  Every run that writes artifacts also writes a manifest with the
resolved configuration, input hashes and the seed; re-running a subcommand
with --manifest pointing at that file reproduces the outputs (bitwise for
simulation and solves).  Exit codes: 0 success, 2 configuration/usage error,
3 numerical or convergence failure, 4 certification FAIL (a rejected
hypothesis, not a tool failure).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import specio
from .certify import (
    AdversaryConfig,
    BracketConfig,
    CertificationReport,
    CertifyConfig,
    TestRecord,
    bracket_report,
    candidate_from_solution,
    certify_subsolution,
    certify_supersolution,
)
from .errors import ConfigurationError, ConvergenceError, NumericalError
from .facelift import concave_envelope, facelift_general
from .grids import Box, GridFunction
from .oracles import heat_value, merton_value
from .simulate import estimate_value, simulate_paths
from .solver import SchemeConfig, convergence_study, extract_policy, solve_hjb

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CERTIFY_FAIL = 4


def _parse_params(text: str) -> dict:
    out = {}
    if not text:
        return out
    for item in text.split(","):
        key, val = item.split("=", 1)
        out[key.strip()] = float(val)
    return out


def _payoff_values(problem, grid) -> GridFunction:
    return GridFunction(grid, problem.payoff(grid.nodes()).reshape(grid.shape))


def _report_to_json(report: CertificationReport, candidate_spec) -> dict:
    return {
        "candidate": candidate_spec,
        "side": report.side,
        "certified": report.certified,
        "verdict": report.verdict,
        "z": report.z,
        "tol": report.tol,
        "budget": report.budget,
        "seed": report.seed,
        "adversary_class": report.adversary_class,
        "records": [
            {
                "kind": r.kind,
                "tau": r.tau,
                "rho": r.rho_spec,
                "start": list(r.start),
                "adversary": r.adversary,
                "margin": r.margin,
                "stderr": r.stderr,
                "n_paths": r.n_paths,
                "passed": r.passed,
            }
            for r in report.records
        ],
    }


def _report_from_json(doc: dict) -> CertificationReport:
    records = tuple(
        TestRecord(
            r["kind"], r["tau"], r["rho"], tuple(r["start"]), r["adversary"],
            r["margin"], r["stderr"], r["n_paths"], r["passed"],
        )
        for r in doc["records"]
    )
    return CertificationReport(
        candidate=str(doc["candidate"]),
        side=doc["side"],
        records=records,
        z=doc["z"],
        tol=doc["tol"],
        budget=doc["budget"],
        seed=doc["seed"],
        adversary_class=doc.get("adversary_class", ""),
    )


def _box_from_pairs(pairs) -> Box:
    return Box(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))


# ---------------------------------------------------------------------------
# subcommand handlers (each takes the resolved config dict)
# ---------------------------------------------------------------------------

def _run_oracle(cfg, out_dir):
    params = cfg["params"]
    t, x = cfg["eval"]
    if cfg["family"] == "merton":
        val = merton_value(
            t, x,
            mu=params.get("mu", 0.1), sigma=params.get("sigma", 0.2),
            p=params.get("p", 0.5), horizon=params.get("T", 1.0),
            bound=params.get("B", 10.0),
        )
    elif cfg["family"] == "heat":
        val = heat_value(
            t, x, sigma_const=params.get("sigma", 1.0),
            payoff=cfg.get("payoff", "x2"), horizon=params.get("T", 1.0),
        )
    else:
        raise ConfigurationError(f"unknown oracle family {cfg['family']!r}")
    print(f"{val!r}")
    if out_dir:
        specio.write_manifest(out_dir, "oracle", cfg, [], cfg.get("seed"), [])
    return EXIT_OK


def _run_facelift(cfg, out_dir):
    problem = specio.load_problem(cfg["problem"])
    grid = specio.load_grid(cfg["grid"])
    g = _payoff_values(problem, grid)
    if problem.constraint.family == "neg_second" and grid.dim == 1 and cfg.get("method", "auto") != "relax":
        ghat = concave_envelope(g)
    else:
        ghat = facelift_general(g, problem, tol=cfg.get("tol", 1e-8))
    out = os.path.join(out_dir, cfg["out"])
    specio.atomic_write_text(out, ghat.to_csv())
    specio.write_manifest(out_dir, "facelift", cfg, [cfg["problem"], cfg["grid"]], cfg.get("seed"), [cfg["out"]])
    print(f"facelift written to {out}; sup distance to payoff = {float(np.max(ghat.values - g.values))!r}")
    return EXIT_OK


def _scheme_config(cfg) -> SchemeConfig:
    return SchemeConfig(
        n_time_nodes=int(cfg.get("time_nodes", 101)),
        dt=cfg.get("dt"),
        control_grid_resolution=int(cfg.get("control_res", 41)),
        constraint_mode=cfg.get("mode", "auto"),
        penalty_weight=cfg.get("penalty_weight"),
        upwind=bool(cfg.get("upwind", True)),
    )


def _run_solve(cfg, out_dir):
    problem = specio.load_problem(cfg["problem"])
    grid = specio.load_grid(cfg["grid"])
    g = _payoff_values(problem, grid)
    if cfg.get("terminal", "facelift") == "facelift":
        if problem.constraint.family == "neg_second" and grid.dim == 1:
            terminal = concave_envelope(g)
        elif problem.constraint.family == "positive_const":
            terminal = g
        else:
            terminal = facelift_general(g, problem)
    else:
        terminal = g
    config = _scheme_config(cfg)
    sol = solve_hjb(problem, terminal, config)
    out = os.path.join(out_dir, cfg["out"])
    specio.atomic_write_text(out, sol.to_csv())
    sidecar = {
        "scheme": {
            "n_time_nodes": config.n_time_nodes,
            "dt_internal": sol.metadata["dt_internal"],
            "substeps_per_interval": sol.metadata["substeps_per_interval"],
            "cfl_dt_max": sol.metadata["cfl_dt_max"],
            "control_grid_size": sol.metadata["control_grid_size"],
            "mode": sol.metadata["mode"],
        },
        "terminal": cfg.get("terminal", "facelift"),
    }
    specio.atomic_write_text(os.path.join(out_dir, cfg["out"] + ".config.json"),
                             json.dumps(sidecar, indent=2) + "\n")
    specio.write_manifest(
        out_dir, "solve", cfg, [cfg["problem"], cfg["grid"]], cfg.get("seed"),
        [cfg["out"], cfg["out"] + ".config.json"],
    )
    print(f"solution written to {out} ({sol.metadata['substeps_per_interval']} substeps/interval)")
    return EXIT_OK


def _run_simulate(cfg, out_dir):
    problem = specio.load_problem(cfg["problem"])
    with open(cfg["policy"]) as fh:
        policy_spec = json.load(fh)
    policy = specio.policy_from_spec(policy_spec, base_dir=os.path.dirname(cfg["policy"]) or ".")
    box = _box_from_pairs(cfg["simulation_box"]) if cfg.get("simulation_box") else None
    ens = simulate_paths(
        problem, policy, cfg["t0"], cfg["x0"], int(cfg["paths"]), int(cfg["steps"]),
        int(cfg["seed"]), box,
    )
    est = estimate_value(ens, problem.payoff)
    summary = {
        "mean": est.mean,
        "half_width_95": est.half_width_95,
        "exit_fraction": est.exit_fraction,
        "n_paths": est.n_paths,
        "seed": int(cfg["seed"]),
        "policy": policy_spec,
        "t0": cfg["t0"],
        "x0": cfg["x0"],
        "log_coordinates": ens.log_coordinates,
    }
    out = os.path.join(out_dir, cfg["out"])
    specio.atomic_write_text(out, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    specio.write_manifest(out_dir, "simulate", cfg, [cfg["problem"], cfg["policy"]], cfg["seed"], [cfg["out"]])
    print(f"value estimate {est.mean!r} +- {est.half_width_95!r} (exit fraction {est.exit_fraction:.4f})")
    return EXIT_OK


def _certify_config(cfg, problem) -> CertifyConfig:
    if cfg.get("start_box"):
        box = _box_from_pairs(cfg["start_box"])
    else:
        lo = np.where(np.isfinite(problem.state_domain.lo), problem.state_domain.lo, -1.0)
        hi = np.where(np.isfinite(problem.state_domain.hi), problem.state_domain.hi, 1.0)
        width = hi - lo
        box = Box(lo + 0.25 * width, hi - 0.25 * width)
    return CertifyConfig(
        start_box=box,
        budget=int(cfg.get("budget", 100_000)),
        z=float(cfg.get("z", 4.0)),
        tol=float(cfg.get("tol", 1e-9)),
        n_starts=int(cfg.get("n_starts", 3)),
        steps_per_record=int(cfg.get("steps", 48)),
        seed=int(cfg.get("seed", 0)),
    )


def _run_certify(cfg, out_dir):
    problem = specio.load_problem(cfg["problem"])
    with open(cfg["candidate"]) as fh:
        candidate_spec = json.load(fh)
    candidate_spec["side"] = cfg.get("kind") or candidate_spec.get("side")
    candidate = specio.candidate_from_spec(candidate_spec, base_dir=os.path.dirname(cfg["candidate"]) or ".")
    config = _certify_config(cfg, problem)
    if candidate.kind == "sub":
        report = certify_subsolution(candidate, problem, config)
    else:
        adv = AdversaryConfig(seed=int(cfg.get("seed", 0)) + 1)
        report = certify_supersolution(candidate, problem, config, adv)
    doc = _report_to_json(report, candidate_spec)
    out = os.path.join(out_dir, cfg["out"])
    specio.atomic_write_text(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    specio.write_manifest(out_dir, "certify", cfg, [cfg["problem"], cfg["candidate"]], cfg.get("seed"), [cfg["out"]])
    print(report.verdict)
    if not report.certified:
        for r in report.failing():
            print(
                f"  FAILED {r.kind} tau={r.tau:g} rho={r.rho_spec} adversary={r.adversary} "
                f"margin={r.margin:.3e} stderr={r.stderr:.3e}"
            )
        return EXIT_CERTIFY_FAIL
    return EXIT_OK


def _run_bracket(cfg, out_dir):
    problem = specio.load_problem(cfg["problem"])
    with open(cfg["sub"]) as fh:
        sub_doc = json.load(fh)
    with open(cfg["super"]) as fh:
        super_doc = json.load(fh)
    sub = specio.candidate_from_spec(sub_doc["candidate"], base_dir=os.path.dirname(cfg["sub"]) or ".")
    super_ = specio.candidate_from_spec(super_doc["candidate"], base_dir=os.path.dirname(cfg["super"]) or ".")
    with open(cfg["points"]) as fh:
        pts = [
            (float(parts[0]), [float(v) for v in parts[1:]])
            for parts in (ln.split(",") for ln in fh.read().strip().splitlines() if ln.strip())
            if parts[0].replace(".", "").replace("-", "").strip().isdigit() or _is_float(parts[0])
        ]
    bc = BracketConfig(
        n_paths=int(cfg.get("paths", 20_000)),
        n_steps=int(cfg.get("steps", 64)),
        seed=int(cfg.get("seed", 0)),
    )
    rep = bracket_report(
        sub, super_, problem, pts, bc, _report_from_json(sub_doc), _report_from_json(super_doc)
    )
    doc = {
        "ok": rep.ok,
        "max_gap": rep.max_gap,
        "points": [
            {
                "t": p.t, "x": list(p.x), "sub": p.sub_value, "super": p.super_value,
                "mc_mean": p.mc.mean, "mc_half_width": p.mc.half_width_95,
                "gap": p.gap, "ok": p.ok,
            }
            for p in rep.points
        ],
    }
    out = os.path.join(out_dir, cfg["out"])
    specio.atomic_write_text(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    specio.write_manifest(
        out_dir, "bracket", cfg, [cfg["problem"], cfg["sub"], cfg["super"], cfg["points"]],
        cfg.get("seed"), [cfg["out"]],
    )
    print(f"bracket ok={rep.ok} max gap={rep.max_gap!r}")
    return EXIT_OK if rep.ok else EXIT_CERTIFY_FAIL


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _run_convergence(cfg, out_dir):
    problem = specio.load_problem(cfg["problem"])
    grid = specio.load_grid(cfg["grid"])
    terminal = _payoff_values(problem, grid)
    study = convergence_study(
        problem, terminal, int(cfg.get("refinements", 2)), _scheme_config(cfg),
        mode=cfg.get("refine", "space"),
    )
    doc = {"shapes": [list(s) for s in study.shapes], "diffs": list(study.diffs), "orders": list(study.orders)}
    out = os.path.join(out_dir, cfg["out"])
    specio.atomic_write_text(out, json.dumps(doc, indent=2) + "\n")
    specio.write_manifest(out_dir, "convergence", cfg, [cfg["problem"], cfg["grid"]], cfg.get("seed"), [cfg["out"]])
    print(f"diffs={study.diffs} orders={study.orders}")
    return EXIT_OK


def _run_pipeline(cfg, out_dir):
    with open(cfg["spec"]) as fh:
        spec = json.load(fh)
    base = os.path.dirname(cfg["spec"]) or "."
    problem = (
        specio.load_problem(os.path.join(base, spec["problem"]))
        if isinstance(spec["problem"], str)
        else specio.problem_from_spec(spec["problem"])
    )
    grid = specio.grid_from_spec(spec["grid"])
    points = [(float(p[0]), [float(v) for v in p[1:]]) for p in spec["points"]]
    report: dict = {"stages": {}}
    out = os.path.join(out_dir, spec.get("out", "pipeline-report.json"))
    seed = int(spec.get("seed", 0))

    def _fail(stage, exc, code):
        report["stages"][stage] = f"failed: {exc}"
        specio.atomic_write_text(out, json.dumps(report, indent=2, sort_keys=True) + "\n")
        specio.write_manifest(out_dir, "pipeline", cfg, [cfg["spec"]], seed, [spec.get("out", "pipeline-report.json")])
        print(f"pipeline failed at stage {stage}: {exc}")
        return code

    g = _payoff_values(problem, grid)
    # stage 1: face-lift
    try:
        if problem.constraint.family == "neg_second" and grid.dim == 1:
            ghat = concave_envelope(g)
        elif problem.constraint.family == "positive_const":
            ghat = g
        else:
            ghat = facelift_general(g, problem)
        report["facelift_sup_distance"] = float(np.max(ghat.values - g.values))
        report["stages"]["facelift"] = "ok"
    except (ConfigurationError, ConvergenceError) as exc:
        return _fail("facelift", exc, EXIT_NUMERIC)

    # stage 2: solve
    try:
        terminal = ghat if spec.get("terminal", "facelift") == "facelift" else g
        config = _scheme_config(spec)
        sol = solve_hjb(problem, terminal, config)
        report["solver_value_at_points"] = [sol.value_at(t, x) for t, x in points]
        report["stages"]["solve"] = "ok"
    except (ConfigurationError, NumericalError) as exc:
        return _fail("solve", exc, EXIT_NUMERIC)

    # stage 3: policy extraction + simulation at the first point
    policy = extract_policy(sol)
    t0, x0 = points[0]
    box = grid.box if spec.get("absorb_at_truncation", True) else None
    ens = simulate_paths(
        problem, policy, t0, x0, int(spec.get("mc_paths", 100_000)),
        int(spec.get("mc_steps", 200)), seed, box,
    )
    est = estimate_value(ens, problem.payoff)
    report["mc_estimate_at_first_point"] = {
        "mean": est.mean, "half_width_95": est.half_width_95, "exit_fraction": est.exit_fraction,
    }
    report["stages"]["simulate"] = "ok"

    # stage 4: certification
    ccfg = _certify_config({**spec, "seed": seed}, problem)
    sub = specio.candidate_from_spec(spec["sub_candidate"], base)
    super_ = specio.candidate_from_spec(spec["super_candidate"], base)
    sub_rep = certify_subsolution(sub, problem, ccfg)
    adv = AdversaryConfig(extra_policies=(policy,), seed=seed + 1)
    super_rep = certify_supersolution(super_, problem, ccfg, adv)
    report["certify_sub"] = {"verdict": sub_rep.verdict, "certified": sub_rep.certified}
    report["certify_super"] = {"verdict": super_rep.verdict, "certified": super_rep.certified}
    if spec.get("certify_solver_candidate", True):
        solver_cand = candidate_from_solution(sol, "sub", growth_constant=spec.get("solver_growth_constant", 10.0))
        try:
            scfg = CertifyConfig(
                start_box=ccfg.start_box, budget=ccfg.budget // 2, z=ccfg.z,
                tol=float(spec.get("solver_candidate_tol", 5e-3)),
                seed=seed + 2, simulation_box=grid.box,
            )
            srep = certify_subsolution(solver_cand, problem, scfg)
            report["solver_candidate"] = {"verdict": srep.verdict, "certified": srep.certified}
        except ValueError as exc:
            report["solver_candidate"] = {"skipped": str(exc)}
    report["stages"]["certify"] = "ok"

    # stage 5: sandwich
    bc = BracketConfig(
        n_paths=int(spec.get("mc_paths", 100_000)), n_steps=int(spec.get("mc_steps", 200)),
        seed=seed, extra_policies=(policy,), simulation_box=box,
    )
    brep = bracket_report(sub, super_, problem, points, bc, sub_rep, super_rep)
    report["bracket"] = {
        "ok": brep.ok,
        "max_gap": brep.max_gap,
        "points": [
            {
                "t": p.t, "x": list(p.x), "sub": p.sub_value, "super": p.super_value,
                "mc_mean": p.mc.mean, "mc_half_width": p.mc.half_width_95,
                "gap": p.gap, "gap_fraction": p.gap / max(abs(p.mc.mean), 1e-300), "ok": p.ok,
            }
            for p in brep.points
        ],
    }
    report["stages"]["bracket"] = "ok"

    specio.atomic_write_text(out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    specio.write_manifest(out_dir, "pipeline", cfg, [cfg["spec"]], seed, [spec.get("out", "pipeline-report.json")])
    ok = sub_rep.certified and super_rep.certified and brep.ok
    print(f"pipeline complete; certification gap at first point = {brep.points[0].gap!r}")
    return EXIT_OK if ok else EXIT_CERTIFY_FAIL


_HANDLERS = {
    "oracle": _run_oracle,
    "facelift": _run_facelift,
    "solve": _run_solve,
    "simulate": _run_simulate,
    "certify": _run_certify,
    "bracket": _run_bracket,
    "convergence": _run_convergence,
    "pipeline": _run_pipeline,
}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hjbkit", description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1, help="reserved; recorded in the manifest")
    ap.add_argument("--out-dir", default=".")
    ap.add_argument("--manifest", default=None, help="re-run from a recorded manifest")
    sub = ap.add_subparsers(dest="subcommand")

    p = sub.add_parser("oracle")
    p.add_argument("--family", required=True, choices=["merton", "heat"])
    p.add_argument("--params", default="")
    p.add_argument("--eval", required=True, help="t,x")

    p = sub.add_parser("facelift")
    p.add_argument("--problem", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", default="ghat.csv")
    p.add_argument("--method", default="auto", choices=["auto", "relax"])
    p.add_argument("--tol", type=float, default=1e-8)

    p = sub.add_parser("solve")
    p.add_argument("--problem", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--terminal", default="facelift", choices=["raw", "facelift"])
    p.add_argument("--out", default="solution.csv")
    p.add_argument("--time-nodes", type=int, default=101, dest="time_nodes")
    p.add_argument("--control-res", type=int, default=41, dest="control_res")
    p.add_argument("--mode", default="auto", choices=["auto", "project", "penalize", "off"])
    p.add_argument("--dt", type=float, default=None)

    p = sub.add_parser("simulate")
    p.add_argument("--problem", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--x0", type=float, nargs="+", required=True)
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", default="ensemble-summary.json")

    p = sub.add_parser("certify")
    p.add_argument("--problem", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--kind", choices=["sub", "super"], default=None)
    p.add_argument("--budget", type=int, default=100_000)
    p.add_argument("--out", default="report.json")
    p.add_argument("--start-box", default=None, help="lo,hi[;lo,hi] per dimension")
    p.add_argument("--z", type=float, default=4.0)

    p = sub.add_parser("bracket")
    p.add_argument("--problem", required=True)
    p.add_argument("--sub", required=True, help="certify report JSON for the sub candidate")
    p.add_argument("--super", dest="super", required=True, help="certify report JSON for the super candidate")
    p.add_argument("--points", required=True)
    p.add_argument("--paths", type=int, default=20_000)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--out", default="bracket.json")

    p = sub.add_parser("convergence")
    p.add_argument("--problem", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--refinements", type=int, default=2)
    p.add_argument("--refine", default="space", choices=["space", "time"])
    p.add_argument("--time-nodes", type=int, default=33, dest="time_nodes")
    p.add_argument("--control-res", type=int, default=11, dest="control_res")
    p.add_argument("--out", default="study.json")

    p = sub.add_parser("pipeline")
    p.add_argument("--spec", required=True)
    return ap


def _config_from_args(args) -> dict:
    skip = {"subcommand", "out_dir", "manifest", "threads"}
    cfg = {k: v for k, v in vars(args).items() if k not in skip}
    if args.subcommand == "oracle":
        cfg["params"] = _parse_params(cfg.get("params", ""))
        t, x = cfg["eval"].split(",")
        cfg["eval"] = [float(t), float(x)]
    if args.subcommand == "certify" and cfg.get("start_box"):
        cfg["start_box"] = [
            [float(v) for v in pair.split(",")] for pair in cfg["start_box"].split(";")
        ]
    if args.subcommand == "simulate":
        cfg["x0"] = list(cfg["x0"])
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK

    if args.manifest:
        try:
            manifest = specio.load_manifest(args.manifest)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"cannot load manifest: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        sub = manifest["subcommand"]
        if args.subcommand and args.subcommand != sub:
            print(f"manifest records subcommand {sub!r}", file=sys.stderr)
            return EXIT_CONFIG
        cfg = manifest["config"]
        subcommand = sub
    else:
        if not args.subcommand:
            parser.print_usage()
            return EXIT_CONFIG
        cfg = _config_from_args(args)
        if "seed" not in cfg or cfg.get("seed") is None:
            cfg["seed"] = args.seed
        subcommand = args.subcommand

    out_dir = args.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    try:
        return _HANDLERS[subcommand](cfg, out_dir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, NumericalError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
