import json
import math
import os

import numpy as np
import pytest

from hjbkit.cli import main

MERTON_SPEC = {
    "family": "linear_drift",
    "params": {"mu": 0.1, "sigma": 0.2},
    "control_bound": 10.0,
    "state_domain": [[0.0, None]],
    "horizon": 1.0,
    "payoff": {"family": "power", "params": {"p": 0.5}},
    "gauge": {"family": "power", "params": {"p": 0.5}, "constant": 1.2},
    "constraint": {"family": "neg_second"},
}

KINK_SPEC = {
    "family": "proportional_control",
    "params": {"mu": 1.0, "sigma": 1.0},
    "control_bound": 1.0,
    "state_domain": [[None, None]],
    "horizon": 1.0,
    "payoff": {"family": "abs", "params": {"center": 1.0}},
    "gauge": {"family": "one_plus_square", "constant": 2.0},
    "constraint": {"family": "neg_second"},
}

CONCAVE_SPEC = dict(KINK_SPEC, payoff={"family": "affine", "params": {"slope": 0.5, "intercept": 1.0}})


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_oracle_merton_prints_reference_value(capsys):
    rc = main(["oracle", "--family", "merton",
               "--params", "mu=0.1,sigma=0.2,p=0.5,T=1,B=10", "--eval", "0,1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert abs(float(out.strip()) - math.exp(0.125)) < 1e-12


def test_oracle_heat(capsys):
    rc = main(["oracle", "--family", "heat", "--params", "sigma=1,T=1", "--eval", "0,0"])
    assert rc == 0
    assert float(capsys.readouterr().out.strip()) == pytest.approx(1.0)


def test_unknown_flag_exits_2(capsys):
    assert main(["solve", "--no-such-flag"]) == 2


def test_missing_subcommand_exits_2(capsys):
    assert main([]) == 2


def test_facelift_concave_payoff_identity(tmp_path, capsys):
    prob = write(tmp_path / "prob.json", CONCAVE_SPEC)
    grid = write(tmp_path / "grid.json", {"box": [[0.0, 2.0]], "n": [41]})
    rc = main(["--out-dir", str(tmp_path), "facelift", "--problem", prob, "--grid", grid,
               "--out", "ghat.csv"])
    assert rc == 0
    text = (tmp_path / "ghat.csv").read_text()
    rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
    xs = np.array([float(r[0]) for r in rows])
    vals = np.array([float(r[1]) for r in rows])
    assert np.max(np.abs(vals - (0.5 * xs + 1.0))) < 1e-12
    assert (tmp_path / "manifest.json").exists()


def test_facelift_kink_gives_chord(tmp_path):
    prob = write(tmp_path / "prob.json", KINK_SPEC)
    grid = write(tmp_path / "grid.json", {"box": [[0.0, 2.0]], "n": [41]})
    rc = main(["--out-dir", str(tmp_path), "facelift", "--problem", prob, "--grid", grid])
    assert rc == 0
    rows = (tmp_path / "ghat.csv").read_text().strip().splitlines()[1:]
    vals = np.array([float(r.split(",")[1]) for r in rows])
    assert np.max(np.abs(vals - 1.0)) < 1e-12


def test_solve_writes_solution_and_sidecar(tmp_path):
    prob = write(tmp_path / "prob.json", KINK_SPEC)
    grid = write(tmp_path / "grid.json", {"box": [[0.0, 2.0]], "n": [31]})
    rc = main(["--out-dir", str(tmp_path), "solve", "--problem", prob, "--grid", grid,
               "--time-nodes", "11", "--control-res", "11"])
    assert rc == 0
    assert (tmp_path / "solution.csv").exists()
    sidecar = json.loads((tmp_path / "solution.csv.config.json").read_text())
    assert sidecar["scheme"]["mode"] == "project"


def test_solve_cfl_violation_exits_3(tmp_path, capsys):
    prob = write(tmp_path / "prob.json", KINK_SPEC)
    grid = write(tmp_path / "grid.json", {"box": [[0.0, 2.0]], "n": [41]})
    rc = main(["--out-dir", str(tmp_path), "solve", "--problem", prob, "--grid", grid,
               "--dt", "0.5", "--time-nodes", "3"])
    assert rc == 2  # caught before stepping: configuration error


def test_simulate_summary_and_replay_bitwise(tmp_path):
    prob = write(tmp_path / "prob.json", MERTON_SPEC)
    pol = write(tmp_path / "pol.json", {"kind": "constant", "value": [5.0]})
    d1 = tmp_path / "run1"
    rc = main(["--out-dir", str(d1), "simulate", "--problem", prob, "--policy", pol,
               "--t0", "0", "--x0", "1.0", "--paths", "4000", "--steps", "16"])
    assert rc == 0
    s1 = (d1 / "ensemble-summary.json").read_bytes()
    est = json.loads(s1)
    assert abs(est["mean"] - math.exp(0.125)) < 4 * est["half_width_95"] + 0.01

    d2 = tmp_path / "run2"
    rc = main(["--out-dir", str(d2), "--manifest", str(d1 / "manifest.json"), "simulate",
               "--problem", prob, "--policy", pol, "--x0", "1.0"])
    assert rc == 0
    assert (d2 / "ensemble-summary.json").read_bytes() == s1


def test_certify_inflated_candidate_exits_4(tmp_path, capsys):
    prob = write(tmp_path / "prob.json", MERTON_SPEC)
    cand = write(tmp_path / "cand.json", {
        "kind": "closed-form", "family": "merton", "side": "sub",
        "params": {"mu": 0.1, "sigma": 0.2, "p": 0.5, "T": 1.0, "B": 10.0,
                   "exponent_shift": 0.05},
    })
    rc = main(["--out-dir", str(tmp_path), "certify", "--problem", prob,
               "--candidate", cand, "--kind", "sub", "--budget", "100000",
               "--start-box", "0.5,2.0"])
    assert rc == 4
    report = json.loads((tmp_path / "report.json").read_text())
    assert not report["certified"]
    failing = [r for r in report["records"] if not r["passed"]]
    assert failing
    out = capsys.readouterr().out
    assert "NOT certified" in out and "FAILED" in out


def test_certify_and_bracket_roundtrip(tmp_path):
    prob = write(tmp_path / "prob.json", MERTON_SPEC)
    sub_spec = {"kind": "closed-form", "family": "merton", "side": "sub",
                "params": {"mu": 0.1, "sigma": 0.2, "p": 0.5, "T": 1.0, "B": 10.0}}
    sup_spec = dict(sub_spec, side="super",
                    params=dict(sub_spec["params"], exponent_shift=0.05))
    sub = write(tmp_path / "sub.json", sub_spec)
    sup = write(tmp_path / "sup.json", sup_spec)
    rc = main(["--out-dir", str(tmp_path), "certify", "--problem", prob, "--candidate", sub,
               "--budget", "30000", "--start-box", "0.5,2.0", "--out", "sub-report.json"])
    assert rc == 0
    rc = main(["--out-dir", str(tmp_path), "certify", "--problem", prob, "--candidate", sup,
               "--budget", "30000", "--start-box", "0.5,2.0", "--out", "sup-report.json"])
    assert rc == 0
    pts = tmp_path / "points.csv"
    pts.write_text("0.0,1.0\n0.5,1.5\n")
    rc = main(["--out-dir", str(tmp_path), "bracket", "--problem", prob,
               "--sub", str(tmp_path / "sub-report.json"),
               "--super", str(tmp_path / "sup-report.json"),
               "--points", str(pts), "--paths", "5000"])
    assert rc == 0
    doc = json.loads((tmp_path / "bracket.json").read_text())
    assert doc["ok"]
    assert doc["points"][0]["gap"] == pytest.approx(math.exp(0.175) - math.exp(0.125), abs=1e-12)


def test_convergence_cli(tmp_path):
    prob = write(tmp_path / "prob.json", dict(
        CONCAVE_SPEC,
        payoff={"family": "quadratic"},
        constraint={"family": "positive_const", "params": {"c": 1.0}},
    ))
    grid = write(tmp_path / "grid.json", {"box": [[-2.0, 2.0]], "n": [17]})
    rc = main(["--out-dir", str(tmp_path), "convergence", "--problem", prob, "--grid", grid,
               "--refinements", "2", "--time-nodes", "9"])
    assert rc == 0
    doc = json.loads((tmp_path / "study.json").read_text())
    assert len(doc["diffs"]) == 2


def test_solve_replay_bitwise(tmp_path):
    prob = write(tmp_path / "prob.json", KINK_SPEC)
    grid = write(tmp_path / "grid.json", {"box": [[0.0, 2.0]], "n": [31]})
    d1, d2 = tmp_path / "a", tmp_path / "b"
    rc = main(["--out-dir", str(d1), "solve", "--problem", prob, "--grid", grid,
               "--time-nodes", "9", "--control-res", "11"])
    assert rc == 0
    rc = main(["--out-dir", str(d2), "--manifest", str(d1 / "manifest.json"), "solve",
               "--problem", prob, "--grid", grid])
    assert rc == 0
    assert (d2 / "solution.csv").read_bytes() == (d1 / "solution.csv").read_bytes()


def test_manifest_subcommand_mismatch_exits_2(tmp_path):
    prob = write(tmp_path / "prob.json", KINK_SPEC)
    grid = write(tmp_path / "grid.json", {"box": [[0.0, 2.0]], "n": [31]})
    rc = main(["--out-dir", str(tmp_path), "solve", "--problem", prob, "--grid", grid,
               "--time-nodes", "5", "--control-res", "5"])
    assert rc == 0
    rc = main(["--out-dir", str(tmp_path), "--manifest", str(tmp_path / "manifest.json"),
               "facelift", "--problem", prob, "--grid", grid])
    assert rc == 2


def test_pipeline_small_merton(tmp_path):
    prob = write(tmp_path / "prob.json", MERTON_SPEC)
    spec = {
        "problem": "prob.json",
        "grid": {"box": [[0.2, 5.0]], "n": [80], "spacing": "log"},
        "points": [[0.0, 1.0]],
        "sub_candidate": {"kind": "closed-form", "family": "merton", "side": "sub",
                          "params": {"mu": 0.1, "sigma": 0.2, "p": 0.5, "T": 1.0, "B": 10.0}},
        "super_candidate": {"kind": "closed-form", "family": "merton", "side": "super",
                            "params": {"mu": 0.1, "sigma": 0.2, "p": 0.5, "T": 1.0, "B": 10.0,
                                       "exponent_shift": 0.02}},
        "time_nodes": 30,
        "control_res": 41,
        "mc_paths": 20000,
        "mc_steps": 60,
        "budget": 30000,
        "start_box": [[0.5, 2.0]],
        "certify_solver_candidate": False,
        "seed": 5,
    }
    spath = write(tmp_path / "pipeline.json", spec)
    rc = main(["--out-dir", str(tmp_path), "pipeline", "--spec", spath])
    assert rc == 0
    doc = json.loads((tmp_path / "pipeline-report.json").read_text())
    assert doc["stages"]["bracket"] == "ok"
    assert doc["bracket"]["ok"]
    assert doc["facelift_sup_distance"] == 0.0
    gap_frac = doc["bracket"]["points"][0]["gap_fraction"]
    assert gap_frac < 0.03
