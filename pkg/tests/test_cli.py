import json
import subprocess
import sys

import pytest

from otdro.cli import main

INSTANCE = {
    "format": "otdro-instance",
    "version": 1,
    "loss": {"pieces": [{"a": [1.0], "b": 0.0}, {"a": [-1.0], "b": 0.5}]},
    "cost": {"kind": "p-norm", "params": {"p": 2}},
    "nominal": {"atoms": [[0.0], [1.0], [2.0]], "weights": [0.25, 0.25, 0.5]},
    "radius": 0.3,
    "value_domain": {"lower": [-3], "upper": [5], "w_max": 4, "constrained": False},
}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def line_value(text, label):
    for line in text.splitlines():
        if line.startswith(label + ":"):
            return float(line.split(":", 1)[1].split()[0])
    raise AssertionError(f"no {label!r} line in {text!r}")


@pytest.fixture
def inst(tmp_path):
    return write(tmp_path / "inst.json", INSTANCE)


def test_lift_solve_emit_pipeline(tmp_path, inst, capsys):
    lifted, result, prog = tmp_path / "l.json", tmp_path / "r.json", tmp_path / "p.json"
    code, out, _ = run(["lift", "--family", "interpolated", "--in", inst, "--out", lifted,
                        "--theta1", 2, "--theta2", 1], capsys)
    assert code == 0 and "3 nominal atoms" in out
    code, out, _ = run(["solve", "--in", lifted, "--method", "kl", "--out", result], capsys)
    assert code == 0 and "status: converged" in out
    doc = json.loads(result.read_text())
    assert doc["objective"] == pytest.approx(line_value(out, "objective"), rel=1e-15)
    assert doc["diagnostics"]["weak_duality_ok"] is True
    code, out, _ = run(["emit-conic", "--in", lifted, "--out", prog, "--verify", result], capsys)
    assert code == 0 and "0 violations" in out
    assert json.loads(prog.read_text())["format"] == "otdro-conic"


def test_solve_at_zero_radius_reports_empirical_risk(tmp_path, inst, capsys):
    lifted = tmp_path / "l.json"
    run(["lift", "--family", "interpolated", "--in", inst, "--out", lifted, "--radius", 0], capsys)
    code, out, _ = run(["solve", "--in", lifted], capsys)
    assert code == 0
    assert line_value(out, "objective") == line_value(out, "empirical risk")


@pytest.mark.parametrize("family,extra", [
    ("wasserstein", []),
    ("phi", ["--phi", "hellinger", "--mix-epsilon", 0.1]),
    ("sinkhorn", ["--reg-epsilon", 0.5]),
])
def test_lift_families_solve(tmp_path, inst, capsys, family, extra):
    doc = dict(INSTANCE, reference={"atoms": [[0.0], [1.0], [2.0], [3.0]]}, worst_scenario=[5.0])
    doc["radius"] = 2.0 if family == "sinkhorn" else 0.3
    src = write(tmp_path / "i.json", doc)
    lifted = tmp_path / "l.json"
    code, _, err = run(["lift", "--family", family, "--in", src, "--out", lifted, *extra], capsys)
    assert code == 0, err
    code, out, err = run(["solve", "--in", lifted], capsys)
    assert code == 0, err
    assert line_value(out, "objective") >= line_value(out, "empirical risk") - 1e-12


def test_oracle_command(tmp_path, capsys):
    doc = dict(INSTANCE, cost={"kind": "p-norm", "params": {"p": 1}})
    doc["value_domain"] = {"lower": [-1], "upper": [3], "w_max": 4, "constrained": False}
    src, lifted, out_json = write(tmp_path / "i.json", doc), tmp_path / "l.json", tmp_path / "o.json"
    run(["lift", "--family", "wasserstein", "--in", src, "--out", lifted], capsys)
    code, out, _ = run(["oracle", "--in", lifted, "--v-step", 0.5, "--levels", 2, "--out", out_json], capsys)
    assert code == 0
    res = json.loads(out_json.read_text())
    assert res["monotone"] and len(res["grid_trace"]) == 2
    assert res["value"] <= res["dual_objective"] + 1e-9


def test_divergence_command(tmp_path, capsys):
    a = write(tmp_path / "a.json", {"atoms": [[0.0], [1.0], [2.0]], "weights": [0.35, 0.35, 0.3]})
    b = write(tmp_path / "b.json", {"atoms": [[0.0], [1.0]], "weights": [0.5, 0.5]})
    code, out, _ = run(["divergence", "--phi", "burg", "--mu", a, "--mu-hat", b], capsys)
    assert code == 0
    assert line_value(out, "off-support part") == pytest.approx(0.3, abs=1e-15)
    total = line_value(out, "D_phi")
    assert total == line_value(out, "on-support part") + line_value(out, "off-support part")
    code, out, _ = run(["divergence", "--phi", "kullback-leibler", "--mu", a, "--mu-hat", b], capsys)
    assert code == 0 and "D_phi: inf" in out


def test_exit_codes(tmp_path, inst, capsys):
    # input error: unknown field
    bad = write(tmp_path / "bad.json", dict(INSTANCE, colour="red"))
    assert run(["lift", "--family", "wasserstein", "--in", bad, "--out", tmp_path / "x.json"], capsys)[0] == 2
    # missing file
    assert run(["solve", "--in", tmp_path / "missing.json"], capsys)[0] == 2
    # infeasible: Sinkhorn ball that is empty
    doc = dict(INSTANCE, reference={"atoms": [[10.0], [11.0]]}, radius=0.01)
    src = write(tmp_path / "s.json", doc)
    code, _, err = run(["lift", "--family", "sinkhorn", "--in", src, "--out", tmp_path / "y.json",
                        "--reg-epsilon", 1.0], capsys)
    assert code == 3 and "error" in err
    # unsupported conic domain is an input error
    sq = write(tmp_path / "sq.json", dict(INSTANCE, cost={"kind": "squared-euclidean", "params": {}},
                                          value_domain={"lower": [-3], "upper": [5], "constrained": True}))
    lifted = tmp_path / "l.json"
    run(["lift", "--family", "interpolated", "--in", sq, "--out", lifted], capsys)
    assert run(["emit-conic", "--in", lifted, "--out", tmp_path / "p.json"], capsys)[0] == 2
    # unknown flag: argparse usage, exit 2
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--in", inst, "--bogus"])
    assert exc.value.code == 2


def test_svm_demo_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(["svm-demo", "--seed", 7, "--out", tmp_path / name, "--radius", 0, 0.5], capsys)
        assert code == 0
        outs.append(out.replace(str(tmp_path / name), "OUT"))
    assert outs[0] == outs[1]
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "worst_case_r0p5.csv" in files and not any(f.endswith(".tmp") for f in files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "otdro.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "emit-conic" in res.stdout
    res = subprocess.run([sys.executable, "-m", "otdro.cli", "nope"], capture_output=True, text=True)
    assert res.returncode == 2
