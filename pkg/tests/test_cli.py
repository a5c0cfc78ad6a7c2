import hashlib
import json

import numpy as np
import pytest

from qcurv import cli
from qcurv.blowup import synthetic_blowup
from qcurv.energy import PrescribedCurvature
from qcurv.grid import GridSpec, read_snapshot, write_snapshot
from qcurv.minimizer import SolverError


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_selftest_prints_invariant_table(tmp_path, capsys):
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "parseval" in text and "FAIL" not in text
    assert text.count("PASS") >= 8


def test_solve_min_constant_curvature_gives_zero_field(tmp_path):
    cfg = _write(tmp_path, "[grid]\nn = 8\n[model]\nf = constant:-1\nq0 = -1\n")
    out = tmp_path / "run"
    assert cli.main(["solve-min", "--config", cfg, "--out", str(out)]) == 0
    u, lam = read_snapshot(out / "solution.qc4f")
    assert np.abs(u.values).max() == 0.0
    man = _manifest(out)
    assert man["status"] == "ok" and man["constants"]["Q0"] == -1.0
    for entry in man["files"]:
        digest = hashlib.sha256((out / entry["file"]).read_bytes()).hexdigest()
        assert digest == entry["sha256"]


def test_appendix_oracle_prints_closed_form_match(tmp_path, capsys):
    lam = float(np.exp(-10.0))
    cfg = _write(tmp_path, f"[lambda]\nappendix = {lam!r}\n")
    assert cli.main(["appendix-oracle", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    line = capsys.readouterr().out.strip()
    closed = -8 * np.pi**2 * np.log(2) + 4 * np.pi**2 * 10
    assert f"{closed:.12g}"[:12] in line
    err = float(line.split("rel.err")[1].split()[0])
    assert err <= 1e-8


def test_outputs_are_deterministic_across_jobs(tmp_path):
    args = ["appendix-oracle", "--lambda-min", "1e-6", "--lambda-max", "1e-2", "--lambda-count", "4"]
    assert cli.main(args + ["--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a = (tmp_path / "a" / "appendix.csv").read_bytes()
    assert a == (tmp_path / "b" / "appendix.csv").read_bytes()
    lams = [float(r.split(",")[0]) for r in a.decode().splitlines()[1:]]
    assert lams == sorted(lams, reverse=True) and len(lams) == 4


def test_config_errors_are_listed_together(tmp_path, capsys):
    cfg = _write(tmp_path, "[grid]\nn = 9\n[model]\nq0 = 0.5\nalphas = 1, 2, -1, 1\n[cutoff]\na0 = 2.5\n"
                           "[lambda]\nbranch = 0.1, 0.3\n")
    assert cli.main(["continue-branch", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    for key in ("grid.n", "model.q0", "model.alphas", "cutoff.a0", "lambda.branch"):
        assert key in err
    assert not (tmp_path / "x").exists()


def test_lambda_override_key(tmp_path):
    flat = cli.load_config(None)
    flat["lambda.branch"] = "0.5, 1.0"
    flat["mountainpass.lambda"] = "1.0"
    with pytest.raises(cli.ConfigError):
        cli.validate(flat)
    flat["lambda.allow_beyond_quarter"] = "true"
    exp = cli.validate(flat)
    assert exp.branch_lams == [0.5, 1.0]


@pytest.mark.parametrize("argv", [["appendix-oracle", "--lambda-min", "1e-4"],
                                  ["appendix-oracle", "--lambda-min", "0", "--lambda-max", "1e-2",
                                   "--lambda-count", "3"],
                                  ["selftest", "--jobs", "0"]])
def test_bad_flags_exit_2(tmp_path, argv):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    def boom(exp, out, args):
        raise SolverError("forced")
    monkeypatch.setitem(cli.COMMANDS, "selftest", boom)
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 3
    assert _manifest(tmp_path)["status"].startswith("numerical failure")


def test_continue_branch_small_grid(tmp_path):
    cfg = _write(tmp_path, "[grid]\nn = 8\n[lambda]\nbranch = 0.1, 0.2\n")
    out = tmp_path / "br"
    assert cli.main(["continue-branch", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "branch" / "branch.csv").read_text().splitlines()
    assert len(rows) == 4
    assert len(_manifest(out)["files"]) == 4


def test_comparison_scan(tmp_path, capsys):
    cfg = _write(tmp_path, "[grid]\nn = 8\n[lambda]\ncomparison = 1e-3, 1e-6\n")
    out = tmp_path / "cs"
    assert cli.main(["comparison-scan", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "comparison.csv").read_text().splitlines()
    assert rows[0].startswith("lambda,L,M1") and len(rows) == 3
    assert all(r.split(",")[-2] == "1" for r in rows[1:])


def test_blowup_analyze_on_snapshot(tmp_path, capsys):
    spec = GridSpec(32)
    u = synthetic_blowup(4.0, "a", PrescribedCurvature((1, 1, 1, 1)), spec, r=0.3)
    snap = write_snapshot(tmp_path / "bubble.qc4f", u, 4.0)
    out = tmp_path / "bu"
    assert cli.main(["blowup-analyze", "--input", str(snap), "--out", str(out)]) == 0
    assert (out / "peaks_bubble.csv").exists() and (out / "profile_bubble_0.csv").exists()
    assert "case a" in capsys.readouterr().out
