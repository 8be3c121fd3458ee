import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from dephase_forge.cli import np_sweep, paper_cp_sequence, run
from dephase_forge.dynamics import PulseSequence
from dephase_forge.fluctuator import FluctuatorModel
from dephase_forge.pulse_opt import carr_purcell
from dephase_forge.spectral import FrequencyBand, TargetSpectrum, fit_spectrum


def _run(*argv):
    return run([str(a) for a in argv])


def test_fit_spectrum_writes_report(tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert _run("fit-spectrum", "--fixture-target=one-over-omega", "--n-states=4", "--out", out) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("fit-spectrum max_rel_dev=") and line.endswith(str(out))
    d = json.loads(out.read_text())
    assert set(d) >= {"lambdas", "bs", "residual", "max_rel_dev", "grid", "converged"}
    assert d["lambdas"][0] == 0.0 and len(d["lambdas"]) == 4
    gm = 1 / 30
    _, rep = fit_spectrum(TargetSpectrum("one-over-omega"), 4, FrequencyBand(gm / 10, gm * 10, 64))
    assert d["max_rel_dev"] == rep.max_rel_dev
    assert d["max_rel_dev"] == pytest.approx(0.345, abs=1e-3)


def test_fit_non_convergence_exit_status(tmp_path):
    out = tmp_path / "fit.json"
    assert _run("fit-spectrum", "--n-states", 3, "--n-starts", 1, "--maxiter", 2, "--out", out) == 2
    assert out.exists()


def test_validation_failure_is_machine_readable(tmp_path, capsys):
    assert _run("simulate", "--config", tmp_path / "missing.json") == 1
    err = json.loads(capsys.readouterr().err)
    assert err["command"] == "simulate" and "does not exist" in err["message"]
    assert _run("simulate", "--target", "cnot", "--out", tmp_path / "x.json") == 1
    assert _run("fit-spectrum", "--n-states", 1, "--out", tmp_path / "x.json") == 1
    assert _run("optimize", "--offset-grid", "[0.5]", "--n-starts", 1, "--out", tmp_path / "x.json") == 1


def test_sweep_zero_row_matches_simulate(tmp_path):
    sim = tmp_path / "sim.json"
    assert _run("simulate", "--fixture", "paper", "--out", sim) == 0
    s = json.loads(sim.read_text())
    sweep = tmp_path / "sweep.csv"
    assert _run("sweep-offset", "--fixture", "paper", "--sequence", "paper-cp", "--out", sweep) == 0
    rows = list(csv.DictReader(io.StringIO(sweep.read_text())))
    assert len(rows) == 41
    zero = [r for r in rows if float(r["eta_os"]) == 0.0]
    assert zero[0]["worst_error"] == f"{s['worst_error']:.12g}"
    assert zero[0]["avg_error"] == f"{s['avg_error']:.12g}"
    js = tmp_path / "sweep.json"
    assert _run("sweep-offset", "--fixture", "paper", "--offsets", "[0.0]", "--out", js) == 0
    d = json.loads(js.read_text())
    assert d["worst_error"][0] == s["worst_error"]
    assert s["worst_error"] == pytest.approx(3.2907e-5, rel=1e-3)


def test_shipped_sequence_is_the_cp_baseline():
    assert paper_cp_sequence() == carr_purcell(7, 4 * math.pi / 7)


def test_ideal_cp_sweep_is_flat(tmp_path):
    out = tmp_path / "ideal.csv"
    assert _run("sweep-offset", "--sequence", "ideal-cp", "--out", out) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    w = [float(r["worst_error"]) for r in rows]
    assert max(w) - min(w) < 1e-6


def test_simulate_with_monte_carlo(tmp_path):
    out = tmp_path / "mc.json"
    assert _run("simulate", "--n-traj", 500, "--seed", 3, "--out", out) == 0
    d = json.loads(out.read_text())
    assert len(d["monte_carlo"]["stderr"]) == 9


def test_synthesize_roundtrip(tmp_path):
    fit = tmp_path / "fit.json"
    assert _run("fit-spectrum", "--n-states", 3, "--n-starts", 4, "--scale", 1e-6, "--out", fit) == 0
    fl = tmp_path / "fl.json"
    assert _run("synthesize", "--fit", fit, "--out", fl) == 0
    f = FluctuatorModel.load(fl)
    d = json.loads(fit.read_text())
    w, _ = f.gamma.eigensystem()
    np.testing.assert_allclose(w, d["lambdas"], rtol=1e-6, atol=1e-12)
    # the synthesized model is a valid input to the other commands
    assert _run("simulate", "--fluctuator", fl, "--out", tmp_path / "s.json") == 0
    fx = tmp_path / "fixture.json"
    assert _run("synthesize", "--fixture", "paper", "--out", fx) == 0
    assert FluctuatorModel.load(fx).n == 4


def test_baseline_cp_and_t2(tmp_path):
    cp = tmp_path / "cp.json"
    assert _run("baseline-cp", "--out", cp) == 0
    assert PulseSequence.load(cp) == carr_purcell(7, 4 * math.pi / 7)
    t2 = tmp_path / "t2.json"
    assert _run("estimate-t2", "--epsilon", 1.1e-3, "--out", t2) == 0
    value = json.loads(t2.read_text())["t2"]
    assert value == pytest.approx(5.137e4, rel=1e-3)
    cal = tmp_path / "cal.json"
    assert _run("estimate-t2", "--target-t2", value, "--out", cal) == 0
    assert json.loads(cal.read_text())["epsilon"] == pytest.approx(1.1e-3)


def test_optimize_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"opt{k}.json"
        assert _run("optimize", "--fixture", "paper", "--target", "hadamard", "--n-pulses", 3,
                    "--n-starts", 1, "--maxiter", 30, "--seed", 4, "--out", out) == 0
        outs.append(out)
    seqs = [o.with_name(o.stem + "_sequence.json") for o in outs]
    assert seqs[0].read_bytes() == seqs[1].read_bytes()
    a, b = (json.loads(o.read_text()) for o in outs)
    assert a == b
    seq = PulseSequence.load(seqs[0])
    assert seq.satisfies_duty() and seq.total_time == pytest.approx(6 * math.pi, rel=1e-12)


def test_threads_do_not_change_results(tmp_path):
    paths = []
    for threads in (1, 2):
        out = tmp_path / f"t{threads}.json"
        assert _run("optimize", "--target", "hadamard", "--n-pulses", 2, "--n-starts", 2, "--maxiter", 20,
                    "--threads", threads, "--out", out) == 0
        paths.append(out.with_name(out.stem + "_sequence.json"))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_np_sweep_single_row_and_repeatable(tmp_path):
    cfg = {"target": "hadamard", "n_pulses_list": [2], "n_starts": 1, "maxiter": 20}
    text = np_sweep(cfg)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["n_pulses", "worst_case_error"] and len(rows) == 2
    assert np_sweep(cfg) == text


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epsilon": 2e-3, "sequence": "paper-cp", "out": str(tmp_path / "a.json")}))
    assert _run("simulate", "--config", cfg) == 0
    assert _run("simulate", "--config", cfg, "--epsilon", 1e-3, "--out", tmp_path / "b.json") == 0
    a = json.loads((tmp_path / "a.json").read_text())["worst_error"]
    b = json.loads((tmp_path / "b.json").read_text())["worst_error"]
    assert a == pytest.approx(4 * b, rel=0.05)  # error is quadratic in the noise scale


def test_console_script_entry_point(tmp_path):
    out = tmp_path / "sim.json"
    proc = subprocess.run(
        [sys.executable, "-m", "dephase_forge.cli", "simulate", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("simulate worst_error=")
