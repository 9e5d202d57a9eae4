import csv
import json
import subprocess
import sys

import pytest

from ringsync.cli import BENCH_COLUMNS, main
from ringsync.metrics import read_samples


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_verify_ring_reports_volume(capsys):
    code, out, _ = run(capsys, "verify", "--workers", "4", "--grad-size", "1000", "--strategy", "ring")
    assert code == 0
    assert "elements sent per worker: 1500" in out and "PASS" in out


def test_verify_single_worker(capsys):
    code, out, _ = run(capsys, "verify", "--workers", "1", "--strategy", "ring")
    assert code == 0
    assert "frames per worker: 0" in out


def test_verify_zero_workers_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--workers", "0"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("strategy", ["ring", "ps"])
@pytest.mark.parametrize("transport", ["inproc", "tcp"])
def test_verify_variants(capsys, strategy, transport):
    code, out, _ = run(
        capsys, "verify", "--workers", "3", "--grad-size", "10",
        "--strategy", strategy, "--transport", transport, "--reduce", "mean",
    )
    assert code == 0, out


def test_verify_ps_reports_uplink(capsys):
    code, out, _ = run(capsys, "verify", "--workers", "4", "--grad-size", "1000", "--strategy", "ps")
    assert code == 0
    assert "server uplink elements: 4000" in out


def test_fit_predict_pipeline(tmp_path, capsys):
    samples = tmp_path / "ps.csv"
    model = tmp_path / "ps.json"
    assert main(["synth", "--model", "ps", "--T", "4223.8", "--C", "12.1", "--P", "290.8", "--out", str(samples)]) == 0
    code, out, err = run(capsys, "fit", "--input", str(samples), "--model", "ps", "--out", str(model))
    assert code == 0 and not err
    data = json.loads(model.read_text())
    assert data["valid"] is True
    assert data["T"] == pytest.approx(4223.8, rel=1e-6)
    assert data["C"] == pytest.approx(12.1, rel=1e-6)
    assert data["P"] == pytest.approx(290.8, rel=1e-6)
    for s in read_samples(samples):
        code, out, _ = run(capsys, "predict", "--model", str(model), "--n", str(s.n))
        assert code == 0
        assert float(out) == pytest.approx(s.t, rel=1e-6)


def test_fit_wrong_basis_warns(tmp_path, capsys):
    samples = tmp_path / "ring.csv"
    main(["synth", "--model", "ring", "--T", "100", "--C", "5", "--P", "10", "--out", str(samples)])
    # shift the late points down so the PS basis needs a negative slope
    rows = list(csv.reader(samples.open()))
    rows = [rows[0]] + [[n, str(100 / int(n) - 2 * int(n) + 40)] for n, _ in rows[1:]]
    with samples.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    code, out, err = run(capsys, "fit", "--input", str(samples), "--model", "ps")
    assert code == 0
    assert json.loads(out)["valid"] is False
    assert "negative parameter" in err and "C=" in err


def test_predict_ring_at_one_is_error(tmp_path, capsys):
    model = tmp_path / "ring.json"
    model.write_text(json.dumps({"architecture": "ring", "T": 4400.1, "C": 59.6, "P": 363.5}))
    code, _, err = run(capsys, "predict", "--model", str(model), "--n", "1")
    assert code != 0 and "singular" in err


def test_crossover_command(tmp_path, capsys):
    ps, ring = tmp_path / "ps.json", tmp_path / "ring.json"
    ps.write_text(json.dumps({"architecture": "ps", "T": 4223.8, "C": 12.1, "P": 290.8}))
    ring.write_text(json.dumps({"architecture": "ring", "T": 4400.1, "C": 59.6, "P": 363.5}))
    code, out, _ = run(capsys, "crossover", "--ps", str(ps), "--ring", str(ring), "--n-max", "64")
    assert code == 0 and out.strip() == "13"
    code, out, _ = run(capsys, "crossover", "--ps", str(ps), "--ring", str(ring), "--n-max", "8")
    assert out.strip() == "none"
    code, _, err = run(capsys, "crossover", "--ps", str(ring), "--ring", str(ring))
    assert code != 0


def test_malformed_inputs_name_location(tmp_path, capsys):
    bad_csv = tmp_path / "bad.csv"
    bad_csv.write_text("n,t_seconds\n2,1.0\nthree,2.0\n")
    code, _, err = run(capsys, "fit", "--input", str(bad_csv), "--model", "ps")
    assert code == 1 and "bad.csv:3" in err and "'n'" in err
    bad_json = tmp_path / "bad.json"
    bad_json.write_text('{"architecture": "ps", "T": 1}')
    code, _, err = run(capsys, "predict", "--model", str(bad_json), "--n", "2")
    assert code == 1 and "'C'" in err


def test_bench_writes_fit_ready_csv(tmp_path, capsys):
    out = tmp_path / "ring.csv"
    code, _, _ = run(
        capsys, "bench", "--strategy", "ring", "--workers-list", "1,2,3,4", "--steps", "3",
        "--compute-delay", "0.004", "--per-byte-delay", "1e-8", "--dims", "8", "--out", str(out),
    )
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == BENCH_COLUMNS
    assert [int(r["n"]) for r in rows] == [1, 2, 3, 4]
    assert rows[0]["elements_sent"] == "0"
    fitted = tmp_path / "ring.json"
    code, _, _ = run(capsys, "fit", "--input", str(out), "--model", "ring", "--out", str(fitted))
    assert code == 0 and fitted.exists()


def test_bench_zero_delay_and_determinism(tmp_path, capsys):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert main(["bench", "--strategy", "ps", "--workers-list", "2,4", "--steps", "2", "--dims", "4", "--out", str(p)]) == 0
    capsys.readouterr()
    a, b = (list(csv.DictReader(p.open())) for p in paths)
    assert [r["elements_sent"] for r in a] == [r["elements_sent"] for r in b] == ["16", "32"]
    assert all(float(r["t2"]) < 1.0 for r in a)


def test_bench_unwritable_output(capsys):
    code, _, err = run(capsys, "bench", "--workers-list", "2", "--steps", "1", "--out", "/nonexistent/dir/x.csv")
    assert code == 1 and "cannot write" in err


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "ringsync", "verify", "--workers", "2", "--grad-size", "5"],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0 and "PASS" in proc.stdout
