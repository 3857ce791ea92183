import csv
import json
import math

import numpy as np
import pytest

from qrngcert import cli
from qrngcert.certify import CoherentResult, worker_count
from qrngcert.cli import EXIT_INFEASIBLE, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main, write_distribution_csv

REPORT_KEYS = {
    "p_g", "h_min", "p_g_finite", "h_min_finite", "epsilon", "r", "mode", "fingerprint", "samples_per_state", "meta",
}


def report(path):
    data = json.loads(path.read_text(encoding="utf-8"))
    assert set(data) == REPORT_KEYS
    assert data["p_g_finite"] >= data["p_g"] and data["h_min_finite"] <= data["h_min"]
    assert 0 < data["p_g"] <= 1 and 0 < data["p_g_finite"] <= 1
    assert data["h_min"] == pytest.approx(-math.log2(data["p_g"]), abs=1e-12)
    return data


def test_model_certify_two_state(tmp_path):
    out = tmp_path / "m"
    code = main(["certify", "--amplitudes", "0", "0.3", "--snr-db", "15", "--delta", "4", "--R", "1.5",
                 "--cutoff", "6", "--out", str(out)])
    assert code == EXIT_OK
    text = (out / "report.json").read_text()
    assert text.startswith("{\n  ")
    data = report(out / "report.json")
    assert list(data) == sorted(data)
    assert 0.30 <= data["h_min"] <= 0.50
    assert data["samples_per_state"] == [1_000_000, 1_000_000]


def test_deterministic_csv_gives_zero_entropy(tmp_path):
    counts = np.zeros((2, 4), dtype=int)
    counts[:, 0] = 10**6
    csv_path = write_distribution_csv(tmp_path / "d.csv", [0.0, 0.3], counts)
    out = tmp_path / "o"
    assert main(["certify", "--source", "csv", "--csv", str(csv_path), "--delta", "2", "--cutoff", "3",
                 "--out", str(out)]) == EXIT_OK
    data = report(out / "report.json")
    assert data["h_min"] == pytest.approx(0.0, abs=1e-6)


def test_infeasible_exit_code(tmp_path):
    out = tmp_path / "i"
    code = main(["certify", "--amplitudes", "0", "3", "--delta", "4", "--R", "5", "--snr-db", "10",
                 "--cutoff", "2", "--out", str(out)])
    assert code == EXIT_INFEASIBLE
    assert json.loads((out / "status.json").read_text())["status"] == "infeasible"


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "certify_coherent", lambda *a, **k: CoherentResult(None, "unknown"))
    out = tmp_path / "n"
    assert main(["certify", "--cutoff", "2", "--out", str(out)]) == EXIT_NUMERICAL
    assert json.loads((out / "status.json").read_text())["status"] == "unknown"


def test_usage_errors(tmp_path, capsys):
    assert main(["certify", "--axis", "delta=1,2", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["certify", "--source", "trc", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["sweep", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["certify", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    assert "configuration error" in capsys.readouterr().err


def test_tomography_mode(tmp_path):
    out = tmp_path / "t"
    assert main(["certify", "--mode", "tomo", "--bins-kind", "equal-probability", "--delta", "2",
                 "--snr-db", "inf", "--cutoff", "4", "--out", str(out)]) == EXIT_OK
    data = report(out / "report.json")
    assert data["mode"] == "tomography"
    assert data["h_min"] == pytest.approx(0.8548, abs=1e-3)


def test_sweep_rows_follow_grid(tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", "--axis", "snr_db=5,15", "--axis", "delta=1,2,3", "--cutoff", "3",
                 "--workers", "2", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 6
    assert [(float(r["snr_db"]), int(r["delta"])) for r in rows] == [
        (5.0, 1), (5.0, 2), (5.0, 3), (15.0, 1), (15.0, 2), (15.0, 3)]
    for snr in ("5.0", "15.0"):
        h = [float(r["h_min"]) for r in rows if r["snr_db"] == snr]
        assert all(b >= a - 1e-4 for a, b in zip(h, h[1:]))


def test_audit_csv(tmp_path):
    out = tmp_path / "a"
    assert main(["audit", "--amplitudes", "0", "0.5", "--delta", "2", "--cutoff", "4",
                 "--r-values", "0.4", "1", "1.1", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "audit.csv").open()))
    assert [r["status"] for r in rows][0] == "infeasible"
    assert float(rows[2]["h_min"]) <= float(rows[1]["h_min"]) + 1e-6


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    args = ["simulate", "--amplitudes", "0", "0.2", "0.4", "0.6", "--snr-db", "15", "--seed", "4",
            "--set", "simulate.n_samples=300000", "--out", str(out)]
    assert main(args) == EXIT_OK
    again = tmp_path_factory.mktemp("sim2")
    assert main(args[:-1] + [str(again)]) == EXIT_OK
    return out, again


def test_simulate_is_seeded(simulated):
    a, b = simulated
    for name in ("shot.trc", "probe_0.trc", "probe_3.trc"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_inspect_finds_modulation(simulated, tmp_path):
    sim, _ = simulated
    assert main(["inspect", str(sim / "probe_3.trc"), "--out", str(tmp_path)]) == EXIT_OK
    stats = json.loads((tmp_path / "probe_3_stats.json").read_text())
    assert stats["peak_frequency_hz"] == pytest.approx(6e6, abs=50e6 / 4096)
    assert stats["tone_snr_db"] >= 10
    rows = list(csv.reader((tmp_path / "probe_3_psd.csv").open()))
    assert rows[0] == ["frequency_hz", "power"]


def test_trace_round_trip_against_model(simulated, tmp_path):
    sim, _ = simulated
    traces = [str(sim / f"probe_{i}.trc") for i in range(4)]
    common = ["--cutoff", "4", "--delta", "3", "--R", "1.5", "--snr-db", "15"]
    reports = {}
    for r in ("1.02", "1.1"):
        out = tmp_path / r
        assert main(["certify", "--source", "trc", "--shot", str(sim / "shot.trc"), "--traces", *traces,
                     "--r", r, *common, "--out", str(out)]) == EXIT_OK
        reports[r] = report(out / "report.json")
        assert (out / "distribution.csv").exists() and (out / "histogram_3.csv").exists()
    assert reports["1.1"]["h_min"] <= reports["1.02"]["h_min"] + 1e-6
    n = reports["1.02"]["samples_per_state"][0]
    out = tmp_path / "model"
    assert main(["certify", "--amplitudes", "0", "0.2", "0.4", "0.6", "--samples", str(n), *common,
                 "--r", "1.02", "--out", str(out)]) == EXIT_OK
    model = report(out / "report.json")
    trace = reports["1.02"]
    assert model["p_g"] <= trace["p_g_finite"]
    assert abs(trace["p_g_finite"] - model["p_g_finite"]) <= trace["meta"]["finite_size_penalty"]


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("ENTROPY_CERT_THREADS", "2")
    assert worker_count(8) == 2
    assert worker_count(None) == 2
    assert worker_count(1) == 1
