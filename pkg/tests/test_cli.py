import csv
import io
import json
import math
import os
import subprocess
import sys

import pytest

from ssr_lab import cli
from ssr_lab.cli import ESTIMATE_FIELDS, LIMIT_FIELDS, format_value, main


def _write_cfg(tmp_path, name="c.json", **over):
    doc = {
        "spot0": 1.0,
        "maturity": 1.0,
        "curve": {"type": "flat", "v0": 0.04},
        "factors": [{"rho": 0.6, "kernel": {"type": "exp", "a": 1.0, "b": 1.0}}],
        "epsilon": 0.3,
    }
    doc.update(over)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SMALL = ["--paths", "4000", "--steps", "16", "--antithetic", "--seed", "7"]


def test_estimate_csv_schema_and_values(tmp_path):
    out = tmp_path / "e.csv"
    assert main(["estimate", "--config", "two_factor_bergomi", *SMALL, "--out", str(out)]) == 0
    text = out.read_text()
    assert text.endswith("\n") and "\r" not in text
    assert text.splitlines()[0] == ",".join(ESTIMATE_FIELDS)
    (row,) = _rows(out)
    assert row["status"] == "ok"
    assert math.isfinite(float(row["R"])) and float(row["R_se"]) > 0
    assert int(row["n_paths"]) == 4000 and int(row["seed"]) == 7


def test_estimate_json_mirrors_csv(tmp_path):
    c, j = tmp_path / "e.csv", tmp_path / "e.json"
    assert main(["estimate", "--config", "flat_exp", *SMALL, "--out", str(c)]) == 0
    assert main(["estimate", "--config", "flat_exp", *SMALL, "--out", str(j), "--format", "json"]) == 0
    (row,) = _rows(c)
    (obj,) = json.loads(j.read_text())
    assert list(obj) == list(ESTIMATE_FIELDS)
    for k in ("X", "Y", "R", "digital_prob"):
        assert float(row[k]) == obj[k]


def test_byte_identical_for_any_worker_count(tmp_path, monkeypatch):
    outs = []
    for w in ("1", "3"):
        out = tmp_path / f"w{w}.csv"
        assert main(["estimate", "--config", "rough_h01", *SMALL, "--workers", w, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    monkeypatch.setenv("SSRLAB_WORKERS", "2")
    env_out = tmp_path / "env.csv"
    assert main(["estimate", "--config", "rough_h01", *SMALL, "--out", str(env_out)]) == 0
    assert outs[0] == outs[1] == env_out.read_bytes()


def test_zero_epsilon_record(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, epsilon=0.0)
    out = tmp_path / "z.csv"
    assert main(["estimate", "--config", cfg, *SMALL, "--out", str(out)]) == 0
    (row,) = _rows(out)
    assert float(row["X"]) == 0.0
    assert row["warning"] == "degenerate_denominator" and row["R_se"] == "inf"
    assert "degenerate_denominator" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path, capsys):
    out = tmp_path / "never.csv"
    missing = str(tmp_path / "missing.json")
    assert main(["estimate", "--config", missing, *SMALL, "--out", str(out)]) == 2
    assert "missing.json" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize(
    "args",
    [
        ["--paths", "4001", "--antithetic"],
        ["--steps", "4"],
        ["--paths", "1"],
        ["--workers", "zero"],
    ],
)
def test_manifest_validation(tmp_path, args):
    assert main(["estimate", "--config", "flat_exp", *args, "--out", str(tmp_path / "x.csv")]) == 2


def test_invalid_config_exit_code(tmp_path):
    cfg = _write_cfg(
        tmp_path,
        factors=[{"rho": 0.8, "kernel": {"type": "exp", "a": 1, "b": 1}},
                 {"rho": 0.7, "kernel": {"type": "exp", "a": 1, "b": 1}}],
    )
    assert main(["limit", "--config", cfg, "--out", str(tmp_path / "l.csv")]) == 2


def test_limit_rough(tmp_path):
    out = tmp_path / "l.csv"
    assert main(["limit", "--config", "rough_h01", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == ",".join(LIMIT_FIELDS)
    rows = {r["limit"]: r for r in _rows(out)}
    assert float(rows["short_maturity"]["value"]) == pytest.approx(1.6, abs=1e-15)
    # flat curve with a power kernel: both limits equal H + 3/2
    assert float(rows["small_vol"]["value"]) == pytest.approx(1.6, abs=1e-8)
    for k in "ABCD":
        assert rows["small_vol"][k] != ""


def test_limit_cancellation_is_data(tmp_path):
    cfg = _write_cfg(
        tmp_path,
        factors=[{"rho": 0.5, "kernel": {"type": "exp", "a": 1, "b": 1}},
                 {"rho": -0.5, "kernel": {"type": "exp", "a": 1, "b": 1}}],
    )
    out = tmp_path / "l.json"
    assert main(["limit", "--config", cfg, "--out", str(out), "--format", "json"]) == 0
    rows = {r["limit"]: r for r in json.loads(out.read_text())}
    assert rows["short_maturity"]["status"] == "hypothesis_not_satisfied"
    assert rows["small_vol"]["status"] == "hypothesis_not_satisfied"


def test_limit_mixed_power_exponents(tmp_path):
    cfg = _write_cfg(
        tmp_path,
        factors=[{"rho": 0.3, "kernel": {"type": "power", "a": 1, "H": 0.1}},
                 {"rho": 0.3, "kernel": {"type": "power", "a": 1, "H": 0.2}}],
    )
    out = tmp_path / "l.csv"
    assert main(["limit", "--config", cfg, "--out", str(out)]) == 0
    assert {r["status"] for r in _rows(out)} == {"unsupported_kernel_mix"}


def test_sweep_eps_sorted_with_limit_row(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep-eps", "--config", "flat_exp", *SMALL, "--values", "0.4,0.2", "--out", str(out)]) == 0
    rows = _rows(out)
    assert [float(r["epsilon"]) for r in rows] == [0.0, 0.2, 0.4]
    assert rows[0]["row_type"] == "limit"
    assert float(rows[0]["R"]) == pytest.approx(math.e - 1, abs=1e-12)


def test_single_value_sweep_matches_estimate(tmp_path):
    s, e = tmp_path / "s.csv", tmp_path / "e.csv"
    assert main(["sweep-eps", "--config", "flat_exp", *SMALL, "--values", "0.05", "--out", str(s)]) == 0
    assert main(["estimate", "--config", "flat_exp", *SMALL, "--out", str(e)]) == 0
    sweep_rows = _rows(s)
    assert len(sweep_rows) == 2
    assert sweep_rows[1] == _rows(e)[0]


def test_sweep_T(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["sweep-T", "--config", "rough_h01", *SMALL, "--values", "0.1,0.05", "--out", str(out)]) == 0
    rows = _rows(out)
    assert [float(r["maturity"]) for r in rows] == [0.0, 0.05, 0.1]
    assert float(rows[0]["R"]) == pytest.approx(1.6)


def test_sweep_rejects_bad_schedule(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep-eps", "--config", "flat_exp", *SMALL, "--values", "0.2,0.2", "--out", str(out)]) == 2


def test_selftest_deterministic_and_injected_failure(tmp_path, capsys):
    a, b, c = (tmp_path / f"{n}.csv" for n in "abc")
    assert main(["selftest", "--seed", "11", "--out", str(a)]) == 0
    assert main(["selftest", "--seed", "11", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert {r["status"] for r in _rows(a)} == {"pass"}
    capsys.readouterr()
    assert main(["selftest", "--seed", "11", "--inject-failure", "asymptotics", "--out", str(c)]) == 1
    assert "failing suites: asymptotics" in capsys.readouterr().err
    status = {r["suite"]: r["status"] for r in _rows(c)}
    assert status["asymptotics"] == "fail"
    assert sum(s == "fail" for s in status.values()) == 1


def test_dump_paths(tmp_path):
    from ssr_lab.sim_engine import read_path_dump

    dump = tmp_path / "p.bin"
    out = tmp_path / "e.csv"
    assert main(["estimate", "--config", "flat_exp", *SMALL, "--dump-paths", str(dump), "--out", str(out)]) == 0
    d = read_path_dump(dump)
    assert d["n_paths"] == 4000 and d["dB"].shape == (4000, 16)


def test_format_value_round_trips():
    for v in (0.1, 1 / 3, 1e-300, -2.5e17, math.pi):
        assert float(format_value(v)) == v
    assert format_value(math.inf) == "inf" and format_value(None) == ""


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.csv"

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(cli.os, "replace", boom)
    with pytest.raises(OSError):
        cli.write_atomic(str(target), "a,b\n")
    assert not target.exists()
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".ssrlab-")]


def test_console_script_entry_point(tmp_path):
    out = tmp_path / "l.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "ssr_lab.cli", "limit", "--config", "flat_exp", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "small_vol" in out.read_text()


def test_stdout_output(capsys):
    assert main(["limit", "--config", "demo:flat_exp"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 2
