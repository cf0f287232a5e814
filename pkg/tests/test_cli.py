import csv
import json
import subprocess
import sys

import pytest

from underflow.cli import main
from underflow.fixtures import bundled


def _files(out):
    return sorted(p.name for p in out.iterdir())


def test_verify_all_two_state(tmp_path):
    assert main(["--spec", "two_state", "--cmd", "verify-all", "--out", str(tmp_path)]) == 0
    tag = bundled("two_state").spec_hash()
    man = json.loads((tmp_path / f"manifest-verify-all-{tag}.json").read_text())
    assert man["status"] == 0 and man["summary"]["failed"] == []
    assert (tmp_path / f"verify-all-{tag}.csv").exists()


def test_two_rx_rows(tmp_path):
    rc = main(["--spec", "example2", "--cmd", "two-rx", "--grid-step", "0.1",
               "--stride", "1", "--out", str(tmp_path)])
    assert rc == 0
    tag = bundled("example2").spec_hash()
    with open(tmp_path / f"two-rx-{tag}.csv") as fh:
        rows = list(csv.DictReader(fh))
    hit = [r for r in rows if r["s1"] == "0" and r["s2"] == "0"
           and float(r["x1"]) == pytest.approx(0.2) and float(r["x2"]) == pytest.approx(0.2)]
    assert len(hit) == 1
    assert float(hit[0]["y1"]) >= 1.0 - 1e-9 and float(hit[0]["y2"]) >= 1.0 - 1e-9


@pytest.mark.parametrize("cmd", ["solve-finite", "thresholds", "simulate", "bounds"])
def test_csv_outputs_idempotent(tmp_path, cmd):
    args = ["--spec", "three_state_iid", "--cmd", cmd, "--episodes", "200"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    csvs = [n for n in _files(a) if n.endswith(".csv")]
    assert csvs and csvs == [n for n in _files(b) if n.endswith(".csv")]
    for n in csvs:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_malformed_spec(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"receivers": []')
    assert main(["--spec", str(bad), "--cmd", "solve-finite", "--out", str(tmp_path)]) == 2
    assert main(["--spec", str(tmp_path / "missing.json"), "--cmd", "solve-finite"]) == 2
    assert main(["--spec", "two_state", "--cmd", "nope"]) == 2


def test_misaligned_grid(tmp_path):
    assert main(["--spec", "two_state", "--cmd", "solve-finite", "--grid-step", "0.3",
                 "--out", str(tmp_path)]) == 2


def test_memory_cap(tmp_path):
    assert main(["--spec", "example2", "--cmd", "two-rx", "--grid-step", "0.001",
                 "--out", str(tmp_path)]) == 3


def test_infinite_needs_discount(tmp_path):
    assert main(["--spec", "two_state", "--cmd", "infinite", "--out", str(tmp_path)]) == 2
    assert main(["--spec", "two_state", "--cmd", "infinite", "--infinite-alpha", "0.9",
                 "--out", str(tmp_path)]) == 0


def test_environment_defaults(tmp_path, monkeypatch):
    monkeypatch.setenv("UNDERFLOW_SPEC", "two_state")
    monkeypatch.setenv("UNDERFLOW_CMD", "thresholds")
    monkeypatch.setenv("UNDERFLOW_OUT", str(tmp_path))
    assert main([]) == 0
    assert any(n.startswith("thresholds-") for n in _files(tmp_path))
    monkeypatch.setenv("UNDERFLOW_SEED", "x")
    assert main([]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "underflow", "--spec", "two_state",
                        "--cmd", "thresholds", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
