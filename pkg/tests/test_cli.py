import json
import subprocess
import sys
from pathlib import Path

import pytest

from acst.cli import main
from acst.content_store import DiskBlockStore, cid_of

SCENARIOS = Path(__file__).parent.parent / "scenarios"
EMPTY_LEAF = "L:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def store(tmp_path):
    return tmp_path / "store"


def test_add_empty_file_prints_empty_leaf(capsys, tmp_path, store):
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    code, out, _ = run(capsys, "add", empty, "--store", store)
    assert code == 0 and out.strip() == EMPTY_LEAF == str(cid_of(b""))


def test_add_twice_dedups(capsys, tmp_path, store):
    src = tmp_path / "data"
    src.write_bytes(bytes(range(256)) * 3000)
    _, first, err1 = run(capsys, "add", src, "--store", store, "--chunk-size", 65536)
    _, second, err2 = run(capsys, "add", src, "--store", store, "--chunk-size", 65536)
    assert first == second
    assert "stored 0 new block(s)" in err2 and "stored 0" not in err1


def test_add_missing_path_exits_2(capsys, tmp_path, store):
    code, out, err = run(capsys, "add", tmp_path / "nope", "--store", store)
    assert code == 2 and out == "" and "cannot read" in err


def test_get_round_trip(capsys, tmp_path, store):
    src = tmp_path / "data"
    src.write_bytes(b"hello world" * 50_000)
    _, root, _ = run(capsys, "add", src, "--store", store)
    dest = tmp_path / "copy"
    code, _, _ = run(capsys, "get", root.strip(), dest, "--store", store)
    assert code == 0 and dest.read_bytes() == src.read_bytes()


def test_get_missing_block_exits_3_listing_cids(capsys, tmp_path, store):
    src = tmp_path / "data"
    src.write_bytes(bytes(600_000))
    _, root, _ = run(capsys, "add", src, "--store", store)
    disk = DiskBlockStore(store)
    leaf = next(c for c in disk.walk(cid_from(root)) if c.kind.name == "LEAF")
    disk.delete_block(leaf)
    code, _, err = run(capsys, "get", root.strip(), tmp_path / "out", "--store", store)
    assert code == 3 and str(leaf) in err


def cid_from(text):
    from acst.content_store import ContentId
    return ContentId.parse(text.strip())


def test_get_bad_root_exits_2(capsys, tmp_path, store):
    code, _, _ = run(capsys, "get", "not-a-cid", tmp_path / "out", "--store", store)
    assert code == 2


def test_pin_unpin_gc(capsys, tmp_path, store):
    src = tmp_path / "data"
    src.write_bytes(bytes(range(256)) * 2000)
    _, root, _ = run(capsys, "add", src, "--store", store)
    root = root.strip()
    assert run(capsys, "gc", "--store", store)[1].strip() == "0"
    assert run(capsys, "unpin", root, "--store", store)[0] == 0
    assert run(capsys, "gc", "--store", store)[1].strip() == "3"
    assert run(capsys, "pin", root, "--store", store)[0] == 3


def test_sim_run_writes_reports(capsys, tmp_path):
    out = tmp_path / "r"
    code, stdout, _ = run(capsys, "sim", "run", SCENARIOS / "canonical.json", "--seed", 7, "--out", out)
    assert code == 0
    assert (out / "report.json").exists() and (out / "peer_load.csv").exists()
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 7 and report["config"]["seed"] == 7
    assert str(out / "report.json") in stdout


def test_sim_run_trace_and_plot(capsys, tmp_path):
    out = tmp_path / "r"
    code, _, _ = run(capsys, "sim", "run", SCENARIOS / "canonical.json", "--out", out, "--trace", "--plot")
    assert code == 0
    assert (out / "trace.log").stat().st_size > 0
    assert (out / "peer_load.png").read_bytes()[:4] == b"\x89PNG"


def test_sim_run_failure_exits_4_with_reports(capsys, tmp_path):
    scenario = json.loads((SCENARIOS / "canonical.json").read_text())
    scenario["links"]["bandwidth_kbps"] = 50
    path = tmp_path / "slow.json"
    path.write_text(json.dumps(scenario))
    code, _, err = run(capsys, "sim", "run", path, "--out", tmp_path / "r")
    assert code == 4 and "join" in err
    assert json.loads((tmp_path / "r" / "report.json").read_text())["ok"] is False


def test_sim_malformed_json_exit_2_with_position(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "peers": {"count": 2,}\n}')
    code, _, err = run(capsys, "sim", "run", path, "--out", tmp_path / "r")
    assert code == 2 and "line 2" in err


def test_sim_invalid_scenario_exit_2(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"peers": {"count": 2}, "phases": [{"op": "get", "peer": 5}]}))
    assert run(capsys, "sim", "run", path, "--out", tmp_path / "r")[0] == 2


def test_sim_sweep_threshold_table(capsys, tmp_path):
    out = tmp_path / "sw"
    code, stdout, err = run(capsys, "sim", "sweep", SCENARIOS / "canonical.json", "--param", "bandwidth",
                            "--values", "50,99,101,200", "--out", out, "--plot")
    assert code == 4  # the two slow rows fail their join phase
    lines = stdout.strip().splitlines()
    assert lines[0].startswith("value,") and len(lines) == 5
    assert "101 kbit/s" in err
    assert json.loads((out / "sweep.json").read_text())["join_threshold"] == 101
    assert (out / "sweep.png").exists() and (out / "bandwidth_101" / "report.json").exists()


def test_sim_sweep_needs_values(capsys, tmp_path):
    code, _, _ = run(capsys, "sim", "sweep", SCENARIOS / "slow_peer.json", "--out", tmp_path)
    assert code == 2
    code, _, _ = run(capsys, "sim", "sweep", SCENARIOS / "canonical.json", "--param", "delay",
                     "--values", "ten", "--out", tmp_path)
    assert code == 2


def test_config_precedence(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"window": 4, "stall_timeout_s": 120}))
    monkeypatch.setenv("ACST_CONFIG", str(cfg))
    out = tmp_path / "r"
    run(capsys, "sim", "run", SCENARIOS / "canonical.json", "--out", out, "--window", 8)
    config = json.loads((out / "report.json").read_text())["config"]
    assert config["window"] == 8 and config["stall_timeout_s"] == 120


def test_bad_config_file_exit_2(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"no_such_knob": 1}))
    src = tmp_path / "data"
    src.write_bytes(b"x")
    assert run(capsys, "add", src, "--config", cfg, "--store", tmp_path / "s")[0] == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "acst", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("acst ")
