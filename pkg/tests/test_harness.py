import json

import pytest

from acst.config import Config
from acst.harness import (PEER_LOAD_COLUMNS, PhaseFailed, ScenarioInvalid, canonical_scenario,
                          effective_config, emit_report, emit_sweep, join_succeeded, load_scenario,
                          provider_shares, run_scenario, sweep, sweep_table, with_parameter)


@pytest.fixture(scope="module")
def canonical_report():
    return run_scenario(canonical_scenario())


def small(**changes):
    base = {"file": {"size": 700_000, "seed": 2}, "peers": {"count": 3, "bootstrap": 0},
            "phases": [{"op": "join"}, {"op": "add", "peer": 0}, {"op": "cluster_pin", "peer": 0},
                       {"op": "await_pinned"}, {"op": "delete", "peer": 2}, {"op": "get", "peer": 2}]}
    base.update(changes)
    return canonical_scenario(**base)


def test_canonical_scenario_passes(canonical_report):
    r = canonical_report
    assert r["ok"] and r["failure"] is None
    assert [p["op"] for p in r["phases"]] == ["join", "add", "cluster_pin", "await_pinned", "delete", "get"]
    assert all(p["ok"] for p in r["phases"])
    assert r["phases"][-1]["detail"]["verified"] is True
    assert r["phases"][1]["detail"]["blocks"] == 28
    assert r["conservation"]["ok"]
    assert r["config"]["seed"] == r["seed"] == 7
    statuses = {row["status"] for row in r["pin_timeline"] if row["time_ms"] > 0}
    assert "Pinned" in statuses


def test_report_pure_function_of_scenario_and_seed():
    a = run_scenario(small(), 3)
    b = run_scenario(small(), 3)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    c = run_scenario(small(), 4)
    assert c["seed"] == 4 and c["scenario_digest"] == a["scenario_digest"]


def test_get_on_undeclared_peer_invalid():
    with pytest.raises(ScenarioInvalid) as info:
        small(phases=[{"op": "join"}, {"op": "get", "peer": 9}])
    assert "peer 9" in str(info.value)


@pytest.mark.parametrize("mutation, field", [
    ({"bogus": 1}, "bogus"),
    ({"peers": {"count": 0}}, "peers.count"),
    ({"links": {"bandwidth_kbps": -5}}, "links.bandwidth_kbps"),
    ({"phases": []}, "phases"),
    ({"phases": [{"op": "teleport"}]}, "phases.0"),
    ({"config": {"window": 0}}, "scenario"),
])
def test_scenario_validation(mutation, field):
    with pytest.raises(ScenarioInvalid) as info:
        small(**mutation)
    assert info.value.field.startswith(field)


def test_load_scenario_reports_json_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"peers": {"count": 2},\n "phases": [}')
    with pytest.raises(ScenarioInvalid) as info:
        load_scenario(path)
    assert "line 2" in str(info.value)


def test_missing_root_fails_phase():
    scenario = small(phases=[{"op": "join"}, {"op": "get", "peer": 1}])
    with pytest.raises(PhaseFailed) as info:
        run_scenario(scenario)
    assert info.value.report is not None and not info.value.report["ok"]
    report = run_scenario(scenario, raise_on_failure=False)
    assert report["failure"]["phase"].endswith("get")


def test_join_failure_on_slow_links():
    report = run_scenario(small(links={"bandwidth_kbps": 50, "delay_ms": 10}), raise_on_failure=False)
    assert not join_succeeded(report)
    assert report["conservation"]["ok"]


def test_effective_config_layers():
    scenario = small(config={"window": 4, "want_timeout_s": 30})
    cfg = effective_config(scenario, Config(window=8, stall_timeout_s=90), {"window": 2, "chunk_size": None})
    assert (cfg.window, cfg.want_timeout_s, cfg.stall_timeout_s) == (2, 30, 90)


def test_with_parameter():
    assert with_parameter(small(), "delay", 500).links.delay_ms == 500
    assert with_parameter(small(), "bandwidth", 99).links.bandwidth_kbps == 99
    with pytest.raises(ScenarioInvalid):
        with_parameter(small(), "loss", 1)


def test_single_value_sweep_matches_run():
    scenario = small()
    [(value, row)] = sweep(scenario, "delay", [10], seed=5)
    assert value == 10
    assert row == run_scenario(with_parameter(scenario, "delay", 10), 5, raise_on_failure=False)


def test_bandwidth_sweep_threshold_and_failures_as_rows():
    rows = sweep(small(), "bandwidth", [50, 99, 101, 200], jobs=2)
    table = sweep_table(rows)
    assert [r["joined"] for r in table["rows"]] == [False, False, True, True]
    assert table["join_threshold"] == 101
    assert [r["seed"] for r in table["rows"]] == [7, 8, 9, 10]


def test_sweep_rejects_empty_values():
    with pytest.raises(ScenarioInvalid):
        sweep(small(), "delay", [])


def test_provider_shares_sum_to_one(canonical_report):
    shares = provider_shares(canonical_report)
    assert set(shares) <= {"0", "1", "2", "4"}
    assert sum(shares.values()) == pytest.approx(1.0)


def test_emit_report_files(canonical_report, tmp_path):
    paths = emit_report(canonical_report, tmp_path / "out")
    assert {p.name for p in paths} == {"report.json", "peer_load.csv"}
    lines = (tmp_path / "out" / "peer_load.csv").read_text().splitlines()
    assert lines[0].split(",") == PEER_LOAD_COLUMNS
    assert len(lines) == 6
    rows = [dict(zip(PEER_LOAD_COLUMNS, map(int, line.split(",")))) for line in lines[1:]]
    assert sum(r["bytes_sent"] for r in rows) == sum(r["bytes_received"] for r in rows)
    assert all(r["stored_bytes"] > 0 for r in rows)
    first = {p.name: p.read_bytes() for p in paths}
    again = emit_report(canonical_report, tmp_path / "out")
    assert {p.name: p.read_bytes() for p in again} == first
    assert json.loads(first["report.json"])["ok"] is True


def test_emit_report_with_trace(tmp_path):
    report = run_scenario(small(), trace=True)
    paths = emit_report(report, tmp_path)
    trace = (tmp_path / "trace.log").read_text().splitlines()
    assert trace[0] == "time_us,seq,kind,src,dst,cid,wire_size"
    assert len(trace) - 1 == report["events_dispatched"]
    assert "_trace" not in json.loads((tmp_path / "report.json").read_text())
    assert len(paths) == 3


def test_emit_sweep(tmp_path):
    table = sweep_table(sweep(small(), "delay", [10, 100]))
    emit_sweep(table, tmp_path, "delay")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("value,seed,ok") and len(lines) == 3
    assert json.loads((tmp_path / "sweep.json").read_text())["param"] == "delay"


def test_emit_report_surfaces_path_on_error(tmp_path, canonical_report):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError) as info:
        emit_report(canonical_report, blocker / "sub")
    assert str(blocker) in str(info.value)


def test_reactivate_and_wait_phases():
    scenario = small(peers={"count": 4, "bootstrap": 0}, phases=[
        {"op": "join"}, {"op": "deactivate", "peer": 3, "wait": True},
        {"op": "reactivate", "peer": 3}, {"op": "wait", "seconds": 5},
        {"op": "add", "peer": 0}, {"op": "cluster_pin", "peer": 0}, {"op": "await_pinned"}])
    report = run_scenario(scenario)
    statuses = report["phases"][-1]["detail"]["statuses"]
    assert statuses == {str(p): "Pinned" for p in range(4)}


def test_bundled_scenarios_validate():
    from pathlib import Path
    for path in sorted(Path(__file__).parent.parent.joinpath("scenarios").glob("*.json")):
        load_scenario(path)
