"""
Declarative scenario runner, parameter sweeps and report emission.

A scenario is one JSON document: peers, links, a generated test file, an
ordered list of phases, a seed and optional config overrides. Running it
on a fresh :class:`~acst.cluster.Cluster` yields a report that is a pure
function of (scenario, seed).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import random
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Annotated, Any, Iterable, Literal, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .cluster import Cluster, Membership, PinState, SwarmKey
from .config import Config, ConfigError
from .content_store import assemble
from .exchange import ExchangeError, TransferState
from .netsim import LinkParams, seconds

log = logging.getLogger(__name__)

PEER_LOAD_COLUMNS = ["peer_id", "msgs_sent", "msgs_received", "bytes_sent", "bytes_received",
                     "blocks_served", "duplicates", "stored_bytes"]
SWEEP_COLUMNS = ["value", "seed", "ok", "joined", "failed_phase", "get_ms", "pin_ms",
                 "bytes_sent", "bytes_received", "shares"]

# generous ceiling on any single blocking phase, in simulated seconds
PHASE_HORIZON_S = 24 * 3600.0


class ScenarioInvalid(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class PhaseFailed(RuntimeError):
    def __init__(self, phase: str, cause: str, report: dict | None = None):
        self.phase = phase
        self.cause = cause
        self.report = report
        super().__init__(f"phase {phase} failed: {cause}")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PeerOverride(_Model):
    peer: int = Field(ge=0)
    bandwidth_kbps: float | None = Field(default=None, gt=0)
    delay_ms: float | None = Field(default=None, ge=0)
    downlink_kbps: float | None = Field(default=None, gt=0)
    key: Literal["shared", "wrong"] = "shared"


class PeersSpec(_Model):
    count: int = Field(ge=1)
    bootstrap: int = Field(default=0, ge=0)
    downlink_kbps: float | None = Field(default=None, gt=0)
    overrides: list[PeerOverride] = []


class LinkOverride(_Model):
    src: int = Field(ge=0)
    dst: int = Field(ge=0)
    bandwidth_kbps: float | None = Field(default=None, gt=0)
    delay_ms: float | None = Field(default=None, ge=0)


class LinksSpec(_Model):
    bandwidth_kbps: float = Field(default=1000.0, gt=0)
    delay_ms: float = Field(default=10.0, ge=0)
    overrides: list[LinkOverride] = []


class FileSpec(_Model):
    size: int = Field(default=6_930_000, ge=0)
    seed: int = 0


class JoinPhase(_Model):
    op: Literal["join"]


class AddPhase(_Model):
    op: Literal["add"]
    peer: int


class ClusterPinPhase(_Model):
    op: Literal["cluster_pin"]
    peer: int


class AwaitPinnedPhase(_Model):
    op: Literal["await_pinned"]


class DeletePhase(_Model):
    op: Literal["delete"]
    peer: int


class GetPhase(_Model):
    op: Literal["get"]
    peer: int


class DeactivatePhase(_Model):
    op: Literal["deactivate"]
    peer: int
    wait: bool = True


class ReactivatePhase(_Model):
    op: Literal["reactivate"]
    peer: int


class SetLinkPhase(_Model):
    op: Literal["set_link"]
    peer: int
    bandwidth_kbps: float | None = Field(default=None, gt=0)
    delay_ms: float | None = Field(default=None, ge=0)


class WaitPhase(_Model):
    op: Literal["wait"]
    seconds: float = Field(gt=0)


Phase = Annotated[
    Union[JoinPhase, AddPhase, ClusterPinPhase, AwaitPinnedPhase, DeletePhase, GetPhase,
          DeactivatePhase, ReactivatePhase, SetLinkPhase, WaitPhase],
    Field(discriminator="op"),
]


class SweepSpec(_Model):
    param: Literal["bandwidth", "delay"]
    values: list[float] = Field(min_length=1)


class Scenario(_Model):
    name: str = "scenario"
    peers: PeersSpec
    links: LinksSpec = LinksSpec()
    file: FileSpec = FileSpec()
    phases: list[Phase] = Field(min_length=1)
    seed: int = 0
    config: dict[str, Any] = {}
    sweep: SweepSpec | None = None

    @model_validator(mode="after")
    def _check_references(self):
        n = self.peers.count
        if self.peers.bootstrap >= n:
            raise ValueError(f"bootstrap peer {self.peers.bootstrap} is not declared")
        for i, ov in enumerate(self.peers.overrides):
            if ov.peer >= n:
                raise ValueError(f"peers.overrides[{i}]: peer {ov.peer} is not declared")
        for i, ov in enumerate(self.links.overrides):
            if ov.src >= n or ov.dst >= n or ov.src == ov.dst:
                raise ValueError(f"links.overrides[{i}]: bad pair {ov.src}->{ov.dst}")
        for i, phase in enumerate(self.phases):
            peer = getattr(phase, "peer", None)
            if peer is not None and not 0 <= peer < n:
                raise ValueError(f"phases[{i}] ({phase.op}): peer {peer} is not declared")
        try:
            Config().merged(self.config)
        except (ConfigError, TypeError) as exc:
            raise ValueError(f"config: {exc}") from exc
        return self

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.model_dump(mode="json")).encode()).hexdigest()


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def load_scenario(source: str | os.PathLike | dict) -> Scenario:
    """Parse and validate a scenario from a path, JSON text or a dict."""
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioInvalid(f"line {exc.lineno} column {exc.colno}", exc.msg) from exc
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(part) for part in err["loc"]) or "scenario"
        raise ScenarioInvalid(loc, err["msg"]) from exc


def canonical_scenario(**changes: Any) -> Scenario:
    """The Add→ClusterPin→AwaitPinned→Delete→Get run on five 1 Mbit/s, 10 ms peers."""
    data = {
        "name": "canonical",
        "peers": {"count": 5, "bootstrap": 0},
        "links": {"bandwidth_kbps": 1000, "delay_ms": 10},
        "file": {"size": 6_930_000, "seed": 1},
        "phases": [
            {"op": "join"},
            {"op": "add", "peer": 0},
            {"op": "cluster_pin", "peer": 0},
            {"op": "await_pinned"},
            {"op": "delete", "peer": 3},
            {"op": "get", "peer": 3},
        ],
        "seed": 7,
    }
    data.update(changes)
    return load_scenario(data)


def generate_file(spec: FileSpec) -> bytes:
    return random.Random(spec.seed).randbytes(spec.size)


def effective_config(scenario: Scenario, base: Config | None = None,
                     overrides: dict[str, Any] | None = None) -> Config:
    config = (base or Config()).merged(scenario.config)
    return config.merged(overrides)


class _Run:
    """State of one scenario execution."""

    def __init__(self, scenario: Scenario, seed: int, config: Config, trace: bool):
        self.scenario = scenario
        self.seed = seed
        self.config = config
        self.cluster = Cluster(config, seed=seed, trace=trace,
                               key=SwarmKey.derive(f"acst-swarm-{seed}"))
        self.data = generate_file(scenario.file)
        self.root = None
        self.pin = None
        self.phases: list[dict] = []
        self.wrong_key: set[int] = set()
        self._build()

    def _build(self) -> None:
        sc = self.scenario
        overrides = {ov.peer: ov for ov in sc.peers.overrides}
        intruder_key = SwarmKey.derive(f"intruder-{self.seed}")
        for peer in range(sc.peers.count):
            ov = overrides.get(peer)
            key = None
            if ov is not None and ov.key == "wrong":
                key = intruder_key
                self.wrong_key.add(peer)
            downlink = ov.downlink_kbps if ov is not None and ov.downlink_kbps else sc.peers.downlink_kbps
            self.cluster.add_peer(peer, key=key, downlink_kbps=downlink)
        self.cluster.full_mesh(sc.links.bandwidth_kbps, sc.links.delay_ms)
        for ov in sc.peers.overrides:
            if ov.bandwidth_kbps is not None or ov.delay_ms is not None:
                self.cluster.set_uplink(ov.peer, ov.bandwidth_kbps, ov.delay_ms)
        for ov in sc.links.overrides:
            current = self.cluster.sim.link(ov.src, ov.dst)
            self.cluster.sim.set_link(ov.src, ov.dst, LinkParams(
                ov.bandwidth_kbps or current.bandwidth_kbps,
                current.delay_ms if ov.delay_ms is None else ov.delay_ms))

    @property
    def now_ms(self) -> float:
        return self.cluster.sim.now / 1000

    def _served(self) -> dict[int, int]:
        return {p: n.exchange.ledger.total().blocks_sent for p, n in sorted(self.cluster.nodes.items())}

    def execute(self) -> None:
        for index, phase in enumerate(self.scenario.phases):
            start = self.cluster.sim.now
            served_before = self._served()
            record = {"index": index, "op": phase.op, "peer": getattr(phase, "peer", None),
                      "start_ms": start / 1000}
            self.phases.append(record)
            try:
                detail = getattr(self, f"_phase_{phase.op}")(phase)
                ok, cause = True, None
            except PhaseFailed as exc:
                detail, ok, cause = getattr(exc, "detail", {}), False, exc.cause
            end = self.cluster.sim.now
            served_after = self._served()
            record.update({
                "end_ms": end / 1000,
                "duration_ms": (end - start) / 1000,
                "ok": ok,
                "cause": cause,
                "detail": detail,
                "blocks_served": {str(p): served_after[p] - served_before[p] for p in served_after},
            })
            if not ok:
                raise PhaseFailed(f"{index}:{phase.op}", cause)

    def _fail(self, phase, cause: str, detail: dict | None = None):
        exc = PhaseFailed(phase.op, cause)
        exc.detail = detail or {}
        raise exc

    def _node(self, peer: int):
        return self.cluster.nodes[peer]

    def _phase_join(self, phase):
        boot = self.scenario.peers.bootstrap
        states = self.cluster.form(boot, horizon_s=PHASE_HORIZON_S)
        detail = {"states": {str(p): s.value for p, s in states.items()},
                  "join_ms": {str(p): (n.joined_at or 0) / 1000
                              for p, n in sorted(self.cluster.nodes.items()) if n.joined}}
        bad = [p for p, s in states.items()
               if (p in self.wrong_key) == (s is Membership.JOINED)]
        if bad:
            self._fail(phase, f"unexpected join outcome for peer(s) {bad}", detail)
        return detail

    def _phase_add(self, phase):
        node = self._node(phase.peer)
        root, added = node.store.add_bytes(self.data, self.config.chunk_size, self.config.fanout)
        node.store.pin(root)
        node.local_pins[root] = PinState.PINNED
        self.root = root
        return {"root": str(root), "file_size": len(self.data), "blocks": len(node.store.closure(root)),
                "new_blocks": added}

    def _require_root(self, phase):
        if self.root is None:
            self._fail(phase, "no file has been added")

    def _phase_cluster_pin(self, phase):
        self._require_root(phase)
        node = self._node(phase.peer)
        if not node.joined:
            self._fail(phase, f"origin peer {phase.peer} is not joined")
        try:
            self.pin = node.cluster_pin(self.root)
        except Exception as exc:
            self._fail(phase, f"{type(exc).__name__}: {exc}")
        return {"origin": phase.peer, "peers": len(self.pin.statuses)}

    def _phase_await_pinned(self, phase):
        if self.pin is None:
            self._fail(phase, "no cluster pin issued")
        pin = self.pin
        done = self.cluster.run_until(lambda: pin.done, PHASE_HORIZON_S)
        self.cluster.settle()
        detail = {"statuses": {str(p): s.value for p, s in pin.snapshot().items()},
                  "complete": pin.complete}
        if not done:
            self._fail(phase, "cluster pin did not finish", detail)
        return detail

    def _phase_delete(self, phase):
        self._require_root(phase)
        node = self._node(phase.peer)
        evicted = node.delete(self.root)
        remaining = sum(1 for cid in node.store.walk(self.root) if cid in node.store)
        if remaining:
            self._fail(phase, f"{remaining} block(s) survived deletion")
        return {"evicted": evicted}

    def _phase_get(self, phase):
        self._require_root(phase)
        node = self._node(phase.peer)
        try:
            transfer = node.get(self.root)
        except Exception as exc:
            self._fail(phase, f"{type(exc).__name__}: {exc}")
        self.cluster.run_until(lambda: transfer.done, PHASE_HORIZON_S)
        detail = {"blocks_received": transfer.blocks_received,
                  "served_by": {str(p): n for p, n in sorted(transfer.served_by.items())},
                  "transfer_ms": (transfer.duration_us or 0) / 1000}
        if transfer.state is not TransferState.DONE:
            cause = transfer.error or ExchangeError("transfer did not finish")
            self._fail(phase, f"{type(cause).__name__}: {cause}", detail)
        if assemble(node.store, self.root) != self.data:
            self._fail(phase, "reassembled bytes differ from the original", detail)
        detail["verified"] = True
        return detail

    def _phase_deactivate(self, phase):
        cluster = self.cluster
        cluster.deactivate(phase.peer)
        if phase.wait:
            horizon = self.config.liveness_timeout_s + 2 * self.config.provider_interval_s
            cluster.run_until(
                lambda: all(phase.peer not in cluster[p].members for p in cluster.joined_peers()),
                horizon)
        cluster.settle()
        return {"observed_by": [p for p in cluster.joined_peers() if phase.peer not in cluster[p].members]}

    def _phase_reactivate(self, phase):
        cluster = self.cluster
        node = cluster[phase.peer]
        cluster.reactivate(phase.peer)
        node.join(self.scenario.peers.bootstrap)
        cluster.run_until(lambda: node.state is not Membership.HANDSHAKING, PHASE_HORIZON_S)
        cluster.settle()
        if not node.joined:
            self._fail(phase, f"rejoin ended {node.state.value}")
        return {"state": node.state.value}

    def _phase_set_link(self, phase):
        self.cluster.set_uplink(phase.peer, phase.bandwidth_kbps, phase.delay_ms)
        return {}

    def _phase_wait(self, phase):
        self.cluster.run_for(phase.seconds)
        return {}

    def report(self, failure: PhaseFailed | None = None) -> dict:
        cluster = self.cluster
        sim = cluster.sim
        sim.run_until_network_idle(sim.now + seconds(PHASE_HORIZON_S))
        peers = []
        for peer, node in sorted(cluster.nodes.items()):
            st = sim.stats[peer]
            ledger = node.exchange.ledger.total()
            peers.append({
                "peer_id": peer,
                "msgs_sent": st.msgs_sent,
                "msgs_received": st.msgs_received,
                "bytes_sent": st.bytes_sent,
                "bytes_received": st.bytes_received,
                "blocks_served": ledger.blocks_sent,
                "duplicates": ledger.duplicate_blocks_received,
                "stored_bytes": node.store.stored_bytes,
                "stored_blocks": len(node.store),
                "drops": st.drops,
                "unauthenticated_drops": node.unauthenticated_drops,
                "invalid_blocks": ledger.invalid_blocks_received,
                "block_payload_bytes_received": st.payload_bytes_received["Block"],
                "announcements": node.announcements_sent,
                "membership": node.state.value,
            })
        sent, received = sim.totals()
        timeline = []
        if self.pin is not None:
            timeline = [{"peer": p, "root": str(self.pin.root), "status": s.value, "time_ms": t / 1000}
                        for t, p, s in self.pin.timeline]
        return {
            "scenario": self.scenario.name,
            "scenario_digest": self.scenario.digest(),
            "seed": self.seed,
            "config": self.config.to_dict(),
            "ok": failure is None,
            "failure": None if failure is None else {"phase": failure.phase, "cause": failure.cause},
            "root": None if self.root is None else str(self.root),
            "file_size": len(self.data),
            "phases": self.phases,
            "peers": peers,
            "pin_timeline": timeline,
            "conservation": {"bytes_sent": sent, "bytes_received": received, "ok": sent == received},
            "sim_time_ms": sim.now / 1000,
            "events_dispatched": sim.dispatched,
        }


def run_scenario(scenario: Scenario, seed: int | None = None, *, config: Config | None = None,
                 trace: bool = False, raise_on_failure: bool = True) -> dict:
    """Execute ``scenario`` on a fresh simulator and return its metrics report.

    On a failing phase the partial report is attached to the raised
    :class:`PhaseFailed`, unless ``raise_on_failure`` is false, in which case
    it is returned with ``ok`` set to false.
    """
    seed = scenario.seed if seed is None else seed
    cfg = config or effective_config(scenario)
    run = _Run(scenario, seed, cfg.merged({"seed": seed}), trace)
    failure = None
    try:
        run.execute()
    except PhaseFailed as exc:
        failure = exc
    report = run.report(failure)
    if trace:
        report["_trace"] = run.cluster.sim.trace
    if failure is not None and raise_on_failure:
        failure.report = report
        raise failure
    return report


def with_parameter(scenario: Scenario, param: str, value: float) -> Scenario:
    data = copy.deepcopy(scenario.model_dump(mode="json"))
    if param == "bandwidth":
        data["links"]["bandwidth_kbps"] = value
    elif param == "delay":
        data["links"]["delay_ms"] = value
    else:
        raise ScenarioInvalid("param", f"unknown sweep parameter {param!r}")
    return load_scenario(data)


def _sweep_row(args) -> tuple[float, dict]:
    scenario, param, value, seed, config = args
    variant = with_parameter(scenario, param, value)
    report = run_scenario(variant, seed, config=config, raise_on_failure=False)
    return value, report


def sweep(scenario: Scenario, param: str, values: Sequence[float], *, seed: int | None = None,
          config: Config | None = None, jobs: int = 1) -> list[tuple[float, dict]]:
    """Run one scenario per value with seeds ``seed + index``; failures become rows."""
    if not values:
        raise ScenarioInvalid("values", "sweep needs at least one value")
    base = scenario.seed if seed is None else seed
    cfg = config or effective_config(scenario)
    tasks = [(scenario, param, float(v), base + i, cfg) for i, v in enumerate(values)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_row, tasks))
    return [_sweep_row(t) for t in tasks]


def _phase(report: dict, op: str) -> dict | None:
    return next((p for p in report["phases"] if p["op"] == op), None)


def join_succeeded(report: dict) -> bool:
    phase = _phase(report, "join")
    return bool(phase and phase["ok"])


def provider_shares(report: dict) -> dict[str, float]:
    """Fraction of Get-phase blocks each other peer served."""
    phase = _phase(report, "get")
    if phase is None:
        return {}
    served = {p: n for p, n in phase["blocks_served"].items() if n}
    total = sum(served.values())
    return {p: n / total for p, n in sorted(served.items(), key=lambda kv: int(kv[0]))} if total else {}


def sweep_table(rows: Iterable[tuple[float, dict]]) -> dict:
    table = []
    threshold = None
    for value, report in rows:
        joined = join_succeeded(report)
        get = _phase(report, "get")
        pin = _phase(report, "await_pinned")
        table.append({
            "value": value,
            "seed": report["seed"],
            "ok": report["ok"],
            "joined": joined,
            "failed_phase": report["failure"]["phase"] if report["failure"] else "",
            "get_ms": get["duration_ms"] if get and get["ok"] else None,
            "pin_ms": pin["duration_ms"] if pin and pin["ok"] else None,
            "bytes_sent": report["conservation"]["bytes_sent"],
            "bytes_received": report["conservation"]["bytes_received"],
            "shares": provider_shares(report),
        })
        if joined and (threshold is None or value < threshold):
            threshold = value
    return {"rows": table, "join_threshold": threshold}


def peer_load_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PEER_LOAD_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in report["peers"]:
        writer.writerow(row)
    return buf.getvalue()


def sweep_csv(table: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in table["rows"]:
        out = dict(row)
        out["shares"] = ";".join(f"{p}={s:.4f}" for p, s in row["shares"].items())
        out["get_ms"] = "" if row["get_ms"] is None else row["get_ms"]
        out["pin_ms"] = "" if row["pin_ms"] is None else row["pin_ms"]
        writer.writerow(out)
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
    return path


def emit_report(report: dict, out_dir: str | os.PathLike,
                formats: Iterable[str] = ("json", "csv")) -> list[Path]:
    """Write ``report.json`` and/or ``peer_load.csv`` (and ``trace.log`` if traced)."""
    out = Path(out_dir)
    written = []
    body = {k: v for k, v in report.items() if not k.startswith("_")}
    formats = set(formats)
    if "json" in formats:
        written.append(_write(out / "report.json", json.dumps(body, indent=2, sort_keys=True) + "\n"))
    if "csv" in formats:
        written.append(_write(out / "peer_load.csv", peer_load_csv(report)))
    trace = report.get("_trace")
    if trace is not None:
        written.append(_write(out / "trace.log", "time_us,seq,kind,src,dst,cid,wire_size\n"
                              + "".join(line + "\n" for line in trace)))
    return written


def emit_sweep(table: dict, out_dir: str | os.PathLike, param: str,
               formats: Iterable[str] = ("json", "csv")) -> list[Path]:
    out = Path(out_dir)
    written = []
    formats = set(formats)
    if "json" in formats:
        written.append(_write(out / "sweep.json",
                              json.dumps({"param": param, **table}, indent=2, sort_keys=True) + "\n"))
    if "csv" in formats:
        written.append(_write(out / "sweep.csv", sweep_csv(table)))
    return written
