"""
Private cluster membership, cluster-wide pinning and provider announcements.

A new peer joins by sending a handshake payload with a key proof to the
bootstrap node; the bootstrap answers with the peer table and tells every
member about the newcomer. Only members exchange blocks, pin commands and
announcements: anything else arriving from a non-member is dropped.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import random
from dataclasses import dataclass, field
from typing import Any

from .config import Config
from .content_store import BlockStore, ContentId, MissingBlock
from .exchange import BLOCK, CANCEL, WANT, Exchange, ExchangeError, Transfer, TransferState
from .netsim import LinkParams, Message, Simulator, ms, seconds

HELLO = "Hello"
WELCOME = "Welcome"
REJECT = "Reject"
PEER_JOINED = "PeerJoined"
PIN_CMD = "PinCmd"
PIN_STATUS = "PinStatus"
PROVIDE = "Provide"

ID_BYTES = 32


class ClusterError(Exception):
    pass


class UnknownPin(ClusterError):
    pass


class NotJoined(ClusterError):
    pass


class Membership(enum.Enum):
    UNJOINED = "Unjoined"
    HANDSHAKING = "Handshaking"
    JOINED = "Joined"
    REJECTED = "Rejected"
    TIMED_OUT = "TimedOut"
    DEACTIVATED = "Deactivated"


class PinState(enum.Enum):
    QUEUED = "Queued"
    PINNING = "Pinning"
    PINNED = "Pinned"
    FAILED = "Failed"

    @property
    def rank(self) -> int:
        return _PIN_RANK[self]

    @property
    def terminal(self) -> bool:
        return self in (PinState.PINNED, PinState.FAILED)


_PIN_RANK = {PinState.QUEUED: 0, PinState.PINNING: 1, PinState.PINNED: 2, PinState.FAILED: 2}


@dataclass(frozen=True)
class SwarmKey:
    secret: bytes

    def __post_init__(self):
        if len(self.secret) != 32:
            raise ValueError("swarm key must be 32 bytes")

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "SwarmKey":
        if rng is None:
            return cls(os.urandom(32))
        return cls(rng.randbytes(32))

    @classmethod
    def derive(cls, label: str) -> "SwarmKey":
        return cls(hashlib.sha256(label.encode()).digest())

    def proof(self, peer: int, sent_at: int) -> bytes:
        return hmac.new(self.secret, f"{peer}:{sent_at}".encode(), hashlib.sha256).digest()


@dataclass
class ClusterPin:
    """Origin-side record of one cluster pin and each member's status."""

    root: ContentId
    origin: int
    issued_at: int
    statuses: dict[int, PinState] = field(default_factory=dict)
    timeline: list[tuple[int, int, PinState]] = field(default_factory=list)
    members: set[int] = field(default_factory=set)

    def advance(self, peer: int, state: PinState, now: int) -> bool:
        """Move ``peer`` forward to ``state``; backward or sideways moves are ignored."""
        current = self.statuses.get(peer)
        if current is not None and (current.terminal or state.rank <= current.rank):
            return False
        self.statuses[peer] = state
        self.timeline.append((now, peer, state))
        return True

    @property
    def done(self) -> bool:
        return all(s.terminal for s in self.statuses.values())

    @property
    def complete(self) -> bool:
        joined = [p for p in self.statuses if p in self.members]
        return all(self.statuses[p] is PinState.PINNED for p in joined)

    def snapshot(self) -> dict[int, PinState]:
        return dict(sorted(self.statuses.items()))


def control_message(kind: str, src: int, dst: int, config: Config, ids: int = 0,
                    body: Any = None, wire_size: int | None = None) -> Message:
    size = config.header_bytes + ID_BYTES * ids if wire_size is None else wire_size
    return Message(kind, src, dst, size, body=body)


class Node:
    """One simulated cluster peer: store, exchange engine and membership state."""

    def __init__(self, peer_id: int, sim: Simulator, config: Config, key: SwarmKey):
        self.id = peer_id
        self.sim = sim
        self.config = config
        self.key = key
        self.store = BlockStore(config.max_block_bytes)
        self.exchange = Exchange(self)
        self.state = Membership.UNJOINED
        self.members: dict[int, int] = {}
        self.announced: dict[int, set[ContentId]] = {}
        self.pin_hints: dict[ContentId, set[int]] = {}
        self.cluster_pins: dict[ContentId, ClusterPin] = {}
        self.local_pins: dict[ContentId, PinState] = {}
        self.bootstrap: int | None = None
        self.joined_at: int | None = None
        self.unauthenticated_drops = 0
        self.announcements_sent = 0
        self._hello_sent_at: int | None = None
        self._epoch = 0

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.state.value})"

    # plumbing

    @property
    def now(self) -> int:
        return self.sim.now

    @property
    def rng(self) -> random.Random:
        return self.sim.rng

    @property
    def active(self) -> bool:
        return self.sim.active.get(self.id, False)

    @property
    def joined(self) -> bool:
        return self.state is Membership.JOINED

    def send(self, msg: Message):
        if not self.active:
            return None
        return self.sim.transmit(msg)

    def timer(self, delay_us: int, tag: tuple) -> None:
        self.sim.schedule(delay_us, self.id, (self._epoch, tag))

    def broadcast(self, kind: str, ids: int = 0, body: Any = None) -> None:
        for peer in sorted(self.members):
            self.send(control_message(kind, self.id, peer, self.config, ids, body))

    def holders_of(self, root: ContentId) -> set[int]:
        holders = {p for p, roots in self.announced.items() if root in roots}
        holders |= self.pin_hints.get(root, set())
        if self.store.pins and root in self.store.pins:
            holders.add(self.id)
        return {p for p in holders if p in self.members or p == self.id}

    # membership

    def start_cluster(self) -> None:
        """Become the founding (bootstrap) member."""
        self._become_joined(self.id)

    def join(self, bootstrap: int) -> None:
        """Start the swarm handshake with ``bootstrap``."""
        if self.joined:
            return
        self.state = Membership.HANDSHAKING
        self.bootstrap = bootstrap
        self._hello_sent_at = self.now
        body = {"proof": self.key.proof(self.id, self.now), "sent_at": self.now}
        self.send(control_message(HELLO, self.id, bootstrap, self.config, body=body,
                                  wire_size=self.config.handshake_bytes))
        self.timer(ms(self.config.handshake_timeout_ms), ("handshake_timeout",))

    def _become_joined(self, bootstrap: int) -> None:
        self.state = Membership.JOINED
        self.bootstrap = bootstrap
        self.joined_at = self.now
        self.timer(seconds(self.config.provider_interval_s), ("provide",))

    def _on_hello(self, msg: Message) -> None:
        if not self.joined:
            return
        body = msg.body
        expected = self.key.proof(msg.src, body["sent_at"])
        if not hmac.compare_digest(expected, body["proof"]):
            self.send(control_message(REJECT, self.id, msg.src, self.config))
            return
        if self.now - body["sent_at"] > ms(self.config.handshake_timeout_ms):
            return
        newcomer = msg.src
        others = sorted(p for p in self.members if p != newcomer)
        self.members[newcomer] = self.now
        table = sorted([self.id, *others])
        self.send(control_message(WELCOME, self.id, newcomer, self.config, ids=len(table),
                                  body={"peers": table}))
        for peer in others:
            self.send(control_message(PEER_JOINED, self.id, peer, self.config, ids=1,
                                      body={"peer": newcomer}))

    def _on_welcome(self, msg: Message) -> None:
        if self.state is not Membership.HANDSHAKING or msg.src != self.bootstrap:
            return
        if self.now - self._hello_sent_at > ms(self.config.handshake_timeout_ms):
            return
        self.members = {p: self.now for p in msg.body["peers"] if p != self.id}
        self._become_joined(msg.src)

    def _on_reject(self, msg: Message) -> None:
        if self.state is Membership.HANDSHAKING and msg.src == self.bootstrap:
            self.state = Membership.REJECTED

    def drop_member(self, peer: int) -> None:
        if self.members.pop(peer, None) is None:
            return
        self.announced.pop(peer, None)
        for hinted in self.pin_hints.values():
            hinted.discard(peer)
        for pin in self.cluster_pins.values():
            pin.members.discard(peer)
            if peer in pin.statuses:
                pin.advance(peer, PinState.FAILED, self.now)
        self.exchange.provider_dropped(peer)

    def deactivate(self) -> None:
        self.sim.set_peer_active(self.id, False)
        self.state = Membership.DEACTIVATED
        self._epoch += 1
        self.exchange.reset()

    def reactivate(self) -> None:
        """Bring the peer back online; it must handshake again to rejoin."""
        self.sim.set_peer_active(self.id, True)
        self._epoch += 1
        self.state = Membership.UNJOINED
        self.members.clear()
        self.announced.clear()
        self.pin_hints.clear()

    # providing

    def announce(self) -> None:
        roots = sorted(self.store.pins, key=str)
        self.broadcast(PROVIDE, ids=len(roots), body={"roots": roots})
        self.announcements_sent += 1

    def provider_tick(self) -> None:
        if not self.joined:
            return
        self.announce()
        limit = seconds(self.config.liveness_timeout_s)
        for peer, last_seen in sorted(self.members.items()):
            if self.now - last_seen > limit:
                self.drop_member(peer)
        self.timer(seconds(self.config.provider_interval_s), ("provide",))

    # pinning

    def add(self, data: bytes) -> ContentId:
        root, _ = self.store.add_bytes(data, self.config.chunk_size, self.config.fanout)
        self.store.pin(root)
        self.local_pins[root] = PinState.PINNED
        return root

    def cluster_pin(self, root: ContentId) -> ClusterPin:
        if not self.joined:
            raise NotJoined(f"peer {self.id} is not a cluster member")
        self.store.pin(root)
        self.local_pins[root] = PinState.PINNED
        pin = ClusterPin(root, self.id, self.now, members=set(self.members) | {self.id})
        pin.advance(self.id, PinState.PINNED, self.now)
        for peer in sorted(self.members):
            pin.advance(peer, PinState.QUEUED, self.now)
        self.cluster_pins[root] = pin
        self.broadcast(PIN_CMD, ids=1, body={"root": root})
        return pin

    def status(self, root: ContentId) -> dict[int, PinState]:
        try:
            return self.cluster_pins[root].snapshot()
        except KeyError:
            raise UnknownPin(str(root)) from None

    def _report(self, origin: int, root: ContentId, state: PinState) -> None:
        self.local_pins[root] = state
        if origin == self.id:
            return
        self.send(control_message(PIN_STATUS, self.id, origin, self.config, ids=1,
                                  body={"root": root, "state": state}))

    def _on_pin_cmd(self, msg: Message) -> None:
        root = msg.body["root"]
        origin = msg.src
        self.pin_hints.setdefault(root, set()).add(origin)
        if root in self.store.pins:
            self._report(origin, root, PinState.PINNED)
            return
        if root in self.exchange.transfers:
            return
        self._report(origin, root, PinState.PINNING)

        def finished(transfer: Transfer) -> None:
            if transfer.state is TransferState.DONE:
                try:
                    self.store.pin(root)
                except MissingBlock:
                    self._report(origin, root, PinState.FAILED)
                    return
                self._report(origin, root, PinState.PINNED)
                self.announce()
            else:
                self._report(origin, root, PinState.FAILED)

        try:
            self.exchange.request(root, on_done=finished)
        except ExchangeError:
            self._report(origin, root, PinState.FAILED)

    def _on_pin_status(self, msg: Message) -> None:
        pin = self.cluster_pins.get(msg.body["root"])
        if pin is not None:
            pin.advance(msg.src, msg.body["state"], self.now)

    def delete(self, root: ContentId) -> int:
        """Unpin ``root`` locally and garbage-collect; returns evicted block count."""
        self.store.unpin(root)
        self.local_pins.pop(root, None)
        evicted = self.store.gc()
        if self.joined:
            self.announce()
        return evicted

    def get(self, root: ContentId, on_done=None) -> Transfer:
        if not self.joined:
            raise NotJoined(f"peer {self.id} is not a cluster member")
        return self.exchange.request(root, on_done=on_done)

    # event entry points

    def on_timer(self, tag: tuple) -> None:
        epoch, tag = tag
        if epoch != self._epoch or not self.active:
            return
        name = tag[0]
        if name == "provide":
            self.provider_tick()
        elif name == "handshake_timeout":
            if self.state is Membership.HANDSHAKING:
                self.state = Membership.TIMED_OUT
        elif name == "pump":
            self.exchange.on_link_free(tag[1])
        elif name == "want_timeout":
            self.exchange.on_want_timeout(*tag[1:])
        elif name == "stall":
            self.exchange.on_stall_check(tag[1])

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        if kind == HELLO:
            self._on_hello(msg)
            return
        if kind == WELCOME:
            self._on_welcome(msg)
            return
        if kind == REJECT:
            self._on_reject(msg)
            return
        if not self.joined or msg.src not in self.members:
            self.unauthenticated_drops += 1
            return
        self.members[msg.src] = self.now
        if kind == WANT:
            self.exchange.on_want(msg.src, msg.cid)
        elif kind == BLOCK:
            self.exchange.on_block(msg.src, msg.cid, msg.payload)
        elif kind == CANCEL:
            self.exchange.on_cancel(msg.src, msg.cid)
        elif kind == PROVIDE:
            self.announced[msg.src] = set(msg.body["roots"])
            for hinted in self.pin_hints.values():
                hinted.discard(msg.src)
        elif kind == PEER_JOINED:
            if msg.src == self.bootstrap:
                self.members.setdefault(msg.body["peer"], self.now)
        elif kind == PIN_CMD:
            self._on_pin_cmd(msg)
        elif kind == PIN_STATUS:
            self._on_pin_status(msg)


class Cluster:
    """A simulator plus its nodes, with helpers to wire up topologies."""

    def __init__(self, config: Config | None = None, seed: int = 0, *, trace: bool = False,
                 key: SwarmKey | None = None, max_events: int = 5_000_000):
        self.config = config or Config()
        self.sim = Simulator(seed, trace=trace, max_events=max_events)
        self.key = key or SwarmKey.derive(f"acst-swarm-{seed}")
        self.nodes: dict[int, Node] = {}

    def __getitem__(self, peer: int) -> Node:
        return self.nodes[peer]

    def add_peer(self, peer: int, key: SwarmKey | None = None, downlink_kbps: float | None = None) -> Node:
        node = Node(peer, self.sim, self.config, key or self.key)
        self.nodes[peer] = node
        self.sim.add_peer(peer, node, downlink_kbps)
        return node

    def connect(self, a: int, b: int, bandwidth_kbps: float, delay_ms: float = 0.0,
                both: bool = True) -> None:
        self.sim.set_link(a, b, LinkParams(bandwidth_kbps, delay_ms))
        if both:
            self.sim.set_link(b, a, LinkParams(bandwidth_kbps, delay_ms))

    def full_mesh(self, bandwidth_kbps: float, delay_ms: float = 0.0) -> None:
        peers = sorted(self.nodes)
        for a in peers:
            for b in peers:
                if a != b:
                    self.sim.set_link(a, b, LinkParams(bandwidth_kbps, delay_ms))

    def set_uplink(self, peer: int, bandwidth_kbps: float | None = None,
                   delay_ms: float | None = None) -> None:
        """Reshape every outgoing link of ``peer``."""
        for (src, dst), link in sorted(self.sim.links.items()):
            if src != peer:
                continue
            params = link.params
            self.sim.set_link(src, dst, LinkParams(
                params.bandwidth_kbps if bandwidth_kbps is None else bandwidth_kbps,
                params.delay_ms if delay_ms is None else delay_ms,
                params.active))

    def form(self, bootstrap: int = 0, horizon_s: float = 60.0) -> dict[int, Membership]:
        """Start the cluster at ``bootstrap`` and handshake every other peer with it."""
        self.nodes[bootstrap].start_cluster()
        for peer in sorted(self.nodes):
            if peer != bootstrap:
                self.nodes[peer].join(bootstrap)
        self.run_until(lambda: all(n.state is not Membership.HANDSHAKING for n in self.nodes.values()),
                       horizon_s)
        self.settle()
        return {p: n.state for p, n in sorted(self.nodes.items())}

    def run_until(self, predicate, horizon_s: float | None = None) -> bool:
        until = None if horizon_s is None else self.sim.now + seconds(horizon_s)
        self.sim.run(until, stop=predicate)
        return predicate()

    def run_for(self, duration_s: float) -> None:
        self.sim.run(self.sim.now + seconds(duration_s))

    def settle(self, horizon_s: float = 3600.0) -> None:
        """Run until nothing is in flight on the network."""
        self.sim.run_until_network_idle(self.sim.now + seconds(horizon_s))

    def deactivate(self, peer: int) -> None:
        node = self.nodes.get(peer)
        if node is not None:
            node.deactivate()

    def reactivate(self, peer: int) -> None:
        node = self.nodes.get(peer)
        if node is not None:
            node.reactivate()

    def joined_peers(self) -> list[int]:
        return [p for p, n in sorted(self.nodes.items()) if n.joined]
