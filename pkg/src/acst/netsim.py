"""
Deterministic discrete-event network simulator.

Time is an integer count of microseconds. Every directed link serializes
messages FIFO at its bandwidth, then adds its propagation delay. A peer
may additionally have an aggregate downlink cap, modeled as a second FIFO
serializer that incoming messages pass through after they arrive.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Protocol


class SimError(Exception):
    pass


class NoLink(SimError):
    pass


class LivelockGuard(SimError):
    pass


def ms(value: float) -> int:
    """Milliseconds to integer microseconds."""
    return round(value * 1000)


def seconds(value: float) -> int:
    return round(value * 1_000_000)


def serialization_us(wire_size: int, bandwidth_kbps: float | Fraction) -> int:
    """Time to clock ``wire_size`` bytes onto a link, rounded up to whole microseconds."""
    # bits / (kbit/s * 1000) seconds == bits * 1000 / kbit/s microseconds
    return math.ceil(Fraction(wire_size * 8 * 1000) / Fraction(bandwidth_kbps))


@dataclass
class LinkParams:
    bandwidth_kbps: float
    delay_ms: float = 0.0
    active: bool = True

    def __post_init__(self):
        if self.active and not self.bandwidth_kbps > 0:
            raise ValueError("active links need bandwidth > 0")
        if self.delay_ms < 0:
            raise ValueError("delay must be non-negative")


@dataclass
class Message:
    kind: str
    src: int
    dst: int
    wire_size: int
    cid: Any = None
    payload: bytes = b""
    body: Any = None


@dataclass
class _Link:
    params: LinkParams
    busy_until: int = 0


@dataclass
class PeerStats:
    msgs_sent: int = 0
    msgs_received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    drops: int = 0
    kind_sent: Counter = field(default_factory=Counter)
    kind_received: Counter = field(default_factory=Counter)
    payload_bytes_received: Counter = field(default_factory=Counter)


@dataclass(frozen=True)
class Transmission:
    start_us: int
    finish_us: int
    arrive_us: int


class Handler(Protocol):
    def on_message(self, msg: Message) -> None: ...

    def on_timer(self, tag: Any) -> None: ...


_ARRIVE, _DELIVER, _TIMER = "Arrive", "Deliver", "Timer"


class Simulator:
    """Single-threaded event loop over a directed topology.

    Events dispatch in strict ``(time, seq)`` order. ``seq`` is a global
    counter, so ties break by scheduling order and runs are reproducible.
    """

    def __init__(self, seed: int = 0, *, max_events: int = 5_000_000, trace: bool = False):
        self.rng = random.Random(seed)
        self.now = 0
        self.max_events = max_events
        self._queue: list[tuple[int, int, str, Any]] = []
        self._seq = itertools.count()
        self.links: dict[tuple[int, int], _Link] = {}
        self.downlinks: dict[int, list] = {}
        self.handlers: dict[int, Handler] = {}
        self.active: dict[int, bool] = {}
        self.stats: dict[int, PeerStats] = {}
        self.in_flight = 0
        self.dispatched = 0
        self.trace: list[str] | None = [] if trace else None

    # topology

    def add_peer(self, peer: int, handler: Handler, downlink_kbps: float | None = None) -> None:
        self.handlers[peer] = handler
        self.active[peer] = True
        self.stats.setdefault(peer, PeerStats())
        if downlink_kbps is not None:
            self.downlinks[peer] = [Fraction(downlink_kbps), 0]

    @property
    def peers(self) -> list[int]:
        return sorted(self.handlers)

    def set_link(self, src: int, dst: int, params: LinkParams) -> None:
        link = self.links.get((src, dst))
        if link is None:
            self.links[(src, dst)] = _Link(params)
        else:
            link.params = params

    def link(self, src: int, dst: int) -> LinkParams:
        try:
            return self.links[(src, dst)].params
        except KeyError:
            raise NoLink(f"{src}->{dst}") from None

    def set_peer_active(self, peer: int, flag: bool) -> None:
        if peer in self.active:
            self.active[peer] = flag

    # scheduling

    def _push(self, time_us: int, kind: str, item: Any) -> int:
        seq = next(self._seq)
        heapq.heappush(self._queue, (time_us, seq, kind, item))
        return seq

    def schedule(self, delay_us: int, peer: int, tag: Any) -> int:
        if delay_us < 0:
            raise ValueError("cannot schedule into the past")
        return self._push(self.now + delay_us, _TIMER, (peer, tag))

    def transmit(self, msg: Message) -> Transmission | None:
        """Queue ``msg`` on its directed link. Returns None if it was dropped at send."""
        src, dst = msg.src, msg.dst
        link = self.links.get((src, dst))
        if link is None:
            raise NoLink(f"{src}->{dst}")
        if not self.active.get(src, False) or not link.params.active:
            self.stats[src].drops += 1
            return None
        start = max(self.now, link.busy_until)
        finish = start + serialization_us(msg.wire_size, link.params.bandwidth_kbps)
        link.busy_until = finish
        arrive = finish + ms(link.params.delay_ms)
        st = self.stats[src]
        st.msgs_sent += 1
        st.bytes_sent += msg.wire_size
        st.kind_sent[msg.kind] += 1
        self.in_flight += 1
        self._push(arrive, _ARRIVE if dst in self.downlinks else _DELIVER, msg)
        return Transmission(start, finish, arrive)

    # dispatch

    def _dispatch(self, time_us: int, seq: int, kind: str, item: Any) -> None:
        self.now = time_us
        if self.trace is not None:
            self.trace.append(self._trace_line(time_us, seq, kind, item))
        if kind == _TIMER:
            peer, tag = item
            self.handlers[peer].on_timer(tag)
        elif kind == _ARRIVE:
            down = self.downlinks[item.dst]
            start = max(time_us, down[1])
            down[1] = start + serialization_us(item.wire_size, down[0])
            self._push(down[1], _DELIVER, item)
        else:
            self.in_flight -= 1
            st = self.stats[item.dst]
            st.msgs_received += 1
            st.bytes_received += item.wire_size
            st.kind_received[item.kind] += 1
            st.payload_bytes_received[item.kind] += len(item.payload)
            if not self.active.get(item.dst, False):
                st.drops += 1
                return
            self.handlers[item.dst].on_message(item)

    @staticmethod
    def _trace_line(time_us: int, seq: int, kind: str, item: Any) -> str:
        if kind == _TIMER:
            peer, tag = item
            name = tag[0] if isinstance(tag, tuple) else tag
            return f"{time_us},{seq},Timer:{name},{peer},,,0"
        cid = item.cid if item.cid is not None else ""
        return f"{time_us},{seq},{kind}:{item.kind},{item.src},{item.dst},{cid},{item.wire_size}"

    def step(self) -> bool:
        if not self._queue:
            return False
        self._dispatch(*heapq.heappop(self._queue))
        self.dispatched += 1
        return True

    def run(self, until_us: int | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> int:
        """Dispatch events until the horizon, ``stop()`` turns true, or the queue drains.

        With a horizon the clock is advanced to it even if the queue empties first.
        """
        cap = self.max_events if max_events is None else max_events
        count = 0
        while self._queue:
            if stop is not None and stop():
                return count
            if until_us is not None and self._queue[0][0] > until_us:
                break
            if count >= cap:
                raise LivelockGuard(f"more than {cap} events dispatched")
            self.step()
            count += 1
        if until_us is not None and (stop is None or not stop()):
            self.now = max(self.now, until_us)
        return count

    def run_until_network_idle(self, until_us: int | None = None) -> int:
        return self.run(until_us, stop=lambda: self.in_flight == 0)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def totals(self) -> tuple[int, int]:
        sent = sum(s.bytes_sent for s in self.stats.values())
        received = sum(s.bytes_received for s in self.stats.values())
        return sent, received
