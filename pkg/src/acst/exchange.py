"""
Want-list block exchange.

A requester keeps one :class:`WantList` per transfer and hands wants to the
known holders of the root, uniformly at random among the least-loaded
holders and never more than ``window`` outstanding per provider. Providers
serve wants from a per-destination queue, one block on the wire at a time,
so a Cancel can still withdraw a queued block.

Wants that stay unanswered for ``want_timeout`` are offered again to holders
that have nothing outstanding; the first copy to arrive wins and the other
assignees get a Cancel.
"""

from __future__ import annotations

import enum
import random
from collections import Counter, deque
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Callable, Iterable, Mapping

from .content_store import Block, CidMismatch, ContentId, Kind, children
from .netsim import Message, seconds

if TYPE_CHECKING:
    from .cluster import Node

HEADER_BYTES = 64

WANT = "Want"
HAVE = "Have"
BLOCK = "Block"
CANCEL = "Cancel"
EXCHANGE_KINDS = frozenset({WANT, HAVE, BLOCK, CANCEL})


class ExchangeError(Exception):
    pass


class NoProviders(ExchangeError):
    pass


class Stalled(ExchangeError):
    pass


def exchange_message(kind: str, src: int, dst: int, cid: ContentId, payload: bytes = b"",
                     header_bytes: int = HEADER_BYTES) -> Message:
    if kind != BLOCK and payload:
        raise ValueError(f"{kind} messages carry no payload")
    return Message(kind, src, dst, header_bytes + len(payload), cid=cid, payload=payload)


@dataclass
class LedgerEntry:
    blocks_sent: int = 0
    blocks_received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    duplicate_blocks_received: int = 0
    invalid_blocks_received: int = 0


class Ledger:
    """Per-remote-peer transfer counters."""

    def __init__(self):
        self.entries: dict[int, LedgerEntry] = {}

    def __getitem__(self, peer: int) -> LedgerEntry:
        entry = self.entries.get(peer)
        if entry is None:
            entry = self.entries[peer] = LedgerEntry()
        return entry

    def total(self) -> LedgerEntry:
        out = LedgerEntry()
        for entry in self.entries.values():
            for f in fields(LedgerEntry):
                setattr(out, f.name, getattr(out, f.name) + getattr(entry, f.name))
        return out


class WantList:
    """Needed cids in DAG order plus their current provider assignments."""

    def __init__(self, needed: Iterable[ContentId] = ()):
        self.needed: dict[ContentId, None] = dict.fromkeys(needed)
        self.assigned: dict[ContentId, dict[int, int]] = {}
        self.outstanding: Counter = Counter()
        self.expired: dict[ContentId, None] = {}

    def __len__(self) -> int:
        return len(self.needed)

    def add(self, cid: ContentId) -> None:
        self.needed.setdefault(cid, None)

    def unassigned(self) -> list[ContentId]:
        return [cid for cid in self.needed if cid not in self.assigned]

    def assign(self, cid: ContentId, provider: int, now: int) -> None:
        if cid not in self.needed:
            raise KeyError(cid)
        self.assigned.setdefault(cid, {})[provider] = now
        self.outstanding[provider] += 1

    def release(self, cid: ContentId, provider: int) -> None:
        providers = self.assigned.get(cid)
        if providers is None or provider not in providers:
            return
        del providers[provider]
        self.outstanding[provider] -= 1
        if not providers:
            del self.assigned[cid]
            self.expired.pop(cid, None)

    def release_provider(self, provider: int) -> list[ContentId]:
        cids = [cid for cid, providers in self.assigned.items() if provider in providers]
        for cid in cids:
            self.release(cid, provider)
        return cids

    def clear(self, cid: ContentId) -> list[int]:
        """Drop ``cid`` entirely; returns the providers that were still assigned it."""
        providers = list(self.assigned.get(cid, ()))
        for provider in providers:
            self.release(cid, provider)
        self.needed.pop(cid, None)
        self.expired.pop(cid, None)
        return providers


def schedule_wants(wants: WantList, holders: Mapping[ContentId, Iterable[int]], window: int,
                   rng: random.Random, now: int = 0) -> list[tuple[ContentId, int]]:
    """Assign unassigned wants to holders with free window slots.

    Each want goes to a holder drawn uniformly from the eligible holders
    carrying the fewest outstanding assignments. Latency plays no part.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    issued = []
    for cid in wants.unassigned():
        eligible = sorted(p for p in holders.get(cid, ()) if wants.outstanding[p] < window)
        if not eligible:
            continue
        least = min(wants.outstanding[p] for p in eligible)
        pool = [p for p in eligible if wants.outstanding[p] == least]
        provider = pool[rng.randrange(len(pool))]
        wants.assign(cid, provider, now)
        issued.append((cid, provider))
    return issued


def reissue_expired(wants: WantList, holders: Mapping[ContentId, Iterable[int]],
                    rng: random.Random, now: int = 0) -> list[tuple[ContentId, int]]:
    """Hand expired wants to idle holders not already assigned them."""
    issued = []
    for cid in list(wants.expired):
        taken = wants.assigned.get(cid, {})
        idle = sorted(p for p in holders.get(cid, ()) if wants.outstanding[p] == 0 and p not in taken)
        if not idle:
            continue
        provider = idle[rng.randrange(len(idle))]
        wants.assign(cid, provider, now)
        del wants.expired[cid]
        issued.append((cid, provider))
    return issued


class TransferState(enum.Enum):
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class Transfer:
    """Handle for one DAG fetch on one peer."""

    root: ContentId
    started_at: int
    wants: WantList = field(default_factory=WantList)
    state: TransferState = TransferState.RUNNING
    error: Exception | None = None
    finished_at: int | None = None
    last_progress: int = 0
    blocks_received: int = 0
    messages_sent: int = 0
    on_done: Callable[["Transfer"], None] | None = None
    served_by: Counter = field(default_factory=Counter)

    @property
    def done(self) -> bool:
        return self.state is not TransferState.RUNNING

    @property
    def duration_us(self) -> int | None:
        if self.finished_at is None:
            return None
        return self.finished_at - self.started_at


class Exchange:
    """Block exchange engine for one peer; driven entirely by simulator events."""

    def __init__(self, node: "Node"):
        self.node = node
        self.ledger = Ledger()
        self.transfers: dict[ContentId, Transfer] = {}
        self._queues: dict[int, deque] = {}
        self._busy: set[int] = set()
        self._interest: dict[ContentId, set[int]] = {}

    @property
    def config(self):
        return self.node.config

    def reset(self) -> None:
        """Forget queued sends and deferred interest (used on deactivation)."""
        self._queues.clear()
        self._busy.clear()
        self._interest.clear()
        for transfer in list(self.transfers.values()):
            self._finish(transfer, ExchangeError("peer deactivated"), cancel=False)

    def _send(self, kind: str, dst: int, cid: ContentId, payload: bytes = b""):
        msg = exchange_message(kind, self.node.id, dst, cid, payload, self.config.header_bytes)
        return self.node.send(msg)

    # provider side

    def on_want(self, src: int, cid: ContentId) -> None:
        if self.node.store.has_block(cid):
            self._queues.setdefault(src, deque()).append(cid)
            self._pump(src)
        else:
            self._interest.setdefault(cid, set()).add(src)

    def on_cancel(self, src: int, cid: ContentId) -> None:
        queue = self._queues.get(src)
        if queue and cid in queue:
            queue.remove(cid)
        waiting = self._interest.get(cid)
        if waiting:
            waiting.discard(src)

    def _pump(self, dst: int) -> None:
        if dst in self._busy:
            return
        queue = self._queues.get(dst)
        store = self.node.store
        while queue:
            cid = queue.popleft()
            if not store.has_block(cid):
                continue
            block = store.get_block(cid)
            tx = self._send(BLOCK, dst, cid, block.data)
            if tx is None:
                continue
            entry = self.ledger[dst]
            entry.blocks_sent += 1
            entry.bytes_sent += len(block.data)
            self._busy.add(dst)
            self.node.timer(tx.finish_us - self.node.now, ("pump", dst))
            return

    def on_link_free(self, dst: int) -> None:
        self._busy.discard(dst)
        self._pump(dst)

    def _block_stored(self, cid: ContentId) -> None:
        for dst in sorted(self._interest.pop(cid, ())):
            self._queues.setdefault(dst, deque()).append(cid)
            self._pump(dst)

    # requester side

    def request(self, root: ContentId, on_done: Callable[[Transfer], None] | None = None) -> Transfer:
        """Fetch the closure of ``root``; completes immediately if it is already local."""
        now = self.node.now
        transfer = Transfer(root, started_at=now, last_progress=now, on_done=on_done)
        missing = self.node.store.missing(root)
        if not missing:
            transfer.state = TransferState.DONE
            transfer.finished_at = now
            if on_done:
                on_done(transfer)
            return transfer
        if not self.holders(root):
            raise NoProviders(str(root))
        if root in self.transfers:
            raise ExchangeError(f"transfer for {root} already running")
        transfer.wants = WantList(missing)
        self.transfers[root] = transfer
        self.node.timer(seconds(self.config.stall_timeout_s), ("stall", root))
        self._schedule(transfer)
        return transfer

    def holders(self, root: ContentId) -> set[int]:
        return self.node.holders_of(root) - {self.node.id}

    def _schedule(self, transfer: Transfer) -> None:
        if transfer.done:
            return
        holders = self.holders(transfer.root)
        view = _SameHolders(holders)
        now = self.node.now
        rng = self.node.rng
        issued = schedule_wants(transfer.wants, view, self.config.window, rng, now)
        issued += reissue_expired(transfer.wants, view, rng, now)
        for cid, provider in issued:
            if self._send(WANT, provider, cid) is not None:
                transfer.messages_sent += 1
            self.node.timer(seconds(self.config.want_timeout_s),
                            ("want_timeout", transfer.root, cid, provider, now))

    def on_want_timeout(self, root: ContentId, cid: ContentId, provider: int, issued_at: int) -> None:
        transfer = self.transfers.get(root)
        if transfer is None or cid not in transfer.wants.needed:
            return
        if transfer.wants.assigned.get(cid, {}).get(provider) != issued_at:
            return
        transfer.wants.expired[cid] = None
        self._schedule(transfer)

    def on_stall_check(self, root: ContentId) -> None:
        transfer = self.transfers.get(root)
        if transfer is None:
            return
        limit = seconds(self.config.stall_timeout_s)
        idle_for = self.node.now - transfer.last_progress
        if idle_for >= limit:
            self._finish(transfer, Stalled(f"{root}: no progress for {idle_for / 1e6:.1f} s"))
        else:
            self.node.timer(limit - idle_for, ("stall", root))

    def provider_dropped(self, peer: int) -> None:
        for transfer in list(self.transfers.values()):
            transfer.wants.release_provider(peer)
            self._schedule(transfer)
        self._queues.pop(peer, None)
        self._busy.discard(peer)
        for waiting in self._interest.values():
            waiting.discard(peer)

    def on_block(self, src: int, cid: ContentId, payload: bytes) -> None:
        entry = self.ledger[src]
        block = Block(cid, payload)
        store = self.node.store
        if not block.verify():
            entry.invalid_blocks_received += 1
            return
        entry.blocks_received += 1
        entry.bytes_received += len(payload)
        if store.has_block(cid):
            entry.duplicate_blocks_received += 1
            return
        try:
            store.put_block(block)
        except CidMismatch:  # pragma: no cover - verified above
            entry.invalid_blocks_received += 1
            return
        for transfer in list(self.transfers.values()):
            wants = transfer.wants
            if cid not in wants.needed:
                continue
            for other in wants.clear(cid):
                if other != src:
                    self._send(CANCEL, other, cid)
            transfer.blocks_received += 1
            transfer.served_by[src] += 1
            transfer.last_progress = self.node.now
            if cid.kind is Kind.NODE:
                for child in children(block):
                    if child not in store:
                        wants.add(child)
                    else:
                        for sub in store.missing(child):
                            wants.add(sub)
        self._block_stored(cid)
        for transfer in list(self.transfers.values()):
            if not transfer.wants.needed:
                self._finish(transfer)
            else:
                self._schedule(transfer)

    def _finish(self, transfer: Transfer, error: Exception | None = None, cancel: bool = True) -> None:
        if transfer.done:
            return
        transfer.state = TransferState.FAILED if error else TransferState.DONE
        transfer.error = error
        transfer.finished_at = self.node.now
        self.transfers.pop(transfer.root, None)
        if cancel:
            for cid, providers in list(transfer.wants.assigned.items()):
                for provider in providers:
                    self._send(CANCEL, provider, cid)
        if transfer.on_done:
            transfer.on_done(transfer)


class _SameHolders(Mapping):
    """Every cid of one DAG shares the holders announced for its root."""

    def __init__(self, holders: set[int]):
        self._holders = holders

    def __getitem__(self, cid):
        return self._holders

    def get(self, cid, default=None):
        return self._holders

    def __iter__(self):
        return iter(())

    def __len__(self):
        return 0
