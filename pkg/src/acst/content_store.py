"""
Content addressing, fixed-size chunking, Merkle DAG construction and a
pin-aware block store.

Leaf digests are plain SHA-256 of the chunk bytes. Interior nodes are
hashed with a one-byte domain tag prepended, so a leaf and a node never
share a digest for the same byte string.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

DEFAULT_CHUNK_SIZE = 262_144
DEFAULT_FANOUT = 174
MAX_BLOCK_BYTES = 1 << 20

_NODE_DOMAIN = b"\x01"
_LINK = struct.Struct(">32sQ")
_NODE_HEADER = struct.Struct(">cI")


class StoreError(Exception):
    """Base class for block store failures."""


class MissingBlock(StoreError):
    def __init__(self, cids: Iterable["ContentId"]):
        self.cids = list(cids)
        shown = ", ".join(str(c) for c in self.cids[:4])
        more = f" (+{len(self.cids) - 4} more)" if len(self.cids) > 4 else ""
        super().__init__(f"missing block(s): {shown}{more}")


class CidMismatch(StoreError):
    pass


class NotFound(StoreError):
    pass


class BlockTooLarge(StoreError):
    pass


class Kind(enum.Enum):
    LEAF = "L"
    NODE = "N"


@dataclass(frozen=True)
class ContentId:
    digest: bytes
    kind: Kind

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(self.digest)}")

    def __lt__(self, other):  # Kind is not orderable; order by text form
        return str(self) < str(other)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.digest.hex()}"

    def __repr__(self) -> str:
        return f"ContentId({self.kind.value}:{self.digest.hex()[:12]}…)"

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def parse(cls, text: str) -> "ContentId":
        """Parse the canonical ``L:<hex>`` / ``N:<hex>`` form."""
        try:
            tag, hexdigest = text.strip().split(":", 1)
            kind = Kind(tag)
            digest = bytes.fromhex(hexdigest)
        except ValueError as exc:
            raise ValueError(f"not a content id: {text!r}") from exc
        if len(digest) != 32:
            raise ValueError(f"not a content id: {text!r}")
        return cls(digest, kind)


def cid_of(data: bytes, kind: Kind = Kind.LEAF) -> ContentId:
    if kind is Kind.LEAF:
        return ContentId(hashlib.sha256(data).digest(), kind)
    return ContentId(hashlib.sha256(_NODE_DOMAIN + data).digest(), kind)


@dataclass(frozen=True)
class Block:
    cid: ContentId
    data: bytes

    @classmethod
    def leaf(cls, data: bytes) -> "Block":
        return cls(cid_of(data, Kind.LEAF), bytes(data))

    def verify(self) -> bool:
        return cid_of(self.data, self.cid.kind) == self.cid

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Link:
    child: ContentId
    size: int


@dataclass(frozen=True)
class DagNode:
    """Interior node: ordered links to children with their subtree sizes."""

    links: tuple[Link, ...]

    @property
    def size(self) -> int:
        return sum(link.size for link in self.links)

    def encode(self) -> bytes:
        if not self.links:
            raise ValueError("interior node needs at least one link")
        kinds = {link.child.kind for link in self.links}
        if len(kinds) != 1:
            raise ValueError("children of one node must share a kind")
        (kind,) = kinds
        parts = [_NODE_HEADER.pack(kind.value.encode(), len(self.links))]
        parts.extend(_LINK.pack(link.child.digest, link.size) for link in self.links)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "DagNode":
        tag, count = _NODE_HEADER.unpack_from(data, 0)
        if len(data) != _NODE_HEADER.size + count * _LINK.size:
            raise ValueError("truncated or oversized node encoding")
        kind = Kind(tag.decode())
        links = tuple(
            Link(ContentId(digest, kind), size)
            for digest, size in _LINK.iter_unpack(data[_NODE_HEADER.size:])
        )
        return cls(links)

    def to_block(self) -> Block:
        data = self.encode()
        return Block(cid_of(data, Kind.NODE), data)


def chunk(data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[Block]:
    """Split ``data`` into fixed-size leaf blocks (one empty leaf for empty input)."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not data:
        return [Block.leaf(b"")]
    view = memoryview(data)
    return [Block.leaf(bytes(view[i:i + chunk_size])) for i in range(0, len(data), chunk_size)]


def build_dag(leaves: list[Block], fanout: int = DEFAULT_FANOUT) -> tuple[ContentId, list[Block]]:
    """Group leaves ``fanout`` at a time into interior nodes until one root remains.

    Returns the root id and every distinct block of the DAG, leaves first,
    in build order.
    """
    if fanout < 2:
        raise ValueError("fanout must be >= 2")
    if not leaves:
        raise ValueError("at least one leaf is required")
    blocks = list(leaves)
    level = [(b.cid, len(b.data)) for b in leaves]
    while len(level) > 1:
        parents = []
        for i in range(0, len(level), fanout):
            node = DagNode(tuple(Link(cid, size) for cid, size in level[i:i + fanout]))
            block = node.to_block()
            blocks.append(block)
            parents.append((block.cid, node.size))
        level = parents
    return level[0][0], list({b.cid: b for b in blocks}.values())


def children(block: Block) -> list[ContentId]:
    if block.cid.kind is Kind.LEAF:
        return []
    return [link.child for link in DagNode.decode(block.data).links]


class BlockStore:
    """In-memory block map with a pin set and a running byte total."""

    def __init__(self, max_block_bytes: int = MAX_BLOCK_BYTES):
        self.max_block_bytes = max_block_bytes
        self.blocks: dict[ContentId, Block] = {}
        self.pins: set[ContentId] = set()
        self.stored_bytes = 0

    def __contains__(self, cid: ContentId) -> bool:
        return cid in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def has_block(self, cid: ContentId) -> bool:
        return cid in self.blocks

    def put_block(self, block: Block) -> bool:
        """Verify and store ``block``. Returns False if it was already present."""
        if len(block.data) > self.max_block_bytes:
            raise BlockTooLarge(f"{block.cid}: {len(block.data)} bytes")
        if not block.verify():
            raise CidMismatch(f"bytes do not hash to {block.cid}")
        if block.cid in self.blocks:
            return False
        self._write(block)
        self.blocks[block.cid] = block
        self.stored_bytes += len(block.data)
        return True

    def get_block(self, cid: ContentId) -> Block:
        try:
            return self.blocks[cid]
        except KeyError:
            raise NotFound(str(cid)) from None

    def delete_block(self, cid: ContentId) -> bool:
        block = self.blocks.pop(cid, None)
        if block is None:
            return False
        self.stored_bytes -= len(block.data)
        self._erase(cid)
        return True

    def walk(self, root: ContentId) -> Iterator[ContentId]:
        """Yield the locally reachable closure of ``root`` in depth-first byte order.

        Absent blocks are yielded too (their children cannot be expanded).
        """
        stack = [root]
        seen = set()
        while stack:
            cid = stack.pop()
            if cid in seen:
                continue
            seen.add(cid)
            yield cid
            block = self.blocks.get(cid)
            if block is not None:
                stack.extend(reversed(children(block)))

    def missing(self, root: ContentId) -> list[ContentId]:
        return [cid for cid in self.walk(root) if cid not in self.blocks]

    def closure(self, root: ContentId) -> list[ContentId]:
        missing = self.missing(root)
        if missing:
            raise MissingBlock(missing)
        return list(self.walk(root))

    def pin(self, root: ContentId) -> None:
        self.closure(root)
        self.pins.add(root)
        self._save_pins()

    def unpin(self, root: ContentId) -> bool:
        if root not in self.pins:
            return False
        self.pins.discard(root)
        self._save_pins()
        return True

    def gc(self) -> int:
        live: set[ContentId] = set()
        for root in self.pins:
            live.update(self.walk(root))
        dead = [cid for cid in self.blocks if cid not in live]
        for cid in dead:
            self.delete_block(cid)
        return len(dead)

    def add_bytes(self, data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE,
                  fanout: int = DEFAULT_FANOUT) -> tuple[ContentId, int]:
        """Chunk, build and store ``data``. Returns (root, newly stored block count)."""
        root, blocks = build_dag(chunk(data, chunk_size), fanout)
        added = sum(self.put_block(b) for b in blocks)
        return root, added

    # persistence hooks, no-ops for the in-memory store
    def _write(self, block: Block) -> None:
        pass

    def _erase(self, cid: ContentId) -> None:
        pass

    def _save_pins(self) -> None:
        pass


def assemble(store: BlockStore, root: ContentId) -> bytes:
    """Reassemble the file rooted at ``root`` from ``store``."""
    missing = store.missing(root)
    if missing:
        raise MissingBlock(missing)
    out = bytearray()
    stack = [root]
    while stack:
        block = store.blocks[stack.pop()]
        if block.cid.kind is Kind.LEAF:
            out += block.data
        else:
            stack.extend(reversed(children(block)))
    return bytes(out)


class DiskBlockStore(BlockStore):
    """Block store mirrored to a directory.

    Layout: ``blocks/<hex[0:2]>/<hex[2:4]>/<hex>.<L|N>`` plus a ``pins`` file
    with one canonical root id per line.
    """

    def __init__(self, root_dir: str | os.PathLike, max_block_bytes: int = MAX_BLOCK_BYTES):
        super().__init__(max_block_bytes)
        self.root_dir = Path(root_dir)
        self.root_dir.mkdir(parents=True, exist_ok=True)
        for path in sorted((self.root_dir / "blocks").glob("*/*/*.[LN]")):
            digest_hex, tag = path.name.split(".")
            cid = ContentId(bytes.fromhex(digest_hex), Kind(tag))
            block = Block(cid, path.read_bytes())
            if not block.verify():
                raise CidMismatch(f"corrupt block file {path}")
            self.blocks[cid] = block
            self.stored_bytes += len(block.data)
        pins_file = self.root_dir / "pins"
        if pins_file.exists():
            self.pins = {ContentId.parse(line) for line in pins_file.read_text().splitlines() if line.strip()}

    def _path(self, cid: ContentId) -> Path:
        h = cid.hex
        return self.root_dir / "blocks" / h[:2] / h[2:4] / f"{h}.{cid.kind.value}"

    def _write(self, block: Block) -> None:
        path = self._path(block.cid)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(block.data)
        os.replace(tmp, path)

    def _erase(self, cid: ContentId) -> None:
        self._path(cid).unlink(missing_ok=True)

    def _save_pins(self) -> None:
        lines = "".join(f"{cid}\n" for cid in sorted(self.pins, key=str))
        (self.root_dir / "pins").write_text(lines)
