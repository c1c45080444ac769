"""Domain records, canonical encoding, hashing and links.

Every record is a frozen dataclass registered with a one-byte type tag.
The canonical encoding is the tag byte followed by each declared field as
a 4-byte big-endian length prefix and the field bytes.  Integers are 8-byte
big-endian two's complement, strings UTF-8, nested records their own
canonical encoding, optional records an empty field when absent, and
sequences a 4-byte count followed by length-prefixed element encodings.
"""

from __future__ import annotations

import hashlib
import random
import threading
import uuid as _uuid
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Iterable, Optional, Sequence

DIGEST_SIZE = 32
UUID_SIZE = 16

BYTES = "bytes"
INT = "int"
STR = "str"
OBJ = "obj"
OPT = "opt"
LIST = "list"

_REGISTRY: dict[int, type] = {}


class DecodeError(ValueError):
    pass


class EmptyBatch(ValueError):
    def __init__(self):
        super().__init__("empty batch")


def record(tag: int, *fields: tuple[str, str]):
    """Register a dataclass for canonical encoding under ``tag``."""

    def wrap(cls):
        if tag in _REGISTRY:
            raise ValueError(f"duplicate record tag {tag}")
        cls._tag = tag
        cls._fields = fields
        _REGISTRY[tag] = cls
        return cls

    return wrap


# -- identifiers and hashing -------------------------------------------------

_rng_lock = threading.Lock()
_rng: Optional[random.Random] = None


def seed(value: Optional[int]) -> None:
    """Make identifiers and generated keys reproducible (``None`` restores OS randomness)."""
    global _rng
    with _rng_lock:
        _rng = None if value is None else random.Random(value)


def random_bytes(n: int) -> bytes:
    with _rng_lock:
        if _rng is None:
            import os

            return os.urandom(n)
        return _rng.getrandbits(8 * n).to_bytes(n, "big")


def new_uuid() -> bytes:
    """A fresh version-4 UUID as 16 raw bytes."""
    return _uuid.UUID(bytes=random_bytes(UUID_SIZE), version=4).bytes


def sha3(data: bytes) -> bytes:
    return hashlib.sha3_256(data).digest()


# -- encoding ----------------------------------------------------------------


def _pack(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


def _field_bytes(kind: str, value: Any) -> bytes:
    if kind == BYTES:
        return bytes(value)
    if kind == INT:
        return int(value).to_bytes(8, "big", signed=True)
    if kind == STR:
        return value.encode("utf-8")
    if kind == OBJ:
        return encode(value)
    if kind == OPT:
        return b"" if value is None else encode(value)
    if kind == LIST:
        items = list(value)
        return len(items).to_bytes(4, "big") + b"".join(_pack(encode(v)) for v in items)
    raise TypeError(f"unknown field kind {kind!r}")


def encode(x: Any) -> bytes:
    """Canonical, deterministic byte encoding of a registered record."""
    try:
        tag, fields = x._tag, x._fields
    except AttributeError:
        raise TypeError(f"{type(x).__name__} is not an encodable record") from None
    out = bytearray([tag])
    for name, kind in fields:
        out += _pack(_field_bytes(kind, getattr(x, name)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated record")
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def field(self) -> bytes:
        return self.take(int.from_bytes(self.take(4), "big"))

    def done(self) -> bool:
        return self.pos == len(self.data)


def _field_value(kind: str, raw: bytes) -> Any:
    if kind == BYTES:
        return raw
    if kind == INT:
        if len(raw) != 8:
            raise DecodeError("integer field must be 8 bytes")
        return int.from_bytes(raw, "big", signed=True)
    if kind == STR:
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(str(exc)) from None
    if kind == OBJ:
        return decode(raw)
    if kind == OPT:
        return None if raw == b"" else decode(raw)
    if kind == LIST:
        r = _Reader(raw)
        count = int.from_bytes(r.take(4), "big")
        items = tuple(decode(r.field()) for _ in range(count))
        if not r.done():
            raise DecodeError("trailing bytes in sequence field")
        return items
    raise TypeError(f"unknown field kind {kind!r}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode`; raises :class:`DecodeError` on malformed input."""
    if not data:
        raise DecodeError("empty record")
    cls = _REGISTRY.get(data[0])
    if cls is None:
        raise DecodeError(f"unknown record tag {data[0]}")
    r = _Reader(data)
    r.take(1)
    values = {name: _field_value(kind, r.field()) for name, kind in cls._fields}
    if not r.done():
        raise DecodeError("trailing bytes after record")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise DecodeError(str(exc)) from None


# -- records -----------------------------------------------------------------


@record(1, ("uuid", BYTES), ("digest", BYTES))
@dataclass(frozen=True)
class Link:
    """Unique reference to an object: its identifier plus the hash of its encoding."""

    uuid: bytes
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")

    def hex(self) -> str:
        return f"{self.uuid.hex()}:{self.digest.hex()}"

    @classmethod
    def from_hex(cls, text: str) -> "Link":
        uuid_hex, _, digest_hex = text.strip().partition(":")
        return cls(bytes.fromhex(uuid_hex), bytes.fromhex(digest_hex))


@record(2, ("schema", STR), ("tx_type", STR), ("data_link", OBJ))
@dataclass(frozen=True)
class TxLink:
    """Transaction data link; the data itself lives off-chain."""

    schema: str
    tx_type: str
    data_link: Link

    def __post_init__(self):
        if not self.schema:
            raise ValueError("transaction schema must be non-empty")

    def text(self) -> str:
        return f"{self.schema} {self.tx_type} {self.data_link.hex()}"

    @classmethod
    def from_text(cls, text: str) -> "TxLink":
        schema, tx_type, link_hex = text.split()
        return cls(schema, tx_type, Link.from_hex(link_hex))


@record(3, ("uuid", BYTES), ("leaves", LIST))
@dataclass(frozen=True)
class MerkleTree:
    uuid: bytes
    leaves: tuple[TxLink, ...]

    @property
    def root(self) -> bytes:
        return merkle_root(self.leaves)


@record(4, ("uuid", BYTES), ("payload_link", OBJ), ("prev_time_link", OPT))
@dataclass(frozen=True)
class Block:
    """A data or control block; genesis has no previous timestamp link."""

    uuid: bytes
    payload_link: Link
    prev_time_link: Optional[Link] = None

    @property
    def is_genesis(self) -> bool:
        return self.prev_time_link is None


@record(5, ("uuid", BYTES), ("seq_pubkey", BYTES), ("time_pubkey", BYTES), ("ring", LIST))
@dataclass(frozen=True)
class ControlPayload:
    """Names a chain's sequencer and timestamp service keys.

    ``ring`` holds the enclave attestations of the sequencer ring for
    chains that run with sequencer replacement; it is empty otherwise.
    """

    uuid: bytes
    seq_pubkey: bytes
    time_pubkey: bytes
    ring: tuple = ()

    def __post_init__(self):
        if len(self.seq_pubkey) != 32 or len(self.time_pubkey) != 32:
            raise ValueError("verification keys must be 32 bytes")


@record(9, ("block", OBJ), ("time", OBJ), ("seq", OBJ))
@dataclass(frozen=True)
class Triad:
    block: Any
    time: Any
    seq: Any

    @property
    def ctr(self) -> int:
        return self.seq.ctr


@record(10, ("tx", OBJ), ("genesis_link", OBJ), ("ts", INT), ("height", INT), ("rank", INT))
@dataclass(frozen=True)
class Certificate:
    tx: TxLink
    genesis_link: Link
    ts: int
    height: int
    rank: int

    def text(self) -> str:
        return (
            f"tx={self.tx.text()}\n"
            f"chain={self.genesis_link.hex()}\n"
            f"ts={self.ts}\nheight={self.height}\nrank={self.rank}"
        )


DATA = "data"
CONTROL = "control"


def block_kind(payload: Any) -> str:
    """Classify a block by the deserialized addressee of its payload link."""
    if isinstance(payload, MerkleTree):
        return DATA
    if isinstance(payload, ControlPayload):
        return CONTROL
    raise TypeError(f"not a block payload: {type(payload).__name__}")


# -- links and Merkle roots --------------------------------------------------


@lru_cache(maxsize=1 << 16)
def link(x: Any) -> Link:
    """``<x.uuid, sha3(encode(x))>``."""
    return Link(x.uuid, sha3(encode(x)))


@lru_cache(maxsize=1 << 16)
def link_bytes(x: Any) -> bytes:
    """Encoded link of ``x``; the form attestations carry in their bytes field."""
    return encode(link(x))


def verify_link(ref: Link, x: Any) -> bool:
    return ref.uuid == x.uuid and ref.digest == sha3(encode(x))


def merkle_root(leaves: Sequence[TxLink]) -> bytes:
    """Binary Merkle root over leaf encodings; an odd node is promoted unchanged."""
    level = [sha3(encode(leaf)) for leaf in leaves]
    if not level:
        raise EmptyBatch()
    while len(level) > 1:
        nxt = [sha3(level[i] + level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def leaf_index(tx: TxLink, leaves: Iterable[TxLink]) -> int:
    for i, leaf in enumerate(leaves):
        if leaf == tx:
            return i
    raise ValueError("transaction not in leaves")
