"""Sequencer replacement: a ring of sequencers whose majority vote orders timestamps.

Blocks carry acknowledgments of previously issued sequence attestations.
A timestamp attestation joins the main chain once more than half of the
ring has voted for it, where a member votes by sequencing the timestamp
(or one of its descendants) with the counter right after its last
acknowledged one.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

from .core import (
    BYTES, INT, LIST, OBJ, Certificate, ControlPayload, Link, TxLink, decode, encode, link,
    link_bytes, merkle_root, new_uuid, record,
)
from .services import (
    ENCLAVE_ROOT_PUBLIC, EnclaveAttestation, SequenceAttestation, SequencerDown, SequenceService,
    ServiceError, TimestampAttestation, verify_enclave,
)
from .verify import ChainSnapshot, _checked, _validated

DEFAULT_DEPTH = 100


class AllSequencersDown(ServiceError):
    def __init__(self):
        super().__init__("all sequencers down")


@record(13, ("sig", BYTES), ("ctr", INT), ("issuer", BYTES), ("time_link", OBJ))
@dataclass(frozen=True)
class SeqAck:
    """A sequence attestation as acknowledged inside a block.

    Besides the signature, the issuer key and the attested timestamp link
    are kept so the acknowledgment can be checked on its own.
    """

    sig: bytes
    ctr: int
    issuer: bytes
    time_link: Link

    def attestation(self) -> SequenceAttestation:
        return SequenceAttestation(encode(self.time_link), self.ctr, self.sig, b"")


def ack_of(q: SequenceAttestation, issuer: bytes) -> SeqAck:
    return SeqAck(q.sig, q.ctr, issuer, decode(q.data))


@record(12, ("merkle_hash", BYTES), ("merkle_uuid", BYTES), ("prev_time_hash", BYTES),
        ("prev_time_uuid", BYTES), ("uuid", BYTES), ("seqs", LIST))
@dataclass(frozen=True)
class RingBlock:
    merkle_hash: bytes
    merkle_uuid: bytes
    prev_time_hash: bytes
    prev_time_uuid: bytes
    uuid: bytes
    seqs: tuple = ()

    @property
    def payload_link(self) -> Link:
        return Link(self.merkle_uuid, self.merkle_hash)

    @property
    def prev_time_link(self) -> Optional[Link]:
        if not self.prev_time_hash:
            return None
        return Link(self.prev_time_uuid, self.prev_time_hash)


def genesis_ring_block(control: ControlPayload) -> RingBlock:
    l = link(control)
    return RingBlock(l.digest, l.uuid, b"", b"", new_uuid(), ())


def data_ring_block(merkle, prev_time: Link, acks: Iterable[SeqAck]) -> RingBlock:
    return RingBlock(merkle.root, merkle.uuid, prev_time.digest, prev_time.uuid, new_uuid(),
                     tuple(sorted(acks, key=lambda a: (a.issuer, a.ctr))))


@dataclass(frozen=True)
class Ring:
    members: tuple

    def __post_init__(self):
        if len(self.members) % 2 == 0:
            raise ValueError("ring size must be odd")

    def __len__(self):
        return len(self.members)


class SequenceItDispatcher:
    """Forwards timestamp links to live ring members, round-robin.

    The returned attestation has already been replicated.
    """

    def __init__(self, members: Sequence[SequenceService], replicator):
        self.members = list(members)
        self.replicator = replicator
        self._next = 0
        self._lock = threading.Lock()

    def dispatch(self, time_link: Link) -> tuple[SequenceAttestation, int]:
        with self._lock:
            n = len(self.members)
            for attempt in range(n):
                i = (self._next + attempt) % n
                try:
                    q = self.members[i].sequence(time_link)
                except SequencerDown:
                    continue
                self._next = (i + 1) % n
                break
            else:
                raise AllSequencersDown()
        self.replicator.replicate(q)
        return q, i


class _RingIndex:
    def __init__(self, snapshot: ChainSnapshot):
        self.times_by_data: dict = {}
        for t in snapshot.times:
            self.times_by_data.setdefault(t.data, []).append(t)
        self.blocks_by_link = {link_bytes(b): b for b in snapshot.blocks}
        self.children: dict = {}
        for b in snapshot.blocks:
            if b.prev_time_link is not None:
                self.children.setdefault(b.prev_time_link, []).append(b)
        self.seqs_by_data: dict = {}
        for q in snapshot.seqs:
            self.seqs_by_data.setdefault(q.data, []).append(q)

    def times_of(self, block) -> list:
        return self.times_by_data.get(link_bytes(block), [])

    def children_of(self, time) -> list:
        return self.children.get(link(time), [])


def _advance(last: dict, block, on_chain: set) -> dict:
    """``last`` moved up by the block's consecutive acknowledgments of on-chain timestamps."""
    advanced = dict(last)
    for ack in sorted(block.seqs, key=lambda a: a.ctr):
        prior = advanced.get(ack.issuer)
        if (prior is not None and ack.time_link in on_chain and prior + 1 == ack.ctr
                and _checked(ack.issuer, ack.attestation())):
            advanced[ack.issuer] = ack.ctr
    return advanced


def _voters(t, depth: int, last: dict, on_chain: set, idx: _RingIndex) -> set:
    """Ring members voting for ``t``; ``last`` maps member key to its last acknowledged counter."""
    voted = set()
    remaining = dict(last)
    for q in idx.seqs_by_data.get(link_bytes(t), []):
        key = next((k for k, c in remaining.items() if q.ctr == c + 1 and _checked(k, q)), None)
        if key is not None:
            voted.add(key)
            del remaining[key]  # count each sequencer once
    if not remaining or depth == 0:
        return voted
    for b in idx.children_of(t):
        advanced = _advance(remaining, b, on_chain)
        for nxt in idx.times_of(b):
            voted |= _voters(nxt, depth - 1, advanced, on_chain, idx)
    return voted


def votes(t: TimestampAttestation, depth: int, last: dict, z: Sequence, snapshot: ChainSnapshot) -> int:
    """Number of distinct ring members voting for ``t`` given main chain ``z``."""
    on_chain = {link(x) for x in z if isinstance(x, TimestampAttestation)}
    return len(_tally(t, depth, last, on_chain, _RingIndex(snapshot)))


def _tally(t, depth: int, last: dict, on_chain: set, idx: _RingIndex) -> set:
    # acknowledgments in the block under t already hold at t
    own = idx.blocks_by_link.get(t.data)
    if own is not None:
        last = _advance(last, own, on_chain)
    return _voters(t, depth, last, on_chain, idx)


def ring_keys(ring: Iterable[EnclaveAttestation], root_key: bytes = ENCLAVE_ROOT_PUBLIC,
              image_hash: Optional[bytes] = None) -> dict:
    """Initial vote state: every attested member key at counter -1."""
    keys = {}
    for e in ring:
        key = verify_enclave(root_key, e, image_hash)
        if key is not None:
            keys[key] = -1
    return keys


def omc_ring(genesis: Any, ring: Any, time_key: bytes, snapshot: ChainSnapshot, *,
             depth: int = DEFAULT_DEPTH, root_key: bytes = ENCLAVE_ROOT_PUBLIC,
             image_hash: Optional[bytes] = None) -> list:
    """Main chain as alternating blocks and timestamp attestations, genesis first."""
    members = ring.members if isinstance(ring, Ring) else tuple(ring)
    majority = len(members) / 2
    last = ring_keys(members, root_key, image_hash)
    idx = _RingIndex(snapshot)
    z: list = []
    on_chain: set = set()
    frontier = [genesis]
    while True:
        candidates = sorted(
            (t for b in frontier for t in idx.times_of(b) if _validated(time_key, t)),
            key=encode,
        )
        frontier = []
        for t in candidates:
            if len(_tally(t, depth, last, on_chain, idx)) > majority:
                block = idx.blocks_by_link[t.data]
                z += [block, t]
                on_chain.add(link(t))
                frontier = idx.children_of(t)
                for ack in block.seqs:
                    prior = last.get(ack.issuer)
                    if prior is not None and ack.ctr > prior and _checked(ack.issuer, ack.attestation()):
                        last[ack.issuer] = ack.ctr
                break  # a majority winner is unique per height
        if not frontier:
            return z


def makecert_ring(tx: TxLink, merkles: Iterable, z: Sequence) -> Optional[Certificate]:
    """Certificate from an alternating ring main chain; heights count blocks after genesis."""
    if not z:
        return None
    by_uuid: dict = {}
    for m in merkles:
        by_uuid.setdefault(m.uuid, []).append(m)
    for h, (block, t) in enumerate(zip(z[0::2], z[1::2])):
        for m in by_uuid.get(block.merkle_uuid, []):
            if tx in m.leaves and merkle_root(m.leaves) == block.merkle_hash:
                return Certificate(tx, link(z[0]), t.ts, h, m.leaves.index(tx))
    return None
