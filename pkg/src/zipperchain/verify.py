"""Client-side verification: true triads, heights, the main chain and certificates."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Optional, Sequence, Union

from .core import (
    Certificate, ControlPayload, Link, MerkleTree, Triad, TxLink, encode, leaf_index, link, link_bytes,
)
from .erasure import IntegrityFailure
from .services import (
    ENCLAVE_ROOT_PUBLIC, SequenceAttestation, TimestampAttestation, Unavailable, check, validate,
    verify_enclave,
)


class SnapshotIncomplete(RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("snapshot incomplete" + (f": {detail}" if detail else ""))


class UnresolvablePath(LookupError):
    def __init__(self):
        super().__init__("unresolvable path")


class DifferentChains(ValueError):
    def __init__(self):
        super().__init__("different chains")


@dataclass
class ChainSnapshot:
    """Whatever objects a client managed to download; may be partial or hostile."""

    blocks: set = field(default_factory=set)
    times: set = field(default_factory=set)
    seqs: set = field(default_factory=set)
    merkles: set = field(default_factory=set)
    controls: set = field(default_factory=set)

    def add(self, obj: Any) -> None:
        if isinstance(obj, TimestampAttestation):
            self.times.add(obj)
        elif isinstance(obj, SequenceAttestation):
            self.seqs.add(obj)
        elif isinstance(obj, MerkleTree):
            self.merkles.add(obj)
        elif isinstance(obj, ControlPayload):
            self.controls.add(obj)
        elif hasattr(obj, "prev_time_link"):
            self.blocks.add(obj)

    def discard(self, obj: Any) -> None:
        for bucket in (self.blocks, self.times, self.seqs, self.merkles, self.controls):
            bucket.discard(obj)

    @classmethod
    def of(cls, objects: Iterable[Any]) -> "ChainSnapshot":
        snap = cls()
        for obj in objects:
            snap.add(obj)
        return snap

    def objects(self) -> list:
        return [*self.controls, *self.blocks, *self.times, *self.seqs, *self.merkles]

    def copy(self) -> "ChainSnapshot":
        return ChainSnapshot(set(self.blocks), set(self.times), set(self.seqs),
                             set(self.merkles), set(self.controls))


@lru_cache(maxsize=1 << 16)
def _validated(key: bytes, t: Any) -> bool:
    return validate(key, t)


@lru_cache(maxsize=1 << 16)
def _checked(key: bytes, q: Any) -> bool:
    return check(key, q)


def truetriad(tri: Triad, time_key: bytes, seq_key: bytes) -> bool:
    """All four conditions: T attests B, T is valid, Q attests T, Q is valid."""
    try:
        return (
            tri.time.data == link_bytes(tri.block)
            and _validated(time_key, tri.time)
            and tri.seq.data == link_bytes(tri.time)
            and _checked(seq_key, tri.seq)
        )
    except (AttributeError, TypeError):
        return False


class TriadIndex:
    """All true triads formable from a snapshot, indexed for the main-chain walk."""

    def __init__(self, snapshot: ChainSnapshot, time_key: bytes, seq_key: bytes):
        times = {link_bytes(t): t for t in snapshot.times}
        blocks = {link_bytes(b): b for b in snapshot.blocks}
        self.triads: list[Triad] = []
        for q in snapshot.seqs:
            t = times.get(q.data)
            b = blocks.get(t.data) if t is not None else None
            if b is None:
                continue
            tri = Triad(b, t, q)
            if truetriad(tri, time_key, seq_key):
                self.triads.append(tri)
        self.ctrs = {tri.ctr for tri in self.triads}
        self._children: dict = defaultdict(list)
        for tri in self.triads:
            if tri.block.prev_time_link is not None:
                self._children[tri.block.prev_time_link].append(tri)

    def successors(self, time: TimestampAttestation) -> list[Triad]:
        return self._children.get(link(time), [])

    def count_between(self, lo: int, hi: int) -> int:
        """Number of distinct true-triad counters in the open interval ``(lo, hi)``."""
        if hi - lo <= 1:
            return 0
        if hi - lo - 1 < len(self.ctrs):
            return sum(1 for c in range(lo + 1, hi) if c in self.ctrs)
        return sum(1 for c in self.ctrs if lo < c < hi)


def _order_key(tri: Triad):
    return tri.ctr, encode(tri)


def control_of(genesis: Any, snapshot: ChainSnapshot) -> Optional[ControlPayload]:
    for c in snapshot.controls:
        if link(c) == genesis.payload_link:
            return c
    return None


def _assert_invariants(z: Sequence[Triad], seen: int, idx: TriadIndex, genesis_link) -> None:
    g = z[0]
    assert g.ctr == 0 and link(g.block) == genesis_link and g in idx.triads, \
        "main chain must start at the genesis true triad with counter 0"
    assert seen == max(t.ctr for t in z), "seen boundary must be the largest counter on the chain"
    missing = [c for c in range(seen + 1) if c not in idx.ctrs]
    assert not missing, f"counters {missing[:5]} below the seen boundary lack a true triad"
    for prev, cur in zip(z, z[1:]):
        assert cur.block.prev_time_link == link(prev.time), "chain element does not extend its predecessor"
        assert cur.ctr == min(t.ctr for t in idx.successors(prev.time)), \
            "chain element is not the minimal-counter successor"


def omc(genesis: Any, enclave: Any, snapshot: ChainSnapshot, *,
        root_key: bytes = ENCLAVE_ROOT_PUBLIC, image_hash: Optional[bytes] = None,
        check_invariants: bool = False) -> list[Triad]:
    """The main chain provable from ``snapshot``.

    Grows the chain from the genesis triad by the lowest-counter true-triad
    successor, but only while every smaller counter is accounted for by a
    true triad in the snapshot; otherwise an unseen triad could still be the
    rightful successor and the provable prefix is returned.
    """
    control = control_of(genesis, snapshot)
    if control is None:
        return []
    time_key, seq_key = control.time_pubkey, control.seq_pubkey
    if verify_enclave(root_key, enclave, image_hash) != seq_key:
        return []  # unattested sequencer key

    idx = TriadIndex(snapshot, time_key, seq_key)
    genesis_link = link(genesis)
    starts = [t for t in idx.triads if t.ctr == 0 and link(t.block) == genesis_link]
    if not starts:
        return []
    z = [min(starts, key=_order_key)]
    ctr = 0
    while True:
        if check_invariants:
            _assert_invariants(z, ctr, idx, genesis_link)
        succs = idx.successors(z[-1].time)
        if not succs:
            return z
        best = min(succs, key=_order_key)
        if ctr <= best.ctr:
            if idx.count_between(ctr, best.ctr) != best.ctr - ctr - 1:
                return z  # missing a triad
            ctr = best.ctr
        z.append(best)


class HeightIndex:
    """Triad heights by walking previous-timestamp links, memoized per block."""

    def __init__(self, snapshot: ChainSnapshot):
        self._times = {link(t): t for t in snapshot.times}
        self._blocks = {link_bytes(b): b for b in snapshot.blocks}
        self._memo: dict = {}

    def of_block(self, block: Any) -> int:
        path = []
        b = block
        while True:
            key = link(b)
            if key in self._memo:
                h = self._memo[key]
                break
            if b.prev_time_link is None:
                h = self._memo[key] = 0
                break
            t = self._times.get(b.prev_time_link)
            parent = self._blocks.get(t.data) if t is not None else None
            if parent is None:
                raise UnresolvablePath()
            path.append(key)
            b = parent
        for key in reversed(path):
            h += 1
            self._memo[key] = h
        return self._memo[link(block)]

    def __call__(self, tri: Triad) -> int:
        return self.of_block(tri.block)


def height(tri: Triad, context: Union[ChainSnapshot, HeightIndex]) -> int:
    heights = context if isinstance(context, HeightIndex) else HeightIndex(context)
    return heights(tri)


def triad_less(a: Triad, b: Triad, context: Union[ChainSnapshot, HeightIndex]) -> bool:
    heights = context if isinstance(context, HeightIndex) else HeightIndex(context)
    ha, hb = heights(a), heights(b)
    return ha < hb or (ha == hb and a.ctr < b.ctr)


def total_order(triads: Iterable[Triad], context: Union[ChainSnapshot, HeightIndex]) -> list[Triad]:
    heights = context if isinstance(context, HeightIndex) else HeightIndex(context)
    return sorted(triads, key=lambda t: (heights(t), t.ctr))


def makecert(tx: TxLink, merkles: Iterable[MerkleTree], z: Sequence[Triad]) -> Optional[Certificate]:
    """Certificate for the first main-chain block whose Merkle tree holds ``tx``."""
    if not z:
        return None
    by_link = {link(m): m for m in merkles}
    for h, tri in enumerate(z):
        m = by_link.get(tri.block.payload_link)
        if m is not None and tx in m.leaves:
            return Certificate(tx, link(z[0].block), tri.time.ts, h, leaf_index(tx, m.leaves))
    return None


def cert_precedes(a: Certificate, b: Certificate) -> bool:
    if a.genesis_link != b.genesis_link:
        raise DifferentChains()
    return a.height < b.height or (a.height == b.height and a.rank < b.rank)


class Verifier:
    """Downloads a chain snapshot, caches it, and issues certificates.

    ``refresh`` only fetches objects it has not seen before, so repeated
    verification extends the cached state rather than re-downloading it.
    """

    def __init__(self, genesis: Any, replicator, enclave: Any, *,
                 root_key: bytes = ENCLAVE_ROOT_PUBLIC, image_hash: Optional[bytes] = None):
        self.genesis = genesis
        self.replicator = replicator
        self.enclave = enclave
        self.root_key = root_key
        self.image_hash = image_hash
        self.snapshot = ChainSnapshot()
        self.chain: list = []
        self._pairs: list = []
        self._known: set = set()
        self._certs: Optional[dict] = None

    def refresh(self) -> list:
        """Fetch new objects and recompute the main chain.

        Returns triads, or alternating blocks and timestamps for ring chains.
        """
        try:
            links = self.replicator.links()
        except Unavailable as exc:
            raise SnapshotIncomplete(str(exc)) from None
        for l in links - self._known:
            try:
                obj = self.replicator.fetch(l)
            except (Unavailable, IntegrityFailure) as exc:
                raise SnapshotIncomplete(str(exc)) from None
            self.snapshot.add(obj)
            self._known.add(l)
        control = control_of(self.genesis, self.snapshot)
        if control is not None and control.ring:
            from .ring import omc_ring

            z = omc_ring(self.genesis, control.ring, control.time_pubkey, self.snapshot,
                         root_key=self.root_key, image_hash=self.image_hash)
            self.chain = z
            self._pairs = list(zip(z[0::2], z[1::2]))
        else:
            self.chain = omc(self.genesis, self.enclave, self.snapshot,
                             root_key=self.root_key, image_hash=self.image_hash)
            self._pairs = [(t.block, t.time) for t in self.chain]
        self._certs = None
        return self.chain

    def certificate(self, tx: TxLink) -> Optional[Certificate]:
        if self._certs is None:
            self._certs = self._index()
        return self._certs.get(tx)

    def _index(self) -> dict:
        certs: dict = {}
        if not self._pairs:
            return certs
        by_link = {}
        for m in self.snapshot.merkles:
            by_link[link(m)] = m
            by_link[Link(m.uuid, m.root)] = m  # ring blocks reference the root
        chain_link = link(self._pairs[0][0])
        for h, (block, time) in enumerate(self._pairs):
            m = by_link.get(block.payload_link)
            if m is None:
                continue
            for rank, tx in enumerate(m.leaves):
                certs.setdefault(tx, Certificate(tx, chain_link, time.ts, h, rank))
        return certs


def verify(genesis: Any, tx: TxLink, replicator, enclave: Any, **kwargs) -> Optional[Certificate]:
    v = Verifier(genesis, replicator, enclave, **kwargs)
    v.refresh()
    return v.certificate(tx)
