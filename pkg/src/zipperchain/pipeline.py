"""The write path: queue, batching, Merkle and block construction, the
replication barrier, stamping and sequencing, plus chain initialization."""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor, wait
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .core import Block, ControlPayload, Link, MerkleTree, Triad, TxLink, link, new_uuid
from .ring import (
    AllSequencersDown, SequenceItDispatcher, ack_of, data_ring_block, genesis_ring_block,
)
from .services import (
    EnclaveAttestation, Replicator, SequencerDown, SequenceService, ServiceError,
    TimestampService, WormViolation, attest_enclave,
)

DEFAULT_QUEUE_BOUND = 1 << 16


class QueueFull(RuntimeError):
    def __init__(self, bound: int):
        super().__init__(f"queue full ({bound} entries)")


class TxQueue:
    """Bounded FIFO of transaction links, safe for concurrent producers."""

    def __init__(self, bound: int = DEFAULT_QUEUE_BOUND):
        self.bound = bound
        self._items: deque = deque()
        self._lock = threading.Lock()

    def enqueue(self, tx: TxLink) -> None:
        with self._lock:
            if len(self._items) >= self.bound:
                raise QueueFull(self.bound)
            self._items.append(tx)

    def dequeue(self, limit: Optional[int] = None) -> list[TxLink]:
        with self._lock:
            if limit is None or limit >= len(self._items):
                batch = list(self._items)
                self._items.clear()
            else:
                batch = [self._items.popleft() for _ in range(limit)]
            return batch

    def requeue(self, batch: Iterable[TxLink]) -> None:
        """Put an aborted batch back at the front, keeping its order."""
        with self._lock:
            self._items.extendleft(reversed(list(batch)))

    def snapshot(self) -> list[TxLink]:
        with self._lock:
            return list(self._items)

    def __len__(self):
        with self._lock:
            return len(self._items)


@dataclass
class Services:
    """Service endpoints a chain writes through.

    With ``ring`` set the chain runs in sequencer-replacement mode and
    ``sequencer`` is ignored.
    """

    timestamp: TimestampService
    replicator: Replicator
    sequencer: Optional[SequenceService] = None
    ring: Optional[SequenceItDispatcher] = None

    @property
    def ring_mode(self) -> bool:
        return self.ring is not None

    @property
    def sequencers(self) -> list[SequenceService]:
        return list(self.ring.members) if self.ring else [self.sequencer]


def make_services(replicator: Optional[Replicator] = None, *, ring_size: int = 1,
                  stamp_ms: float = 0, sequence_ms: float = 0, clock=None) -> Services:
    replicator = replicator or Replicator()
    ts = TimestampService(clock=clock, latency_ms=stamp_ms)
    if ring_size <= 1:
        return Services(ts, replicator, SequenceService(sequence_ms))
    members = [SequenceService(sequence_ms) for _ in range(ring_size)]
    return Services(ts, replicator, None, SequenceItDispatcher(members, replicator))


@dataclass
class Event:
    stage: str
    ref: str
    start_ns: int
    end_ns: int
    ok: bool = True

    def line(self) -> str:
        return json.dumps({"stage": self.stage, "ref": self.ref, "start_ns": self.start_ns,
                           "end_ns": self.end_ns, "ok": self.ok}, sort_keys=True)


class EventLog:
    def __init__(self):
        self.events: list[Event] = []
        self._lock = threading.Lock()

    @contextmanager
    def span(self, stage: str, ref: bytes):
        start = time.perf_counter_ns()
        ok = False
        try:
            yield
            ok = True
        finally:
            with self._lock:
                self.events.append(Event(stage, ref.hex(), start, time.perf_counter_ns(), ok))

    def lines(self) -> list[str]:
        with self._lock:
            return [e.line() for e in self.events]


@dataclass
class Pending:
    """A triad past the barrier whose sequencing or Q replication has not yet succeeded."""

    block: Any
    time: Any
    merkle: MerkleTree
    seq: Any = None
    seq_replicated: bool = False


@dataclass
class ChainHandle:
    genesis: Any
    control: ControlPayload
    last_time_link: Link
    services: Services
    queue: TxQueue = field(default_factory=TxQueue)
    enclave: Optional[EnclaveAttestation] = None
    batch_max: Optional[int] = None
    log: EventLog = field(default_factory=EventLog)
    pending: Optional[Pending] = None
    acks: list = field(default_factory=list)
    fork_next: bool = False
    on_finalize: Optional[Callable[[Triad, MerkleTree], None]] = None

    @property
    def genesis_link(self) -> Link:
        return link(self.genesis)

    @property
    def ring(self) -> tuple:
        return self.control.ring


def init_chain(services: Services, *, queue_bound: int = DEFAULT_QUEUE_BOUND,
               batch_max: Optional[int] = None) -> tuple[Any, Triad, ChainHandle]:
    """Create, stamp, sequence and replicate the genesis block."""
    rep, ts = services.replicator, services.timestamp
    if services.ring_mode:
        enclaves = tuple(attest_enclave(m) for m in services.ring.members)
        control = ControlPayload(new_uuid(), enclaves[0].app_pubkey, ts.public_key, enclaves)
        genesis = genesis_ring_block(control)
        enclave = enclaves[0]
    else:
        enclave = attest_enclave(services.sequencer)
        control = ControlPayload(new_uuid(), services.sequencer.public_key, ts.public_key)
        genesis = Block(new_uuid(), link(control), None)
    rep.replicate(control)
    rep.replicate(genesis)
    t0 = ts.stamp(link(genesis))
    rep.replicate(t0)
    chain = ChainHandle(genesis, control, link(t0), services, TxQueue(queue_bound), enclave, batch_max)
    if services.ring_mode:
        q0, i = services.ring.dispatch(link(t0))
        chain.acks.append(ack_of(q0, services.ring.members[i].public_key))
    else:
        q0 = services.sequencer.sequence(link(t0))
        rep.replicate(q0)
    return genesis, Triad(genesis, t0, q0), chain


def write(tx: TxLink, chain: ChainHandle) -> bool:
    """Enqueue ``tx``; acceptance says nothing about it being recorded yet."""
    chain.queue.enqueue(tx)
    return True


_pools: dict = {}
_pools_lock = threading.Lock()


def _pool() -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get("io")
        if pool is None:
            pool = _pools["io"] = ThreadPoolExecutor(max_workers=8, thread_name_prefix="zip")
        return pool


def _finalize(chain: ChainHandle) -> Optional[Triad]:
    """Sequence and replicate Q for the pending triad; ``None`` while that keeps failing."""
    p = chain.pending
    svc = chain.services
    ref = p.block.uuid
    try:
        if p.seq is None:
            with chain.log.span("sequence", ref):
                if svc.ring_mode:
                    q, i = svc.ring.dispatch(link(p.time))
                    p.seq, p.seq_replicated = q, True
                    chain.acks.append(ack_of(q, svc.ring.members[i].public_key))
                else:
                    p.seq = svc.sequencer.sequence(link(p.time))
        if not p.seq_replicated:
            with chain.log.span("replicate_seq", ref):
                svc.replicator.replicate(p.seq)
            p.seq_replicated = True
    except (SequencerDown, AllSequencersDown):
        return None
    except WormViolation:
        raise
    except ServiceError:
        return None
    tri = Triad(p.block, p.time, p.seq)
    chain.last_time_link = link(p.time)
    chain.pending = None
    if chain.on_finalize:
        chain.on_finalize(tri, p.merkle)
    return tri


def _build_block(chain: ChainHandle, merkle: MerkleTree, prev: Link) -> Any:
    if chain.services.ring_mode:
        return data_ring_block(merkle, prev, chain.acks)
    return Block(new_uuid(), link(merkle), prev)


def _replicate_and_stamp(chain: ChainHandle, merkle: MerkleTree, block: Any) -> Any:
    """Steps 5 to 7 in parallel; returns the replicated timestamp attestation."""
    svc = chain.services
    ref = block.uuid

    def rep_merkle():
        with chain.log.span("replicate_merkle", ref):
            svc.replicator.replicate(merkle)

    def rep_block():
        with chain.log.span("replicate_block", ref):
            svc.replicator.replicate(block)

    def stamp_and_rep():
        with chain.log.span("stamp", ref):
            t = svc.timestamp.stamp(link(block))
        with chain.log.span("replicate_time", ref):
            svc.replicator.replicate(t)
        return t

    pool = _pool()
    futures = [pool.submit(rep_merkle), pool.submit(rep_block), pool.submit(stamp_and_rep)]
    wait(futures)  # barrier
    for f in futures:
        exc = f.exception()
        if exc is not None:
            raise exc
    return futures[2].result()


def _inject_fork(chain: ChainHandle, merkle: MerkleTree, prev: Link) -> None:
    """A sibling block on the same predecessor, sequenced after the original."""
    twin = MerkleTree(new_uuid(), merkle.leaves)
    block = _build_block(chain, twin, prev)
    t = _replicate_and_stamp(chain, twin, block)
    svc = chain.services
    if svc.ring_mode:
        svc.ring.dispatch(link(t))
    else:
        svc.replicator.replicate(svc.sequencer.sequence(link(t)))


def zip_step(chain: ChainHandle) -> Optional[Triad]:
    """One batch through the write path.

    A triad left unfinalized by an earlier step is retried first and, once
    it finalizes, is this step's result.  A service failure before the
    barrier puts the batch back at the head of the queue and re-raises.
    """
    if chain.pending is not None:
        return _finalize(chain)
    batch = chain.queue.dequeue(chain.batch_max)
    if not batch:
        return None
    merkle = MerkleTree(new_uuid(), tuple(batch))
    prev = chain.last_time_link
    block = _build_block(chain, merkle, prev)
    try:
        t = _replicate_and_stamp(chain, merkle, block)
    except ServiceError:
        chain.queue.requeue(batch)
        raise
    if chain.services.ring_mode:
        chain.acks = []
    chain.pending = Pending(block, t, merkle)
    tri = _finalize(chain)
    if tri is not None and chain.fork_next:
        chain.fork_next = False
        _inject_fork(chain, merkle, prev)
    return tri


@dataclass
class Fault:
    step: int
    action: str
    target: int = 0


FAULT_ACTIONS = (
    "halt_sequencer", "resume_sequencer", "restart_sequencer", "bucket_down", "bucket_up",
    "timestamp_down", "timestamp_up", "fork",
)


class FaultSchedule:
    """Faults applied before the zip step with the matching index."""

    def __init__(self, faults: Iterable[Fault] = ()):
        self.faults = list(faults)
        for f in self.faults:
            if f.action not in FAULT_ACTIONS:
                raise ValueError(f"unknown fault action {f.action!r}")

    def add(self, step: int, action: str, target: int = 0) -> "FaultSchedule":
        if action not in FAULT_ACTIONS:
            raise ValueError(f"unknown fault action {action!r}")
        self.faults.append(Fault(step, action, target))
        return self

    def apply(self, step: int, chain: ChainHandle) -> list[Fault]:
        applied = [f for f in self.faults if f.step == step]
        svc = chain.services
        for f in applied:
            if f.action == "halt_sequencer":
                svc.sequencers[f.target].halt()
            elif f.action == "resume_sequencer":
                svc.sequencers[f.target].live = True
            elif f.action == "restart_sequencer":
                svc.sequencers[f.target].restart()
            elif f.action == "bucket_down":
                svc.replicator.buckets[f.target].available = False
            elif f.action == "bucket_up":
                svc.replicator.buckets[f.target].available = True
            elif f.action == "timestamp_down":
                svc.timestamp.available = False
            elif f.action == "timestamp_up":
                svc.timestamp.available = True
            elif f.action == "fork":
                chain.fork_next = True
        return applied


@dataclass
class RunReport:
    triads: list = field(default_factory=list)
    steps: int = 0
    stalled: list = field(default_factory=list)
    aborted: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def lines(self) -> list[str]:
        return [e.line() for e in self.events]

    def summary(self) -> dict:
        return {"steps": self.steps, "triads": len(self.triads), "stalled": len(self.stalled),
                "aborted": len(self.aborted)}


def _faults_ahead(faults: Optional[FaultSchedule], step: int) -> bool:
    return faults is not None and any(f.step >= step for f in faults.faults)


def run_pipeline(chain: ChainHandle, interval_ms: float = 10,
                 stop_condition: Optional[Callable[[RunReport], bool]] = None, *,
                 max_steps: Optional[int] = None,
                 faults: Optional[FaultSchedule] = None) -> RunReport:
    """Drive ``zip_step`` on a fixed cadence.

    Without ``stop_condition`` or ``max_steps`` the run ends at the first
    step that yields no triad once no scheduled fault lies ahead.  Aborted
    steps are recorded and the run continues; WORM violations propagate.
    """
    report = RunReport()
    first_event = len(chain.log.events)
    open_ended = stop_condition is None and max_steps is None
    while True:
        if stop_condition is not None and stop_condition(report):
            break
        if max_steps is not None and report.steps >= max_steps:
            break
        started = time.monotonic()
        if faults is not None:
            faults.apply(report.steps, chain)
        tri = None
        try:
            tri = zip_step(chain)
        except WormViolation:
            raise
        except ServiceError as exc:
            report.aborted.append((report.steps, str(exc)))
        else:
            if tri is not None:
                report.triads.append(tri)
            elif chain.pending is not None:
                report.stalled.append(report.steps)
        report.steps += 1
        if open_ended and tri is None and not _faults_ahead(faults, report.steps):
            break
        remaining = interval_ms / 1000.0 - (time.monotonic() - started)
        if remaining > 0:
            time.sleep(remaining)
    report.events = chain.log.events[first_event:]
    return report
