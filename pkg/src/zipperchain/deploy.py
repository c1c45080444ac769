"""A chain deployment on local disk.

Buckets live in ``<root>/bucket-<i>/``.  The simulated services' private
state (keys, counters, clock) and the writer's queue and chain tail live in
``<root>/state.json`` so that separate commands act on one deployment.
"""

from __future__ import annotations

import json
import os
from typing import Optional

from . import core
from .config import Config
from .core import Link, TxLink, decode, encode, link, sha3
from .erasure import CodingScheme
from .pipeline import ChainHandle, FaultSchedule, Pending, Services, TxQueue, init_chain
from .ring import SequenceItDispatcher
from .services import (
    KeyPair, Replicator, SequenceService, TimestampService, VirtualClock, WormViolation,
    default_buckets,
)

STATE_FILE = "state.json"


class NotInitialized(RuntimeError):
    def __init__(self, root: str):
        super().__init__(f"no chain initialized under {root}")


def _hex(x) -> Optional[str]:
    return None if x is None else encode(x).hex()


def _unhex(h: Optional[str]):
    return None if h is None else decode(bytes.fromhex(h))


class Deployment:
    def __init__(self, config: Config):
        self.config = config
        self.root = config.root
        self.state_path = os.path.join(self.root, STATE_FILE)
        self.replicator = Replicator(
            default_buckets(config.buckets, self.root),
            CodingScheme(config.buckets, config.parity),
            config.write_quorum,
            config.replicate_ms,
        )
        for b in config.buckets_down:
            self.replicator.buckets[b].available = False
        self.chain: Optional[ChainHandle] = None
        self.step = 0
        self._draws = 0

    # -- determinism ---------------------------------------------------------

    def _reseed(self) -> None:
        """Derive identifier randomness from the seed and the number of commands run so far."""
        if self.config.seed is None:
            core.seed(None)
            return
        material = sha3(f"{self.config.seed}:{self._draws}".encode())
        core.seed(int.from_bytes(material[:8], "big"))
        self._draws += 1

    # -- lifecycle -----------------------------------------------------------

    @property
    def initialized(self) -> bool:
        return os.path.exists(self.state_path)

    def init(self):
        """Create the chain; refuses to run twice against the same buckets."""
        os.makedirs(self.root, exist_ok=True)
        if self.replicator.get_anchor("genesis") is not None:
            raise WormViolation("anchor")
        self._reseed()
        cfg = self.config
        ts = TimestampService(clock=VirtualClock(), latency_ms=cfg.stamp_ms)
        if cfg.ring_size > 1:
            members = [SequenceService(cfg.sequence_ms) for _ in range(cfg.ring_size)]
            services = Services(ts, self.replicator, None, SequenceItDispatcher(members, self.replicator))
        else:
            services = Services(ts, self.replicator, SequenceService(cfg.sequence_ms))
        genesis, triad, chain = init_chain(services, queue_bound=cfg.queue_bound, batch_max=cfg.batch_max)
        self.replicator.put_anchor("genesis", encode(link(genesis)))
        self.replicator.put_anchor("enclave", encode(chain.enclave))
        self.chain = chain
        self.save()
        return genesis, triad

    @classmethod
    def open(cls, config: Config) -> "Deployment":
        dep = cls(config)
        if not dep.initialized:
            raise NotInitialized(config.root)
        with open(dep.state_path, encoding="utf-8") as fh:
            state = json.load(fh)
        dep._restore(state)
        dep._reseed()
        return dep

    def _restore(self, state: dict) -> None:
        cfg = self.config
        self.step = state["step"]
        self._draws = state["draws"]
        clock = VirtualClock(start_ms=state["clock_ms"])
        ts = TimestampService(KeyPair(bytes.fromhex(state["timestamp_secret"])), clock, cfg.stamp_ms)
        seqs = [SequenceService.from_state(s, cfg.sequence_ms) for s in state["sequencers"]]
        if state["ring"]:
            dispatcher = SequenceItDispatcher(seqs, self.replicator)
            dispatcher._next = state["dispatch_next"]
            services = Services(ts, self.replicator, None, dispatcher)
        else:
            services = Services(ts, self.replicator, seqs[0])
        queue = TxQueue(cfg.queue_bound)
        for text in state["queue"]:
            queue.enqueue(TxLink.from_text(text))
        chain = ChainHandle(
            genesis=_unhex(state["genesis"]),
            control=_unhex(state["control"]),
            last_time_link=_unhex(state["last_time_link"]),
            services=services,
            queue=queue,
            enclave=_unhex(state["enclave"]),
            batch_max=cfg.batch_max,
        )
        p = state.get("pending")
        if p:
            chain.pending = Pending(_unhex(p["block"]), _unhex(p["time"]), _unhex(p["merkle"]),
                                    _unhex(p["seq"]), p["seq_replicated"])
        chain.acks = [_unhex(a) for a in state["acks"]]
        self.chain = chain

    def save(self) -> None:
        chain = self.chain
        svc = chain.services
        p = chain.pending
        state = {
            "step": self.step,
            "draws": self._draws,
            "clock_ms": svc.timestamp.clock.now_ms(),
            "timestamp_secret": svc.timestamp.key.secret.hex(),
            "ring": svc.ring_mode,
            "dispatch_next": svc.ring._next if svc.ring_mode else 0,
            "sequencers": [s.state() for s in svc.sequencers],
            "genesis": _hex(chain.genesis),
            "control": _hex(chain.control),
            "enclave": _hex(chain.enclave),
            "last_time_link": _hex(chain.last_time_link),
            "queue": [tx.text() for tx in chain.queue.snapshot()],
            "acks": [_hex(a) for a in chain.acks],
            "pending": None if p is None else {
                "block": _hex(p.block), "time": _hex(p.time), "merkle": _hex(p.merkle),
                "seq": _hex(p.seq), "seq_replicated": p.seq_replicated,
            },
        }
        tmp = self.state_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.state_path)

    # -- helpers -------------------------------------------------------------

    def fault_schedule(self) -> FaultSchedule:
        """Configured faults still ahead, indexed by steps of the next run.

        Faults that fell in earlier runs have already taken effect and were
        persisted with the service state.
        """
        cfg = self.config
        sched = FaultSchedule()
        if cfg.sequencer_halt_step is not None and cfg.sequencer_halt_step - 1 >= self.step:
            for m in cfg.sequencer_halt_members:
                sched.add(cfg.sequencer_halt_step - 1 - self.step, "halt_sequencer", m)
        for s in cfg.fork_steps:
            if s - 1 >= self.step:
                sched.add(s - 1 - self.step, "fork")
        return sched

    def genesis_link(self) -> Link:
        raw = self.replicator.get_anchor("genesis")
        if raw is None:
            raise NotInitialized(self.root)
        return decode(raw)

    def enclave(self):
        raw = self.replicator.get_anchor("enclave")
        return None if raw is None else decode(raw)
