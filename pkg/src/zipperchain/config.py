"""Operator configuration: flat ``key = value`` text with documented defaults."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


# config key -> (attribute, parser)
_KEYS = {
    "root": ("root", str),
    "seed": ("seed", int),
    "ring_size": ("ring_size", int),
    "buckets": ("buckets", int),
    "parity": ("parity", int),
    "write_quorum": ("write_quorum", int),
    "batch_interval_ms": ("batch_interval_ms", float),
    "batch_max": ("batch_max", int),
    "queue_bound": ("queue_bound", int),
    "latency.stamp_ms": ("stamp_ms", float),
    "latency.sequence_ms": ("sequence_ms", float),
    "latency.replicate_ms": ("replicate_ms", float),
    "fault.buckets_down": ("buckets_down", _ints),
    "fault.sequencer_halt_step": ("sequencer_halt_step", int),
    "fault.sequencer_halt_members": ("sequencer_halt_members", _ints),
    "fault.fork_steps": ("fork_steps", _ints),
}


@dataclass(frozen=True)
class Config:
    """Defaults: six buckets with 3-of-6 coding, a single sequencer, no latency, no faults.

    Fault steps count zip steps from 1 over the lifetime of a deployment.
    """

    root: str = "zipperchain-data"
    seed: Optional[int] = None
    ring_size: int = 1
    buckets: int = 6
    parity: int = 3
    write_quorum: Optional[int] = None
    batch_interval_ms: float = 0
    batch_max: Optional[int] = None
    queue_bound: int = 1 << 16
    stamp_ms: float = 0
    sequence_ms: float = 0
    replicate_ms: float = 0
    buckets_down: tuple = ()
    sequencer_halt_step: Optional[int] = None
    sequencer_halt_members: tuple = (0,)
    fork_steps: tuple = field(default=())

    def __post_init__(self):
        if self.ring_size < 1 or self.ring_size % 2 == 0:
            raise ConfigError("ring_size must be a positive odd number")
        if not 0 <= self.parity < self.buckets:
            raise ConfigError("parity must satisfy 0 <= parity < buckets")
        if self.queue_bound < 1:
            raise ConfigError("queue_bound must be positive")
        for b in self.buckets_down:
            if not 0 <= b < self.buckets:
                raise ConfigError(f"fault.buckets_down names unknown bucket {b}")
        for m in self.sequencer_halt_members:
            if not 0 <= m < self.ring_size:
                raise ConfigError(f"fault.sequencer_halt_members names unknown member {m}")

    def with_overrides(self, pairs: dict) -> "Config":
        changes = {}
        for key, raw in pairs.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            attr, parse = _KEYS[key]
            try:
                changes[attr] = parse(raw.strip())
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw.strip()!r}") from None
        return replace(self, **changes)

    @classmethod
    def parse(cls, text: str) -> "Config":
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            pairs[key.strip()] = value
        return cls().with_overrides(pairs)

    @classmethod
    def load(cls, path: str) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def render(self) -> str:
        by_attr = {attr: key for key, (attr, _) in _KEYS.items()}
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{by_attr[f.name]} = {v}")
        return "\n".join(lines) + "\n"
