"""Simulated trusted services: timestamping, sequencing, enclave attestation and replication.

The backends are in-process stand-ins with the same observable contracts as
the cloud services they model.  Each exposes fault-injection switches
(``available`` / ``live``) and an injectable per-call latency.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat, PublicFormat

from .core import (
    BYTES, INT, Link, DecodeError, decode, encode, link, new_uuid, random_bytes, record, sha3,
)
from .erasure import (
    CodingScheme, ErasureError, IntegrityFailure, Shard, decode_shards, encode_shards,
)

# -- keys --------------------------------------------------------------------


class KeyPair:
    """Ed25519 signing key with its 32-byte raw public key."""

    def __init__(self, secret: Optional[bytes] = None):
        self.secret = secret if secret is not None else random_bytes(32)
        self._key = Ed25519PrivateKey.from_private_bytes(self.secret)
        self.public = self._key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)

    def __repr__(self):
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def verify_signature(public: bytes, message: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


# -- errors ------------------------------------------------------------------


class ServiceError(RuntimeError):
    pass


class ServiceUnavailable(ServiceError):
    def __init__(self, what: str = "service"):
        super().__init__(f"{what} unavailable")


class SequencerDown(ServiceError):
    def __init__(self):
        super().__init__("sequencer down")


class ReplicationFailed(ServiceError):
    def __init__(self, stored: int, needed: int):
        super().__init__(f"replication failed: {stored} of {needed} required bucket writes")


class WormViolation(ServiceError):
    def __init__(self, bucket_id: str):
        super().__init__(f"WORM violation in bucket {bucket_id}: differing object under existing key")


class Unavailable(ServiceError):
    def __init__(self, detail: str = ""):
        super().__init__("unavailable" + (f": {detail}" if detail else ""))


class BucketUnavailable(ServiceError):
    pass


# -- clocks ------------------------------------------------------------------


class VirtualClock:
    """Deterministic monotonic millisecond clock; each read advances by ``tick`` ms."""

    def __init__(self, start_ms: int = 1_700_000_000_000, tick: int = 1, skew_ms: int = 0):
        self._now = start_ms
        self.tick = tick
        self.skew_ms = skew_ms
        self._lock = threading.Lock()

    def advance(self, ms: int) -> None:
        with self._lock:
            self._now += ms

    def now_ms(self) -> int:
        with self._lock:
            self._now += self.tick
            return self._now + self.skew_ms


class WallClock:
    """System time in milliseconds, forced to be non-decreasing."""

    def __init__(self, last_ms: int = 0, skew_ms: int = 0):
        self._last = last_ms
        self.skew_ms = skew_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            self._last = max(self._last, time.time_ns() // 1_000_000 + self.skew_ms)
            return self._last


def _pause(latency_ms: float) -> None:
    if latency_ms > 0:
        time.sleep(latency_ms / 1000.0)


# -- timestamp service -------------------------------------------------------


@record(6, ("data", BYTES), ("ts", INT), ("uuid", BYTES), ("sig", BYTES))
@dataclass(frozen=True)
class TimestampAttestation:
    data: bytes
    ts: int
    uuid: bytes
    sig: bytes


def _time_message(data: bytes, ts: int, uuid: bytes) -> bytes:
    return sha3(data + ts.to_bytes(8, "big", signed=True) + uuid)


EMAIL_DOMAIN = ".bky.sh"
LOCAL_PART_MAX = 64
DOMAIN_MAX = 256


def email_encode(l: Link) -> str:
    return f"{l.digest.hex()}@{l.uuid.hex()}{EMAIL_DOMAIN}"


def parse_email(address: str) -> Link:
    local, _, domain = address.partition("@")
    if not domain.endswith(EMAIL_DOMAIN):
        raise ValueError(f"not a link address: {address!r}")
    return Link(bytes.fromhex(domain[: -len(EMAIL_DOMAIN)]), bytes.fromhex(local))


def validate(key: bytes, t: Any) -> bool:
    """True iff ``t`` is a timestamp attestation correctly signed under ``key``."""
    if not isinstance(t, TimestampAttestation):
        return False
    return verify_signature(key, _time_message(t.data, t.ts, t.uuid), t.sig)


class TimestampService:
    """Signs ``(link bytes, clock reading, fresh UUID)`` like an identity-token issuer."""

    def __init__(self, key: Optional[KeyPair] = None, clock=None, latency_ms: float = 0):
        self.key = key or KeyPair()
        self.clock = clock or VirtualClock()
        self.latency_ms = latency_ms
        self.available = True

    @property
    def public_key(self) -> bytes:
        return self.key.public

    def stamp(self, l: Link) -> TimestampAttestation:
        _pause(self.latency_ms)
        if not self.available:
            raise ServiceUnavailable("timestamp service")
        local, _, domain = email_encode(l).partition("@")
        # identity providers reject addresses outside RFC 5321 bounds
        assert len(local) <= LOCAL_PART_MAX and len(domain) <= DOMAIN_MAX
        data = encode(l)
        ts = self.clock.now_ms()
        uid = new_uuid()
        return TimestampAttestation(data, ts, uid, self.key.sign(_time_message(data, ts, uid)))


# -- sequence service --------------------------------------------------------


@record(7, ("data", BYTES), ("ctr", INT), ("sig", BYTES), ("sequence_id", BYTES))
@dataclass(frozen=True)
class SequenceAttestation:
    data: bytes
    ctr: int
    sig: bytes
    sequence_id: bytes

    @property
    def uuid(self) -> bytes:
        # sequence attestations are referenced by sequencer id concatenated with the counter
        return self.sequence_id + self.ctr.to_bytes(8, "big", signed=True)


def _seq_message(data: bytes, ctr: int) -> bytes:
    return sha3(data + ctr.to_bytes(8, "big", signed=True))


def check(key: bytes, q: Any) -> bool:
    """True iff ``q`` is a sequence attestation correctly signed under ``key``."""
    if not isinstance(q, SequenceAttestation):
        return False
    return verify_signature(key, _seq_message(q.data, q.ctr), q.sig)


class SequenceService:
    """Enclave-hosted counter; a key pair and sequence id are generated at every start.

    Requests are idempotent on their bytes: re-sequencing the same bytes
    returns the attestation issued the first time.
    """

    def __init__(self, latency_ms: float = 0, image_hash: Optional[bytes] = None):
        self.latency_ms = latency_ms
        self.image_hash = image_hash or SEQUENCER_IMAGE_HASH
        self._lock = threading.Lock()
        self._boot()

    def _boot(self) -> None:
        self.key = KeyPair()
        self.sequence_id = new_uuid()
        self.next_ctr = 0
        self.issued: dict[bytes, SequenceAttestation] = {}
        self.live = True

    @property
    def public_key(self) -> bytes:
        return self.key.public

    def sequence(self, l: Link) -> SequenceAttestation:
        _pause(self.latency_ms)
        data = encode(l)
        with self._lock:
            if not self.live:
                raise SequencerDown()
            prior = self.issued.get(data)
            if prior is not None:
                return prior
            ctr = self.next_ctr
            q = SequenceAttestation(data, ctr, self.key.sign(_seq_message(data, ctr)), self.sequence_id)
            self.issued[data] = q
            self.next_ctr = ctr + 1
            return q

    def halt(self) -> None:
        with self._lock:
            self.live = False

    def restart(self) -> None:
        """Start a fresh enclave instance: new keys, new sequence id, counter back at 0."""
        with self._lock:
            self._boot()

    def state(self) -> dict:
        with self._lock:
            return {
                "secret": self.key.secret.hex(),
                "sequence_id": self.sequence_id.hex(),
                "next_ctr": self.next_ctr,
                "live": self.live,
                "issued": [encode(q).hex() for q in self.issued.values()],
            }

    @classmethod
    def from_state(cls, state: dict, latency_ms: float = 0) -> "SequenceService":
        svc = cls(latency_ms=latency_ms)
        svc.key = KeyPair(bytes.fromhex(state["secret"]))
        svc.sequence_id = bytes.fromhex(state["sequence_id"])
        svc.next_ctr = state["next_ctr"]
        svc.live = state["live"]
        svc.issued = {}
        for h in state["issued"]:
            q = decode(bytes.fromhex(h))
            svc.issued[q.data] = q
        return svc


# -- enclave attestation -----------------------------------------------------


@record(8, ("image_hash", BYTES), ("app_pubkey", BYTES), ("sig", BYTES))
@dataclass(frozen=True)
class EnclaveAttestation:
    image_hash: bytes
    app_pubkey: bytes
    sig: bytes


SEQUENCER_IMAGE_HASH = sha3(b"zipperchain-sequencer-image")
# the simulated attestation root is derived from a public constant so that
# every process agrees on the well-known verification key
ENCLAVE_ROOT = KeyPair(sha3(b"simulated-enclave-attestation-root"))
ENCLAVE_ROOT_PUBLIC = ENCLAVE_ROOT.public


def _enclave_message(image_hash: bytes, app_pubkey: bytes) -> bytes:
    return sha3(image_hash + app_pubkey)


def attest_enclave(seq: SequenceService) -> EnclaveAttestation:
    if not seq.live:
        raise SequencerDown()
    msg = _enclave_message(seq.image_hash, seq.public_key)
    return EnclaveAttestation(seq.image_hash, seq.public_key, ENCLAVE_ROOT.sign(msg))


def verify_enclave(root_key: bytes, e: Any, image_hash: Optional[bytes] = None) -> Optional[bytes]:
    """Return the attested application key, or ``None`` if ``e`` does not verify.

    When ``image_hash`` is given (the hash of a user-built image) it must
    match the attested image.
    """
    if not isinstance(e, EnclaveAttestation):
        return None
    if not verify_signature(root_key, _enclave_message(e.image_hash, e.app_pubkey), e.sig):
        return None
    if image_hash is not None and image_hash != e.image_hash:
        return None
    return e.app_pubkey


# -- replication -------------------------------------------------------------

REGIONS = ("aws-us-east", "aws-eu-west", "azure-us-east", "azure-eu-west", "gcp-us-east", "gcp-eu-west")


class BucketStore:
    """A WORM bucket: keys, once written, can only be re-written with identical bytes."""

    def __init__(self, bucket_id: str, region: str = "", directory: Optional[str] = None,
                 compliance_hold: bool = True):
        self.bucket_id = bucket_id
        self.region = region
        self.compliance_hold = compliance_hold
        self.directory = directory
        self.available = True
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()
        if directory:
            os.makedirs(directory, exist_ok=True)
            for name in os.listdir(directory):
                with open(os.path.join(directory, name), "rb") as fh:
                    self._objects[name] = fh.read()

    @staticmethod
    def name_for(key: bytes) -> str:
        return sha3(key).hex()

    def put(self, key: bytes, data: bytes) -> None:
        if not self.available:
            raise BucketUnavailable(self.bucket_id)
        name = self.name_for(key)
        with self._lock:
            existing = self._objects.get(name)
            if existing is not None:
                if existing == data:
                    return
                if self.compliance_hold:
                    raise WormViolation(self.bucket_id)
            self._objects[name] = data
            if self.directory:
                path = os.path.join(self.directory, name)
                tmp = path + ".tmp"
                with open(tmp, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)

    def get(self, key: bytes) -> Optional[bytes]:
        if not self.available:
            raise BucketUnavailable(self.bucket_id)
        return self._objects.get(self.name_for(key))

    def values(self) -> list[bytes]:
        if not self.available:
            raise BucketUnavailable(self.bucket_id)
        with self._lock:
            return list(self._objects.values())

    def tamper(self, key: bytes, data: bytes) -> None:
        """Overwrite bypassing the hold; fault injection only."""
        self._objects[self.name_for(key)] = data

    def __len__(self):
        return len(self._objects)


def default_buckets(count: int = 6, root: Optional[str] = None) -> list[BucketStore]:
    out = []
    for i in range(count):
        directory = os.path.join(root, f"bucket-{i}") if root else None
        out.append(BucketStore(f"bucket-{i}", REGIONS[i % len(REGIONS)], directory))
    return out


@dataclass
class Ack:
    link: Link
    stored: int


class Replicator:
    """Erasure-codes objects across buckets; shard ``i`` goes to bucket ``i``."""

    def __init__(self, buckets: Optional[Sequence[BucketStore]] = None,
                 scheme: Optional[CodingScheme] = None, write_quorum: Optional[int] = None,
                 latency_ms: float = 0):
        self.buckets = list(buckets) if buckets is not None else default_buckets()
        self.scheme = scheme or CodingScheme(n=len(self.buckets), k=len(self.buckets) // 2)
        if self.scheme.n != len(self.buckets):
            raise ValueError("one bucket per shard is required")
        self.write_quorum = self.scheme.n if write_quorum is None else write_quorum
        if not self.scheme.threshold <= self.write_quorum <= self.scheme.n:
            raise ValueError("write quorum must lie between n-k and n")
        self.latency_ms = latency_ms
        self.on_replicate: Optional[Callable[[Link], None]] = None

    def replicate(self, x: Any) -> Ack:
        return self.put_object(link(x), encode(x))

    def put_object(self, l: Link, data: bytes) -> Ack:
        _pause(self.latency_ms)
        key = encode(l)
        stored = 0
        for shard, bucket in zip(encode_shards(data, self.scheme, l), self.buckets):
            try:
                bucket.put(key, encode(shard))
                stored += 1
            except BucketUnavailable:
                continue
        if stored < self.write_quorum:
            raise ReplicationFailed(stored, self.write_quorum)
        if self.on_replicate:
            self.on_replicate(l)
        return Ack(l, stored)

    def reachable(self) -> list[BucketStore]:
        return [b for b in self.buckets if b.available]

    def fetch_bytes(self, l: Link) -> bytes:
        key = encode(l)
        shards = []
        for bucket in self.reachable():
            raw = bucket.get(key)
            if raw is None:
                continue
            try:
                shard = decode(raw)
            except DecodeError:
                continue
            if isinstance(shard, Shard) and shard.object_link == l:
                shards.append(shard)
        if len(shards) < self.scheme.threshold:
            raise Unavailable(f"{len(shards)} of {self.scheme.threshold} shards reachable")
        try:
            return decode_shards(shards, self.scheme)
        except IntegrityFailure:
            raise
        except ErasureError as exc:
            raise Unavailable(str(exc)) from None

    def fetch(self, l: Link) -> Any:
        x = decode(self.fetch_bytes(l))
        if getattr(x, "uuid", None) != l.uuid:
            raise IntegrityFailure()
        return x

    def links(self) -> set[Link]:
        """Every object link present in reachable buckets (a simulation privilege)."""
        reachable = self.reachable()
        if len(reachable) < self.scheme.threshold:
            raise Unavailable(f"{len(reachable)} buckets reachable")
        found = set()
        for bucket in reachable:
            for raw in bucket.values():
                try:
                    shard = decode(raw)
                except DecodeError:
                    continue
                if isinstance(shard, Shard):
                    found.add(shard.object_link)
        return found

    def put_anchor(self, name: str, data: bytes) -> None:
        """Write a small named record verbatim to every bucket, under the WORM hold."""
        key = b"anchor:" + name.encode()
        for bucket in self.buckets:
            bucket.put(key, data)

    def get_anchor(self, name: str) -> Optional[bytes]:
        key = b"anchor:" + name.encode()
        for bucket in self.reachable():
            data = bucket.get(key)
            if data is not None:
                return data
        return None
