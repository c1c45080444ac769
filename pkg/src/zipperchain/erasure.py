"""Random linear network coding over GF(2^8).

An object is split into ``n - k`` zero-padded source chunks.  Each of the
``n`` shards carries a coefficient vector and the matching GF(256) linear
combination of the chunks, so any ``n - k`` shards with independent
coefficient vectors reconstruct the object.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import BYTES, INT, OBJ, Link, encode, record, sha3

# x^8 + x^4 + x^3 + x + 1
POLY = 0x11B
MAX_DRAWS = 64


def _build_mul_table() -> np.ndarray:
    a = np.arange(256, dtype=np.uint16)[:, None].repeat(256, axis=1)
    b = np.arange(256, dtype=np.uint16)[None, :].repeat(256, axis=0)
    out = np.zeros((256, 256), dtype=np.uint16)
    for _ in range(8):
        out ^= np.where(b & 1, a, 0).astype(np.uint16)
        b = b >> 1
        a = a << 1
        a = np.where(a & 0x100, a ^ POLY, a).astype(np.uint16)
    return out.astype(np.uint8)


MUL = _build_mul_table()
INV = np.zeros(256, dtype=np.uint8)
for _x in range(1, 256):
    INV[_x] = int(np.nonzero(MUL[_x] == 1)[0][0])


def gf_mul(a: int, b: int) -> int:
    return int(MUL[a, b])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(INV[a])


def gf_pow(a: int, e: int) -> int:
    out = 1
    for _ in range(e):
        out = gf_mul(out, a)
    return out


class ErasureError(ValueError):
    pass


class InsufficientShards(ErasureError):
    def __init__(self):
        super().__init__("insufficient shards")


class DependentCoefficients(ErasureError):
    def __init__(self):
        super().__init__("dependent coefficients")


class IntegrityFailure(ErasureError):
    def __init__(self):
        super().__init__("integrity failure")


class ShardMismatch(ErasureError):
    pass


@dataclass(frozen=True)
class CodingScheme:
    n: int = 6
    k: int = 3

    def __post_init__(self):
        if not 0 <= self.k < self.n <= 255:
            raise ValueError("need 0 <= k < n <= 255")

    @property
    def threshold(self) -> int:
        return self.n - self.k


@record(11, ("object_link", OBJ), ("coefficients", BYTES), ("payload", BYTES),
        ("index", INT), ("length", INT))
@dataclass(frozen=True)
class Shard:
    object_link: Link
    coefficients: bytes
    payload: bytes
    index: int
    length: int


def rank(rows: Sequence[Sequence[int]]) -> int:
    """Rank of a small matrix over GF(256)."""
    m = [list(r) for r in rows]
    if not m:
        return 0
    cols = len(m[0])
    r = 0
    for c in range(cols):
        pivot = next((i for i in range(r, len(m)) if m[i][c]), None)
        if pivot is None:
            continue
        m[r], m[pivot] = m[pivot], m[r]
        inv = gf_inv(m[r][c])
        m[r] = [gf_mul(inv, v) for v in m[r]]
        for i in range(len(m)):
            if i != r and m[i][c]:
                f = m[i][c]
                m[i] = [v ^ gf_mul(f, w) for v, w in zip(m[i], m[r])]
        r += 1
        if r == len(m):
            break
    return r


def invert(matrix: Sequence[Sequence[int]]) -> Optional[list[list[int]]]:
    """Gauss-Jordan inverse over GF(256); ``None`` if singular."""
    size = len(matrix)
    aug = [list(row) + [int(i == j) for j in range(size)] for i, row in enumerate(matrix)]
    for c in range(size):
        pivot = next((i for i in range(c, size) if aug[i][c]), None)
        if pivot is None:
            return None
        aug[c], aug[pivot] = aug[pivot], aug[c]
        inv = gf_inv(aug[c][c])
        aug[c] = [gf_mul(inv, v) for v in aug[c]]
        for i in range(size):
            if i != c and aug[i][c]:
                f = aug[i][c]
                aug[i] = [v ^ gf_mul(f, w) for v, w in zip(aug[i], aug[c])]
    return [row[size:] for row in aug]


def _all_subsets_independent(coeffs: Sequence[Sequence[int]], m: int) -> bool:
    return all(rank(sub) == m for sub in itertools.combinations(coeffs, m))


def vandermonde(n: int, m: int) -> list[list[int]]:
    """Rows ``[x^0 .. x^(m-1)]`` at distinct points ``x = 1..n``; any m rows are independent."""
    return [[gf_pow(x, j) for j in range(m)] for x in range(1, n + 1)]


def coefficient_matrix(scheme: CodingScheme, rng: random.Random) -> list[list[int]]:
    m = scheme.threshold
    for _ in range(MAX_DRAWS):
        coeffs = [[rng.randrange(256) for _ in range(m)] for _ in range(scheme.n)]
        if _all_subsets_independent(coeffs, m):
            return coeffs
    return vandermonde(scheme.n, m)


def _combine(coeffs: Sequence[int], rows: np.ndarray) -> np.ndarray:
    out = np.zeros(rows.shape[1], dtype=np.uint8)
    for c, row in zip(coeffs, rows):
        if c:
            out ^= MUL[c][row]
    return out


def encode_shards(data: bytes, scheme: CodingScheme, link: Link,
                  rng: Optional[random.Random] = None) -> list[Shard]:
    """Encode ``data`` into ``scheme.n`` shards.

    Coefficients are drawn from ``rng``, by default a generator seeded by the
    object link, so re-encoding one object always yields identical shards.
    """
    if not data:
        raise ValueError("cannot encode an empty object")
    m = scheme.threshold
    chunk = -(-len(data) // m)
    padded = np.frombuffer(data.ljust(chunk * m, b"\0"), dtype=np.uint8).reshape(m, chunk)
    if rng is None:
        rng = random.Random(sha3(b"rlnc" + encode(link)))
    coeffs = coefficient_matrix(scheme, rng)
    return [
        Shard(link, bytes(row), _combine(row, padded).tobytes(), i, len(data))
        for i, row in enumerate(coeffs)
    ]


def _solve(shards: Sequence[Shard]) -> Optional[bytes]:
    inv = invert([list(s.coefficients) for s in shards])
    if inv is None:
        return None
    payloads = np.stack([np.frombuffer(s.payload, dtype=np.uint8) for s in shards])
    chunks = [_combine(row, payloads) for row in inv]
    return np.concatenate(chunks).tobytes()[: shards[0].length]


def decode_shards(shards: Iterable[Shard], scheme: CodingScheme) -> bytes:
    """Recover an object from at least ``n - k`` of its shards.

    When more shards than needed are supplied, subsets are tried until one
    decodes to bytes matching the object link, so a corrupted shard is
    skipped as long as enough clean ones remain.
    """
    distinct = {s.index: s for s in shards}
    shards = [distinct[i] for i in sorted(distinct)]
    m = scheme.threshold
    if len(shards) < m:
        raise InsufficientShards()
    first = shards[0]
    for s in shards:
        if s.object_link != first.object_link:
            raise ShardMismatch("shards belong to different objects")
        if len(s.payload) != len(first.payload) or s.length != first.length:
            raise ShardMismatch("shard payload lengths differ")
        if len(s.coefficients) != m:
            raise ShardMismatch("coefficient vector does not match the scheme")
    decoded_any = False
    for subset in itertools.combinations(shards, m):
        data = _solve(subset)
        if data is None:
            continue
        decoded_any = True
        if sha3(data) == first.object_link.digest:
            return data
    if not decoded_any:
        raise DependentCoefficients()
    raise IntegrityFailure()
