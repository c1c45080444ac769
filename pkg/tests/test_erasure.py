import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from zipperchain.core import Link, sha3
from zipperchain.erasure import (
    MUL, CodingScheme, DependentCoefficients, InsufficientShards, IntegrityFailure, Shard,
    ShardMismatch, coefficient_matrix, decode_shards, encode_shards, gf_inv, gf_mul, rank,
    vandermonde,
)
from oracles import gf_mul_oracle, log_antilog_tables

SCHEME = CodingScheme(6, 3)


def obj(data: bytes) -> Link:
    return Link(sha3(data)[:16], sha3(data))


def test_mul_table_matches_log_antilog_oracle():
    tables = log_antilog_tables()
    for a in range(256):
        for b in range(256):
            assert MUL[a, b] == gf_mul_oracle(a, b, tables)


def test_field_axioms():
    for a in range(1, 256):
        assert gf_mul(a, gf_inv(a)) == 1
        assert gf_mul(a, 1) == a
        assert gf_mul(a, 0) == 0
    rng = random.Random(0)
    for _ in range(2000):
        a, b, c = (rng.randrange(256) for _ in range(3))
        assert gf_mul(a, b) == gf_mul(b, a)
        assert gf_mul(a, gf_mul(b, c)) == gf_mul(gf_mul(a, b), c)
        assert gf_mul(a, b ^ c) == gf_mul(a, b) ^ gf_mul(a, c)


def test_aes_reference_product():
    # FIPS 197 worked example: {57} . {83} = {c1}
    assert gf_mul(0x57, 0x83) == 0xC1


def test_three_byte_object_gives_one_byte_payloads():
    data = b"abc"
    shards = encode_shards(data, SCHEME, obj(data))
    assert len(shards) == 6
    assert all(len(s.payload) == 1 and s.length == 3 for s in shards)
    assert [s.index for s in shards] == list(range(6))


def test_every_three_subset_decodes():
    rng = random.Random(1)
    for size in (1, 2, 3, 4, 100, 4097):
        data = bytes(rng.randrange(256) for _ in range(size))
        shards = encode_shards(data, SCHEME, obj(data))
        for subset in itertools.combinations(shards, 3):
            assert decode_shards(subset, SCHEME) == data


def test_all_shards_same_as_minimal_subset():
    data = b"over-determined" * 10
    shards = encode_shards(data, SCHEME, obj(data))
    assert decode_shards(shards, SCHEME) == decode_shards(shards[3:], SCHEME) == data


def test_two_shards_insufficient():
    data = b"hello world"
    shards = encode_shards(data, SCHEME, obj(data))
    with pytest.raises(InsufficientShards, match="insufficient shards"):
        decode_shards(shards[:2], SCHEME)


def test_duplicate_shards_do_not_count_twice():
    data = b"hello world"
    shards = encode_shards(data, SCHEME, obj(data))
    with pytest.raises(InsufficientShards):
        decode_shards([shards[0], shards[0], shards[1]], SCHEME)


def test_corrupted_payload_is_integrity_failure():
    data = bytes(range(200))
    shards = encode_shards(data, SCHEME, obj(data))
    bad = Shard(shards[0].object_link, shards[0].coefficients,
                bytes([shards[0].payload[0] ^ 1]) + shards[0].payload[1:], 0, len(data))
    with pytest.raises(IntegrityFailure, match="integrity failure"):
        decode_shards([bad, shards[1], shards[2]], SCHEME)
    # with spare clean shards the corrupted one is skipped
    assert decode_shards([bad, *shards[1:]], SCHEME) == data


def test_dependent_coefficients():
    data = b"dependent"
    shards = encode_shards(data, SCHEME, obj(data))
    twin = Shard(shards[0].object_link, shards[0].coefficients, shards[0].payload, 5, len(data))
    fake = Shard(shards[0].object_link, bytes(3), shards[1].payload, 4, len(data))
    with pytest.raises(DependentCoefficients, match="dependent coefficients"):
        decode_shards([shards[0], twin, fake], SCHEME)


def test_mixed_objects_rejected():
    a, b = b"first object", b"other object"
    sa = encode_shards(a, SCHEME, obj(a))
    sb = encode_shards(b, SCHEME, obj(b))
    with pytest.raises(ShardMismatch):
        decode_shards([sa[0], sa[1], sb[2]], SCHEME)


def test_encoding_deterministic_per_link():
    data = b"worm re-put must be identical"
    assert encode_shards(data, SCHEME, obj(data)) == encode_shards(data, SCHEME, obj(data))


def test_empty_object_rejected():
    with pytest.raises(ValueError):
        encode_shards(b"", SCHEME, obj(b""))


def test_coefficients_all_subsets_independent():
    rng = random.Random(3)
    for _ in range(50):
        coeffs = coefficient_matrix(SCHEME, rng)
        assert all(rank(sub) == 3 for sub in itertools.combinations(coeffs, 3))


class _ZeroRng(random.Random):
    def randrange(self, *args, **kwargs):
        return 0


def test_vandermonde_fallback():
    coeffs = coefficient_matrix(SCHEME, _ZeroRng())
    assert coeffs == vandermonde(6, 3)
    assert all(rank(sub) == 3 for sub in itertools.combinations(coeffs, 3))
    data = b"fallback path"
    shards = encode_shards(data, SCHEME, obj(data), rng=_ZeroRng())
    for subset in itertools.combinations(shards, 3):
        assert decode_shards(subset, SCHEME) == data


def test_scheme_bounds():
    with pytest.raises(ValueError):
        CodingScheme(3, 3)
    assert CodingScheme(6, 3).threshold == 3


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=1, max_size=1 << 20), st.integers(0, 19))
def test_large_round_trip(data, which):
    shards = encode_shards(data, SCHEME, obj(data))
    subset = list(itertools.combinations(shards, 3))[which]
    assert decode_shards(subset, SCHEME) == data
