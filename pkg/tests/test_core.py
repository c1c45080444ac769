import json
import random
import struct
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from zipperchain.core import (
    Block, Certificate, ControlPayload, DecodeError, EmptyBatch, Link, MerkleTree, Triad, TxLink,
    block_kind, decode, encode, link, merkle_root, new_uuid, seed, sha3, verify_link,
)
from zipperchain.services import SequenceAttestation, TimestampAttestation

VECTORS = Path(__file__).parent / "vectors" / "core.json"


def pack(*parts: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def golden_records():
    u = bytes(range(16))
    d = bytes(range(32))
    l = Link(u, d)
    t = TxLink("acct", "transfer", l)
    m = MerkleTree(bytes(16), (t, TxLink("acct", "mint", Link(d[:16], u + u))))
    c = ControlPayload(u, b"\x01" * 32, b"\x02" * 32)
    g = Block(u, link(c), None)
    b = Block(d[:16], link(m), Link(u, d))
    ta = TimestampAttestation(b"\x05" * 10, 1_700_000_000_000, u, b"\x07" * 64)
    qa = SequenceAttestation(b"\x05" * 10, 3, b"\x08" * 64, u)
    cert = Certificate(t, link(g), 1_700_000_000_000, 2, 1)
    return {"link": l, "txlink": t, "merkle": m, "control": c, "genesis": g, "block": b,
            "time": ta, "seq": qa, "triad": Triad(b, ta, qa), "certificate": cert}


def test_link_all_zero_encoding():
    l = Link(bytes(16), bytes(32))
    assert encode(l) == bytes([1]) + pack(bytes(16), bytes(32))


def test_txlink_encoding_by_hand():
    l = Link(bytes(range(16)), bytes(range(32)))
    t = TxLink("acct", "transfer", l)
    assert encode(t) == bytes([2]) + pack(b"acct", b"transfer", encode(l))


def test_block_encoding_by_hand():
    l = Link(bytes(range(16)), bytes(range(32)))
    g = Block(bytes(16), l, None)
    assert encode(g) == bytes([4]) + pack(bytes(16), encode(l), b"")
    b = Block(bytes(16), l, l)
    assert encode(b) == bytes([4]) + pack(bytes(16), encode(l), encode(l))


def test_merkle_encoding_by_hand():
    l = Link(bytes(range(16)), bytes(range(32)))
    leaves = (TxLink("a", "b", l), TxLink("c", "d", l))
    m = MerkleTree(bytes(16), leaves)
    body = struct.pack(">I", 2) + pack(*(encode(x) for x in leaves))
    assert encode(m) == bytes([3]) + pack(bytes(16), body)


def test_int_fields_are_signed_eight_bytes():
    q = SequenceAttestation(b"x", 258, b"s", b"i")
    assert encode(q) == bytes([7]) + pack(b"x", (258).to_bytes(8, "big"), b"s", b"i")


def test_golden_vectors():
    frozen = json.loads(VECTORS.read_text())
    records = golden_records()
    assert set(frozen) == set(records)
    for name, x in records.items():
        assert encode(x).hex() == frozen[name]["encoding"], name
        assert sha3(encode(x)).hex() == frozen[name]["sha3"], name
        assert decode(bytes.fromhex(frozen[name]["encoding"])) == x


def test_sha3_known_answer():
    # FIPS 202 test vector for the empty message
    assert sha3(b"").hex() == "a7ffc6f8bf1ed76651c14756a061d662f580ff4de43b49fa82d80a4b80f8434a"


@pytest.mark.parametrize("name", sorted(golden_records()))
def test_round_trip_every_type(name):
    x = golden_records()[name]
    assert decode(encode(x)) == x


def test_decode_rejects_garbage():
    good = encode(Link(bytes(16), bytes(32)))
    for bad in (b"", b"\xff", good[:-1], good + b"\x00", bytes([99]) + good[1:]):
        with pytest.raises(DecodeError):
            decode(bad)


def test_link_digest_must_be_32_bytes():
    with pytest.raises(ValueError):
        Link(bytes(16), bytes(31))


def test_txlink_requires_schema():
    with pytest.raises(ValueError):
        TxLink("", "t", Link(bytes(16), bytes(32)))


def test_control_keys_must_be_32_bytes():
    with pytest.raises(ValueError):
        ControlPayload(bytes(16), b"\x01" * 31, b"\x02" * 32)


links = st.builds(Link, st.binary(min_size=16, max_size=16), st.binary(min_size=32, max_size=32))
txlinks = st.builds(TxLink, st.text(min_size=1, max_size=8), st.text(max_size=8), links)
merkles = st.builds(MerkleTree, st.binary(min_size=16, max_size=16),
                    st.lists(txlinks, min_size=1, max_size=5).map(tuple))
blocks = st.builds(Block, st.binary(min_size=16, max_size=16), links, st.none() | links)
times = st.builds(TimestampAttestation, st.binary(max_size=60), st.integers(-2**63, 2**63 - 1),
                  st.binary(min_size=16, max_size=16), st.binary(max_size=64))
seqs = st.builds(SequenceAttestation, st.binary(max_size=60), st.integers(0, 2**63 - 1),
                 st.binary(max_size=64), st.binary(min_size=16, max_size=16))
any_record = st.one_of(links, txlinks, merkles, blocks, times, seqs)


@settings(max_examples=300, deadline=None)
@given(any_record)
def test_round_trip_property(x):
    assert decode(encode(x)) == x


@settings(max_examples=300, deadline=None)
@given(any_record, any_record)
def test_encoding_injective(x, y):
    assert (encode(x) == encode(y)) == (x == y)


def test_encoding_injective_random_pairs():
    rng = random.Random(11)

    def rand_tx():
        return TxLink(rng.choice("ab"), rng.choice(["", "c"]),
                      Link(bytes([rng.randrange(2)]) * 16, bytes([rng.randrange(2)]) * 32))

    for _ in range(10_000):
        x, y = rand_tx(), rand_tx()
        assert (encode(x) == encode(y)) == (x == y)


def test_link_definition():
    seed(3)
    m = MerkleTree(new_uuid(), (TxLink("s", "t", Link(bytes(16), bytes(32))),))
    assert link(m).uuid == m.uuid
    assert link(m).digest == sha3(encode(m))
    assert link(m) == link(m)
    assert verify_link(link(m), m)


def test_single_byte_mutation_changes_digest():
    rng = random.Random(5)
    base = TxLink("acct", "transfer", Link(bytes(16), bytes(32)))
    m = MerkleTree(bytes(16), (base,) * 3)
    raw = encode(m)
    inputs, digests = set(), set()
    for _ in range(10_000):
        i = rng.randrange(len(raw))
        mutated = raw[:i] + bytes([raw[i] ^ rng.randrange(1, 256)]) + raw[i + 1:]
        inputs.add(mutated)
        digests.add(sha3(mutated))
    assert sha3(raw) not in digests
    assert len(digests) == len(inputs)


def test_single_bit_flip_always_detected():
    seed(9)
    m = MerkleTree(new_uuid(), (TxLink("s", "t", Link(bytes(16), bytes(32))),))
    raw = encode(m)
    ref = link(m)
    for i in range(len(raw)):
        for bit in range(8):
            mutated = raw[:i] + bytes([raw[i] ^ (1 << bit)]) + raw[i + 1:]
            assert sha3(mutated) != ref.digest


def test_merkle_base_cases():
    a = TxLink("s", "a", Link(bytes(16), bytes(32)))
    b = TxLink("s", "b", Link(bytes(16), bytes(32)))
    c = TxLink("s", "c", Link(bytes(16), bytes(32)))
    ha, hb, hc = (sha3(encode(x)) for x in (a, b, c))
    assert merkle_root([a]) == ha
    assert merkle_root([a, b]) == sha3(ha + hb)
    # odd node promoted unchanged
    assert merkle_root([a, b, c]) == sha3(sha3(ha + hb) + hc)


def test_merkle_empty_batch():
    with pytest.raises(EmptyBatch, match="empty batch"):
        merkle_root([])


def test_merkle_swap_changes_root():
    rng = random.Random(2)
    for _ in range(1000):
        n = rng.randint(2, 9)
        leaves = [TxLink("s", str(rng.random()), Link(bytes(16), bytes(32))) for _ in range(n)]
        i, j = rng.sample(range(n), 2)
        swapped = list(leaves)
        swapped[i], swapped[j] = swapped[j], swapped[i]
        assert merkle_root(leaves) != merkle_root(swapped)


def test_block_kind_from_payload():
    c = ControlPayload(bytes(16), b"\x01" * 32, b"\x02" * 32)
    m = MerkleTree(bytes(16), (TxLink("s", "t", Link(bytes(16), bytes(32))),))
    assert block_kind(c) == "control"
    assert block_kind(m) == "data"
    with pytest.raises(TypeError):
        block_kind(Link(bytes(16), bytes(32)))


def test_genesis_iff_no_prev_link():
    l = Link(bytes(16), bytes(32))
    assert Block(bytes(16), l).is_genesis
    assert not Block(bytes(16), l, l).is_genesis


def test_seeded_uuids_reproducible_and_v4():
    seed(42)
    a = [new_uuid() for _ in range(5)]
    seed(42)
    b = [new_uuid() for _ in range(5)]
    seed(None)
    assert a == b
    assert len(set(a)) == 5
    assert all(u[6] >> 4 == 4 and u[8] >> 6 == 2 for u in a)


def test_text_forms_round_trip():
    l = Link(bytes(range(16)), bytes(range(32)))
    assert Link.from_hex(l.hex()) == l
    t = TxLink("acct", "transfer", l)
    assert TxLink.from_text(t.text()) == t
