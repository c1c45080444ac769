import random

import pytest

from zipperchain import core
from zipperchain.core import Certificate, Link, Triad, link
from zipperchain.pipeline import init_chain, make_services, run_pipeline, write
from zipperchain.services import KeyPair, SequenceService, attest_enclave, sha3
from zipperchain.verify import (
    ChainSnapshot, DifferentChains, HeightIndex, SnapshotIncomplete, UnresolvablePath, Verifier,
    cert_precedes, height, makecert, omc, total_order, triad_less, truetriad, verify,
)
from chainkit import Kit, fork_figure, forged_seq, forged_time, random_snapshot, tx
from oracles import brute_main_chain


def test_fork_figure_main_chain():
    k, n = fork_figure()
    z = omc(k.genesis, k.enclave, k.snapshot(), check_invariants=True)
    assert [t.ctr for t in z] == [0, 1, 4, 3]
    assert z == [n["g"], n["i"], n["j"], n["k"]]


def test_fork_figure_total_order():
    k, n = fork_figure()
    snap = k.snapshot()
    order = total_order(n.values(), snap)
    assert [t.ctr for t in order] == [0, 1, 2, 4, 5, 3]
    assert [height(t, snap) for t in order] == [0, 1, 1, 2, 2, 3]
    assert triad_less(n["i"], n["i'"], snap)
    assert triad_less(n["j'"], n["k"], snap)  # height beats counter
    assert not triad_less(n["k"], n["j"], snap)


def test_fork_figure_prefix_when_counter_two_withheld():
    k, n = fork_figure()
    # without ctr 2 the successor of T_i at ctr 4 cannot be proven minimal
    z = omc(k.genesis, k.enclave, k.snapshot(exclude=[n["i'"].seq]))
    assert [t.ctr for t in z] == [0, 1]


def test_genesis_only():
    k = Kit(seed=1)
    assert omc(k.genesis, k.enclave, k.snapshot()) == [k.g_triad]


def test_missing_control_or_bad_enclave_gives_empty_chain():
    k = Kit(seed=1)
    k.triad(k.g_time)
    assert omc(k.genesis, k.enclave, k.snapshot(exclude=[k.control])) == []
    other = attest_enclave(SequenceService())
    assert omc(k.genesis, other, k.snapshot()) == []


def test_image_hash_pins_enclave():
    k = Kit(seed=1)
    assert omc(k.genesis, k.enclave, k.snapshot(), image_hash=k.seq.image_hash) == [k.g_triad]
    assert omc(k.genesis, k.enclave, k.snapshot(), image_hash=sha3(b"other image")) == []


def test_linear_chain_and_gap_stop():
    k = Kit(seed=2)
    tris = [k.g_triad]
    for _ in range(5):
        tris.append(k.triad(tris[-1].time))
    snap = k.snapshot()
    assert omc(k.genesis, k.enclave, snap) == tris
    # withholding a block cuts the chain below it
    assert omc(k.genesis, k.enclave, k.snapshot(exclude=[tris[3].block])) == tris[:3]


def test_forgeries_ignored():
    k = Kit(seed=3)
    a = k.triad(k.g_time)
    snap = k.snapshot()
    forged_b = k.block(k.g_time)
    snap.add(forged_b)
    t = forged_time(core.link_bytes(forged_b))
    snap.add(t)
    snap.add(forged_seq(core.link_bytes(t), 1))
    real_t = k.ts.stamp(link(forged_b))
    snap.add(real_t)
    snap.add(forged_seq(core.link_bytes(real_t), 1))
    assert omc(k.genesis, k.enclave, snap) == [k.g_triad, a]


def test_truetriad_conditions():
    k = Kit(seed=4)
    tri = k.triad(k.g_time)
    tk, sk = k.control.time_pubkey, k.control.seq_pubkey
    assert truetriad(tri, tk, sk)
    other = k.block(k.g_time)
    assert not truetriad(Triad(other, tri.time, tri.seq), tk, sk)
    assert not truetriad(tri, KeyPair().public, sk)
    assert not truetriad(tri, tk, KeyPair().public)
    bad_q = forged_seq(core.link_bytes(tri.time), tri.ctr)
    assert not truetriad(Triad(tri.block, tri.time, bad_q), tk, sk)


def test_random_snapshots_match_oracle():
    rng = random.Random(77)
    for _ in range(150):
        kit, snap = random_snapshot(rng)
        got = omc(kit.genesis, kit.enclave, snap, check_invariants=True)
        assert got == brute_main_chain(kit.genesis, kit.enclave, snap)


def test_incremental_prefix_stability():
    rng = random.Random(8)
    for _ in range(50):
        kit, full = random_snapshot(rng, max_withheld=0, max_forged=3)
        objs = full.objects()
        rng.shuffle(objs)
        snap = ChainSnapshot()
        prev = []
        for o in objs:
            snap.add(o)
            z = omc(kit.genesis, kit.enclave, snap)
            assert z[:len(prev)] == prev
            prev = z


def test_height_unresolvable():
    k = Kit(seed=6)
    a = k.triad(k.g_time)
    b = k.triad(a.time)
    with pytest.raises(UnresolvablePath, match="unresolvable path"):
        height(b, k.snapshot(exclude=[a.block]))
    h = HeightIndex(k.snapshot())
    assert (h(k.g_triad), h(a), h(b)) == (0, 1, 2)


def test_long_chain_height_no_recursion_limit():
    k = Kit(seed=6)
    tri = k.g_triad
    for _ in range(3000):
        b = k.block(tri.time)
        tri = Triad(b, k.stamp(b), None)
    assert height(tri, k.snapshot()) == 3000


def test_makecert_first_occurrence_and_rank():
    k = Kit(seed=7)
    a = k.triad(k.g_time, ntx=3)
    b = k.triad(a.time, ntx=2)
    z = omc(k.genesis, k.enclave, k.snapshot())
    merkles = list(k.merkles.values())
    leaf = k.merkles[link(b.block)].leaves[1]
    cert = makecert(leaf, merkles, z)
    assert cert == Certificate(leaf, link(k.genesis), b.time.ts, 2, 1)
    assert makecert(tx(999), merkles, z) is None
    assert makecert(leaf, merkles, []) is None


def test_cert_precedes():
    g = Link(bytes(16), bytes(32))
    a = Certificate(tx(0), g, 1, 1, 0)
    b = Certificate(tx(1), g, 1, 1, 1)
    c = Certificate(tx(2), g, 0, 2, 0)
    assert cert_precedes(a, b) and cert_precedes(b, c) and cert_precedes(a, c)
    assert not cert_precedes(b, a) and not cert_precedes(a, a)
    with pytest.raises(DifferentChains, match="different chains"):
        cert_precedes(a, Certificate(tx(3), Link(bytes(16), bytes([1]) * 32), 0, 0, 0))


def test_verifier_refresh_incremental():
    core.seed(12)
    svc = make_services()
    genesis, _, chain = init_chain(svc)
    v = Verifier(genesis, svc.replicator, chain.enclave)
    assert len(v.refresh()) == 1
    fetched = len(v._known)
    for i in range(5):
        write(tx(i), chain)
    run_pipeline(chain, interval_ms=0)
    assert v.certificate(tx(0)) is None
    v.refresh()
    assert len(v._known) > fetched
    cert = v.certificate(tx(0))
    assert cert is not None and cert.height == 1
    assert verify(genesis, tx(0), svc.replicator, chain.enclave) == cert


def test_verifier_snapshot_incomplete():
    core.seed(13)
    svc = make_services()
    genesis, _, chain = init_chain(svc)
    write(tx(0), chain)
    run_pipeline(chain, interval_ms=0)
    for b in svc.replicator.buckets[:4]:
        b.available = False
    with pytest.raises(SnapshotIncomplete, match="snapshot incomplete"):
        verify(genesis, tx(0), svc.replicator, chain.enclave)
