import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dipnet.dupfilter import CountingBloomFilter
from dipnet.lifetime import LifetimeWheel
from dipnet.packet import DipMarking, Longevity, Packet, encode_dscp, ip_to_int, packet_digest
from dipnet.prefix import DEFAULT_ROUTE, Prefix
from dipnet.store import (
    DisruptionStore,
    GroupConfig,
    HeadDrop,
    ParkStatus,
    Red,
    RedState,
    TailDrop,
    red_admit,
    red_drop_probability,
)

DST = ip_to_int("10.0.2.1")
HOST = Prefix.host(DST)


def pkt(n, klass=0, longevity=Longevity.DAYS, dst=DST, **kw):
    dscp = encode_dscp(DipMarking(klass, longevity))
    return Packet(ip_to_int("10.0.1.1"), dst, n.to_bytes(4, "big") + bytes(76), dscp=dscp, ip_id=n, **kw)


def make_store(buckets=1, depth=1024, policy=None, capacity=1_000_000, limit=None, seed=0):
    return DisruptionStore(
        LifetimeWheel(),
        CountingBloomFilter.for_capacity(1000, 0.01, debug=True),
        byte_capacity=capacity,
        default_config=GroupConfig(buckets, depth, limit, policy or TailDrop()),
        rng=random.Random(seed),
    )


def ids(packets):
    return [p.ip_id for p in packets]


def test_park_and_duplicate():
    s = make_store()
    assert s.park(pkt(1), HOST, 0.0).status is ParkStatus.PARKED
    again = s.park(pkt(1, ttl=12), HOST, 0.0)
    assert again.status is ParkStatus.DUPLICATE and not again.false_positive
    assert len(s) == 1
    s.check_invariants()


def test_non_dip_cannot_park():
    with pytest.raises(ValueError):
        make_store().park(Packet(1, DST, b"x"), HOST, 0.0)


def test_tail_drop_full_bucket():
    s = make_store(depth=3)
    for n in (1, 2, 3):
        s.park(pkt(n), HOST, 0.0)
    result = s.park(pkt(4), HOST, 0.0)
    assert result.status is ParkStatus.FULL and result.evicted == []
    assert ids(e.packet for e in s.packets()) == [1, 2, 3]
    assert pkt(4) and packet_digest(pkt(4)) not in s.dupfilter


def test_head_drop_full_bucket():
    s = make_store(depth=3, policy=HeadDrop())
    for n in (1, 2, 3):
        s.park(pkt(n), HOST, 0.0)
    result = s.park(pkt(4), HOST, 0.0)
    assert result.status is ParkStatus.PARKED
    assert ids(e.packet for e in result.evicted) == [1]
    assert ids(e.packet for e in s.packets()) == [2, 3, 4]
    # the evicted packet is forgotten by the duplicate filter and the wheel
    assert s.park(pkt(1), HOST, 0.0).status is ParkStatus.PARKED
    s.check_invariants()


def test_byte_capacity_is_global():
    s = make_store(capacity=250, buckets=4)
    assert s.park(pkt(1), HOST, 0.0).parked
    assert s.park(pkt(2, dst=ip_to_int("10.9.9.9")), Prefix.parse("10.9.0.0/16"), 0.0).parked
    assert s.park(pkt(3, dst=ip_to_int("10.7.7.7")), Prefix.parse("10.7.0.0/16"), 0.0).status is ParkStatus.FULL
    assert s.bytes_used == 200


def test_bucket_byte_limit():
    s = make_store(limit=150)
    assert s.park(pkt(1), HOST, 0.0).parked
    assert s.park(pkt(2), HOST, 0.0).status is ParkStatus.FULL


def test_drain_class_descending():
    s = make_store()
    s.park(pkt(1, klass=1), HOST, 0.0)
    s.park(pkt(2, klass=5), HOST, 0.0)
    out = s.drain(HOST, max_packets=2)
    assert [p.marking.service_class for p in out] == [5, 1]
    assert len(s) == 0 and s.dupfilter.is_empty()


def test_default_route_drains_everything_fifo_per_class():
    s = make_store(buckets=4)
    dsts = [ip_to_int(f"10.{i}.0.1") for i in range(6)]
    for n, dst in enumerate(dsts):
        s.park(pkt(n, klass=n % 2, dst=dst), Prefix.host(dst), 0.0)
    out = s.drain(DEFAULT_ROUTE)
    assert ids(out) == [1, 3, 5, 0, 2, 4]
    assert len(s) == 0


def test_drain_only_covered():
    s = make_store()
    other = ip_to_int("192.168.1.1")
    s.park(pkt(1), HOST, 0.0)
    s.park(pkt(2, dst=other), Prefix.host(other), 0.0)
    assert ids(s.drain(HOST)) == [1]
    assert s.covered_count(DEFAULT_ROUTE) == 1


def test_fragments_drain_adjacent():
    s = make_store()
    frag0 = pkt(7, more_fragments=True)
    other = pkt(8)
    frag1 = Packet(frag0.src, frag0.dst, bytes(40), dscp=frag0.dscp, ip_id=7, frag_offset=10)
    for p in (frag0, other, frag1):
        assert s.park(p, HOST, 0.0).parked
    out = s.drain(HOST)
    assert [(p.ip_id, p.frag_offset) for p in out] == [(7, 0), (7, 10), (8, 0)]


def test_fragment_run_counts_as_one_unit():
    s = make_store()
    frag0 = pkt(7, more_fragments=True)
    frag1 = Packet(frag0.src, frag0.dst, bytes(40), dscp=frag0.dscp, ip_id=7, frag_offset=10)
    s.park(frag0, HOST, 0.0)
    s.park(pkt(8), HOST, 0.0)
    s.park(frag1, HOST, 0.0)
    assert len(s.drain(HOST, max_packets=1)) == 2


def test_partial_fragment_run_resumes_first():
    s = make_store()
    frag0 = pkt(7, more_fragments=True)
    frag1 = Packet(frag0.src, frag0.dst, bytes(80), dscp=frag0.dscp, ip_id=7, frag_offset=10)
    high = pkt(9, klass=7)
    s.park(frag0, HOST, 0.0)
    s.park(frag1, HOST, 0.0)
    first = s.drain(HOST, max_bytes=100)
    assert [(p.ip_id, p.frag_offset) for p in first] == [(7, 0)]
    s.park(high, HOST, 1.0)
    second = s.drain(HOST, max_packets=1)
    assert [(p.ip_id, p.frag_offset) for p in second] == [(7, 10)]


def test_drain_respects_max_bytes():
    s = make_store()
    for n in range(5):
        s.park(pkt(n), HOST, 0.0)
    assert len(s.drain(HOST, max_bytes=250)) == 2
    assert len(s) == 3


def test_drain_remarks_longevity():
    s = make_store()
    s.park(pkt(1, longevity=Longevity.HOURS), HOST, 0.0)
    for k in range(1, 8641 - 180):
        s.wheel.tick(10.0 * k)
    (out,) = s.drain(HOST, now=s.wheel.now)
    assert out.marking == DipMarking(0, Longevity.MINUTES)


def test_expire_accounting():
    s = make_store()
    h = s.park(pkt(1, longevity=Longevity.SECONDS), HOST, 0.0).handle
    s.park(pkt(2), HOST, 0.0)
    expired = s.expire([h])
    assert [e.packet.ip_id for e in expired] == [1]
    assert s.bytes_used == 100
    assert packet_digest(pkt(1)) not in s.dupfilter
    assert s.expire([h]) == []
    drained = s.drain(HOST)
    assert s.expire([99, 2]) == [] and ids(drained) == [2]
    s.check_invariants()


def test_more_specific_group_is_reused():
    s = make_store()
    s.park(pkt(1), HOST, 0.0)
    s.park(pkt(2), DEFAULT_ROUTE, 0.0)
    assert [g.prefix for g in s.groups()] == [HOST]


@pytest.mark.parametrize("avg, expect", [(2.0, 0.0), (5.0, 0.0), (10.0, 0.05), (15.0, 1.0), (40.0, 1.0)])
def test_red_probability(avg, expect):
    assert red_drop_probability(Red(5, 15, 0.1), avg) == pytest.approx(expect)


def test_red_below_min_always_admits():
    policy = Red(5, 15, 0.1, ewma_weight=1.0)
    rng = random.Random(1)
    assert all(red_admit(policy, RedState(), 3, rng) for _ in range(1000))
    assert not any(red_admit(policy, RedState(), 15, rng) for _ in range(1000))


def test_red_in_store_refuses_early():
    s = make_store(policy=Red(0, 1, 1.0, ewma_weight=1.0))
    assert s.park(pkt(1), HOST, 0.0).parked
    r = s.park(pkt(2), HOST, 0.0)
    assert r.status is ParkStatus.FULL and r.early


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("pdetx"), st.integers(0, 30), st.integers(0, 7)), max_size=80),
       st.sampled_from([TailDrop(), HeadDrop(), Red(2, 6, 0.5, 0.5)]))
def test_invariants_under_random_operations(ops, policy):
    s = make_store(buckets=3, depth=4, capacity=2000, policy=policy)
    dsts = [ip_to_int(f"10.0.{i}.1") for i in range(4)]
    now = 0.0
    for op, n, klass in ops:
        dst = dsts[n % 4]
        if op in "pd":
            prefix = Prefix.host(dst) if op == "p" else Prefix.parse("10.0.0.0/16")
            before = len(s)
            r = s.park(pkt(n, klass=klass, dst=dst, longevity=Longevity(klass % 4)), prefix, now)
            assert len(s) == before + (1 if r.parked else 0) - len(r.evicted)
        elif op == "e":
            s.drain(Prefix.host(dst), max_packets=n % 3 + 1, now=now)
        elif op == "t":
            now += 10.0
            s.expire(s.wheel.tick(now))
        else:
            s.drain(DEFAULT_ROUTE, max_bytes=n * 10, now=now)
        s.check_invariants()
        assert s.dupfilter.n_live == len(s)
    s.drain(DEFAULT_ROUTE)
    assert len(s) == 0 and s.bytes_used == 0 and s.dupfilter.is_empty() and s.groups() == []
