import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from peerwatch.events import LABEL_ABNORMAL, SENTINEL_IP, SENTINEL_PORT
from peerwatch.kademlia import (
    ID_BITS,
    InsertOutcome,
    PeerEntry,
    RoutingTable,
    craft_node_id,
    log_distance,
    random_node_id,
    xor_distance,
)

ids = st.integers(min_value=0, max_value=(1 << ID_BITS) - 1)


@given(ids, ids)
def test_xor_metric_properties(a, b):
    assert xor_distance(a, a) == 0
    assert xor_distance(a, b) == xor_distance(b, a)
    # unidirectionality: for a given a and distance d, exactly one b matches
    d = xor_distance(a, b)
    assert a ^ d == b


@given(ids, ids)
def test_log_distance_matches_bit_length(a, b):
    assert log_distance(a, b) == (a ^ b).bit_length()
    assert (log_distance(a, b) == 0) == (a == b)


def test_craft_node_id_hits_every_bucket():
    rng = random.Random(13)
    victim = random_node_id(rng)
    for bucket in range(1, ID_BITS + 1):
        crafted = craft_node_id(victim, bucket, rng)
        assert log_distance(victim, crafted) == bucket


def test_craft_node_id_rejects_bad_bucket():
    rng = random.Random(0)
    with pytest.raises(ValueError):
        craft_node_id(0, 0, rng)
    with pytest.raises(ValueError):
        craft_node_id(0, ID_BITS + 1, rng)


def _entry(node_id, ip="10.0.0.1", port=30303):
    return PeerEntry(node_id=node_id, ip=ip, port=port)


class TestRoutingTable:
    def test_bucket_placement(self):
        rng = random.Random(99)
        table = RoutingTable(self_id=random_node_id(rng))
        for _ in range(500):
            nid = random_node_id(rng)
            result = table.insert(_entry(nid), now_ms=0)
            if result.outcome == InsertOutcome.REJECTED_IP_LIMIT:
                continue
            b = table.bucket_of(nid)
            assert b == log_distance(table.self_id, nid)
            assert any(e.node_id == nid for e in table.bucket(b))

    def test_self_id_insert_raises(self):
        # Distance 0 has no bucket; the caller is expected to filter self.
        table = RoutingTable(self_id=42)
        with pytest.raises(ValueError, match="own id"):
            table.insert(_entry(42), now_ms=0)
        assert len(table) == 0

    def test_same_id_refreshes_entry(self):
        table = RoutingTable(self_id=0)
        table.insert(_entry(5, ip="10.0.0.1"), now_ms=0)
        table.insert(_entry(5, ip="10.0.0.2"), now_ms=10)
        b = table.bucket_of(5)
        entries = [e for e in table.bucket(b) if e.node_id == 5]
        assert len(entries) == 1
        assert entries[0].ip == "10.0.0.2"

    def test_full_bucket_evicts_oldest(self):
        rng = random.Random(4)
        victim = random_node_id(rng)
        table = RoutingTable(self_id=victim, bucket_capacity=4)
        target = 200
        first = craft_node_id(victim, target, rng)
        table.insert(_entry(first, ip="10.0.0.100"), now_ms=0)
        for i in range(3):
            table.insert(_entry(craft_node_id(victim, target, rng), ip=f"10.0.1.{i + 1}"), now_ms=1 + i)
        newcomer = craft_node_id(victim, target, rng)
        result = table.insert(_entry(newcomer, ip="10.0.2.1"), now_ms=50)
        assert result.outcome == InsertOutcome.REPLACED
        assert result.evicted is not None and result.evicted.node_id == first
        assert result.record.removed_ip == "10.0.0.100"
        assert all(e.node_id != first for e in table.bucket(target))

    def test_free_slot_insert_uses_sentinel(self):
        table = RoutingTable(self_id=0)
        result = table.insert(_entry(9, ip="10.9.9.9"), now_ms=3)
        assert result.outcome == InsertOutcome.ADDED_NO_EVICT
        assert result.record.removed_ip == SENTINEL_IP
        assert result.record.removed_port == SENTINEL_PORT
        assert result.record.added_ip == "10.9.9.9"

    def test_record_carries_label(self):
        table = RoutingTable(self_id=0)
        result = table.insert(_entry(9), now_ms=0, label=LABEL_ABNORMAL)
        assert result.record.label == LABEL_ABNORMAL


class TestIpLimit:
    def test_single_ip_capped_per_bucket(self):
        rng = random.Random(7)
        victim = random_node_id(rng)
        table = RoutingTable(self_id=victim, bucket_capacity=16, ip_limit_enabled=True)
        target = 250
        rejected = 0
        for _ in range(32):
            nid = craft_node_id(victim, target, rng)
            result = table.insert(_entry(nid, ip="6.6.6.6"), now_ms=0)
            if result.outcome == InsertOutcome.REJECTED_IP_LIMIT:
                rejected += 1
                assert result.record is None
        assert len(table.bucket(target)) == 1
        assert rejected == 31

    def test_refresh_cannot_dodge_ip_quota(self):
        rng = random.Random(13)
        victim = random_node_id(rng)
        table = RoutingTable(self_id=victim, bucket_capacity=16, ip_limit_enabled=True)
        target = 251
        holder = craft_node_id(victim, target, rng)
        mark = craft_node_id(victim, target, rng)
        table.insert(_entry(holder, ip="6.6.6.6"), now_ms=0)
        table.insert(_entry(mark, ip="10.0.0.1"), now_ms=1)

        # Re-announcing the second id from the saturated address is refused.
        result = table.insert(_entry(mark, ip="6.6.6.6"), now_ms=2)
        assert result.outcome == InsertOutcome.REJECTED_IP_LIMIT
        assert result.record is None
        assert [e.ip for e in table.bucket(target) if e.node_id == mark] == ["10.0.0.1"]

        # A same-address refresh is still an ordinary refresh.
        result = table.insert(_entry(holder, ip="6.6.6.6"), now_ms=3)
        assert result.outcome == InsertOutcome.REPLACED

    def test_sixteen_virtual_ips_fill_bucket(self):
        rng = random.Random(8)
        victim = random_node_id(rng)
        table = RoutingTable(self_id=victim, bucket_capacity=16, ip_limit_enabled=True)
        target = 249
        for i in range(16):
            nid = craft_node_id(victim, target, rng)
            table.insert(_entry(nid, ip=f"6.6.{i}.1"), now_ms=i)
        assert len(table.bucket(target)) == 16

    def test_occupation_ratio(self):
        rng = random.Random(11)
        victim = random_node_id(rng)
        table = RoutingTable(self_id=victim, bucket_capacity=4)
        attacker_ids = set()
        for i in range(2):
            nid = craft_node_id(victim, 240, rng)
            attacker_ids.add(nid)
            table.insert(_entry(nid, ip=f"6.0.0.{i}"), now_ms=0)
        for i in range(2):
            table.insert(_entry(craft_node_id(victim, 240, rng), ip=f"10.0.0.{i}"), now_ms=0)
        assert table.occupation_ratio(attacker_ids) == pytest.approx(0.5)
