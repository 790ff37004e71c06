"""XOR-metric routing table with log-distance buckets and eviction logging.

Node ids are plain Python ints in [0, 2**256). Bucket b holds peers whose
XOR distance from the local id has bit length b, so b runs 1..256 and a
higher index means a farther (and exponentially larger) slice of the id
space. Every accepted insert emits a DiscoveryLogRecord describing what
was added and what, if anything, was evicted.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from .events import (
    DiscoveryLogRecord,
    LABEL_NORMAL,
    SENTINEL_IP,
    SENTINEL_PORT,
)

ID_BITS = 256
ID_SPACE = 1 << ID_BITS
DEFAULT_BUCKET_CAPACITY = 16


def _check_id(node_id: int) -> int:
    if not 0 <= node_id < ID_SPACE:
        raise ValueError(f"node id out of range: {node_id}")
    return node_id


def xor_distance(a: int, b: int) -> int:
    return _check_id(a) ^ _check_id(b)


def log_distance(a: int, b: int) -> int:
    """Bucket index for the pair: bit length of the XOR distance, 0 iff a == b."""
    return xor_distance(a, b).bit_length()


def random_node_id(rng: random.Random) -> int:
    return rng.getrandbits(ID_BITS)


def craft_node_id(victim_id: int, target_bucket: int, rng: random.Random) -> int:
    """Construct an id that lands in exactly `target_bucket` of the victim's table.

    Flip bit target_bucket-1 of the victim id and randomize all lower bits;
    the higher bits stay equal so the XOR bit length is pinned.
    """
    _check_id(victim_id)
    if not 1 <= target_bucket <= ID_BITS:
        raise ValueError(f"bucket must be in 1..{ID_BITS}, got {target_bucket}")
    low = rng.getrandbits(target_bucket - 1) if target_bucket > 1 else 0
    mask = (1 << (target_bucket - 1)) - 1
    return (victim_id ^ (1 << (target_bucket - 1))) & ~mask | low


@dataclass(frozen=True, slots=True)
class PeerEntry:
    node_id: int
    ip: str
    port: int
    inserted_at_ms: int = 0


class InsertOutcome(Enum):
    ADDED_NO_EVICT = "added"
    REPLACED = "replaced"
    REJECTED_IP_LIMIT = "rejected_ip_limit"


@dataclass(frozen=True, slots=True)
class InsertResult:
    outcome: InsertOutcome
    evicted: Optional[PeerEntry]
    record: Optional[DiscoveryLogRecord]


class RoutingTable:
    """Fixed-capacity buckets with oldest-entry eviction.

    With ip_limit_enabled, at most max_per_ip_per_bucket entries sharing one
    IP may sit in any single bucket; offending candidates are rejected
    outright and produce no log record.
    """

    def __init__(
        self,
        self_id: int,
        bucket_capacity: int = DEFAULT_BUCKET_CAPACITY,
        ip_limit_enabled: bool = False,
        max_per_ip_per_bucket: int = 1,
    ):
        if bucket_capacity < 1:
            raise ValueError("bucket_capacity must be >= 1")
        if max_per_ip_per_bucket < 1:
            raise ValueError("max_per_ip_per_bucket must be >= 1")
        self.self_id = _check_id(self_id)
        self.bucket_capacity = bucket_capacity
        self.ip_limit_enabled = ip_limit_enabled
        self.max_per_ip_per_bucket = max_per_ip_per_bucket
        # Index 0 is unused: bucket 0 would be the node itself.
        self._buckets: list[list[PeerEntry]] = [[] for _ in range(ID_BITS + 1)]

    def bucket_of(self, node_id: int) -> int:
        b = log_distance(self.self_id, node_id)
        if b == 0:
            raise ValueError("cannot place own id in a bucket")
        return b

    def bucket(self, index: int) -> tuple[PeerEntry, ...]:
        if not 1 <= index <= ID_BITS:
            raise ValueError(f"bucket index must be in 1..{ID_BITS}")
        return tuple(self._buckets[index])

    def entries(self) -> list[PeerEntry]:
        return [e for b in self._buckets for e in b]

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets)

    def insert(self, candidate: PeerEntry, now_ms: int, label: str = LABEL_NORMAL) -> InsertResult:
        b = self.bucket_of(candidate.node_id)
        bucket = self._buckets[b]
        stored = replace(candidate, inserted_at_ms=now_ms)

        existing = next((e for e in bucket if e.node_id == candidate.node_id), None)
        if existing is not None:
            # Refresh: same id replaces its old entry regardless of capacity,
            # but a changed address still has to clear the per-IP quota.
            if self.ip_limit_enabled and candidate.ip != existing.ip:
                same_ip = sum(1 for e in bucket if e is not existing and e.ip == candidate.ip)
                if same_ip >= self.max_per_ip_per_bucket:
                    return InsertResult(InsertOutcome.REJECTED_IP_LIMIT, None, None)
            bucket.remove(existing)
            bucket.append(stored)
            return InsertResult(
                InsertOutcome.REPLACED,
                existing,
                self._record(now_ms, existing, stored, b, label),
            )

        if self.ip_limit_enabled:
            same_ip = sum(1 for e in bucket if e.ip == candidate.ip)
            if same_ip >= self.max_per_ip_per_bucket:
                return InsertResult(InsertOutcome.REJECTED_IP_LIMIT, None, None)

        if len(bucket) < self.bucket_capacity:
            bucket.append(stored)
            return InsertResult(
                InsertOutcome.ADDED_NO_EVICT,
                None,
                self._record(now_ms, None, stored, b, label),
            )

        # Full bucket: the oldest entry goes; ties resolve to the first stored.
        evicted = min(bucket, key=lambda e: e.inserted_at_ms)
        bucket.remove(evicted)
        bucket.append(stored)
        return InsertResult(
            InsertOutcome.REPLACED,
            evicted,
            self._record(now_ms, evicted, stored, b, label),
        )

    @staticmethod
    def _record(
        now_ms: int,
        evicted: Optional[PeerEntry],
        added: PeerEntry,
        bucket: int,
        label: str,
    ) -> DiscoveryLogRecord:
        return DiscoveryLogRecord(
            timestamp_ms=now_ms,
            removed_ip=evicted.ip if evicted else SENTINEL_IP,
            removed_port=evicted.port if evicted else SENTINEL_PORT,
            added_ip=added.ip,
            added_port=added.port,
            bucket=bucket,
            label=label,
        )

    def occupation_ratio(self, node_ids: set[int]) -> float:
        """Fraction of table entries whose id is in `node_ids`; 0.0 when empty."""
        total = len(self)
        if total == 0:
            return 0.0
        owned = sum(1 for e in self.entries() if e.node_id in node_ids)
        return owned / total
