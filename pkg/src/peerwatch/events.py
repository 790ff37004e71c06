"""Record types shared by the simulator and the detection pipeline, plus CSV IO.

Four record kinds flow through the system: raw gossip trace records as a
victim logs them, per-peer binned count vectors, discovery table change
records, and tokenized discovery records ready for a categorical model.
All records are immutable value objects; validation lives in the readers
and in :func:`trace_record_problem` / :func:`discovery_record_problem` so
that cleaning can drop bad rows instead of crashing on construction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional

TRACE_CSV_HEADER = ("timestamp_ms", "peer", "event_code", "honest")
DISCOVERY_CSV_HEADER = (
    "timestamp_ms",
    "removed_ip",
    "removed_port",
    "added_ip",
    "added_port",
    "bucket",
    "label",
)

# Endpoint recorded when a table insert evicted nothing.
SENTINEL_IP = "0.0.0.0"
SENTINEL_PORT = 0

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"

N_BUCKETS = 256


class FormatError(ValueError):
    """Malformed CSV content. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GossipEventType(IntEnum):
    """Pubsub tracer event kinds with their wire codes, 0 through 12."""

    PUBLISH_MESSAGE = 0
    REJECT_MESSAGE = 1
    DUPLICATE_MESSAGE = 2
    DELIVER_MESSAGE = 3
    ADD_PEER = 4
    REMOVE_PEER = 5
    RECV_RPC = 6
    SEND_RPC = 7
    DROP_RPC = 8
    JOIN = 9
    LEAVE = 10
    GRAFT = 11
    PRUNE = 12


#: Width of a binned count vector: one slot per event type.
EVENT_TYPE_COUNT = len(GossipEventType)


def event_type_from_code(code: int) -> GossipEventType:
    try:
        return GossipEventType(code)
    except ValueError:
        raise FormatError(f"unknown gossip event code {code!r}") from None


@dataclass(frozen=True, slots=True)
class GossipTraceRecord:
    """One pubsub event as seen by a victim, attributed to the remote peer."""

    timestamp_ms: int
    peer: int
    event: GossipEventType
    honest: bool


@dataclass(frozen=True, slots=True)
class BinnedTraceVector:
    """Event counts for one peer over one fixed-width time bin."""

    bin_start_ms: int
    counts: tuple[int, ...]
    peer: int
    honest: bool


@dataclass(frozen=True, slots=True)
class DiscoveryLogRecord:
    """One routing-table change: the evicted endpoint (or the sentinel) and
    the inserted endpoint, with the affected bucket and a ground-truth label."""

    timestamp_ms: int
    removed_ip: str
    removed_port: int
    added_ip: str
    added_port: int
    bucket: int
    label: str


@dataclass(frozen=True, slots=True)
class LabeledToken:
    """Discovery record after tokenization: vocabulary id plus its label."""

    token_id: int
    label: str


def _is_ipv4(s: str) -> bool:
    parts = s.split(".")
    if len(parts) != 4:
        return False
    for p in parts:
        if not p.isdigit() or (len(p) > 1 and p[0] == "0") or int(p) > 255:
            return False
    return True


def trace_record_problem(r: GossipTraceRecord) -> Optional[str]:
    """Return a description of the first violated invariant, or None if clean."""
    if r.timestamp_ms < 0:
        return "negative timestamp"
    if r.peer < 0:
        return "negative peer index"
    if not isinstance(r.event, GossipEventType):
        return f"unknown event code {r.event!r}"
    return None


def discovery_record_problem(r: DiscoveryLogRecord) -> Optional[str]:
    if r.timestamp_ms < 0:
        return "negative timestamp"
    if not _is_ipv4(r.removed_ip):
        return f"bad removed_ip {r.removed_ip!r}"
    if not _is_ipv4(r.added_ip):
        return f"bad added_ip {r.added_ip!r}"
    for port in (r.removed_port, r.added_port):
        if not 0 <= port <= 65535:
            return f"port {port} out of range"
    # The sentinel is all-or-nothing: 0.0.0.0 pairs only with port 0.
    if (r.removed_ip == SENTINEL_IP) != (r.removed_port == SENTINEL_PORT):
        return "half-sentinel removed endpoint"
    if r.added_ip == SENTINEL_IP:
        return "sentinel not allowed as added endpoint"
    if not 1 <= r.bucket <= N_BUCKETS:
        return f"bucket {r.bucket} out of range"
    if r.label not in (LABEL_NORMAL, LABEL_ABNORMAL):
        return f"bad label {r.label!r}"
    return None


def _parse_int(s: str, what: str, line: int) -> int:
    try:
        return int(s)
    except ValueError:
        raise FormatError(f"non-integer {what}: {s!r}", line) from None


def _parse_bool(s: str, line: int) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise FormatError(f"boolean must be 'true' or 'false', got {s!r}", line)


def read_trace_csv(path: str) -> list[GossipTraceRecord]:
    """Parse a gossip trace CSV. Strict: any malformed row is an error."""
    out: list[GossipTraceRecord] = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != list(TRACE_CSV_HEADER):
            raise FormatError(f"bad header {header!r}", 1)
        for lineno, row in enumerate(rows, start=2):
            if len(row) != 4:
                raise FormatError(f"expected 4 fields, got {len(row)}", lineno)
            ts = _parse_int(row[0], "timestamp_ms", lineno)
            peer = _parse_int(row[1], "peer", lineno)
            code = _parse_int(row[2], "event_code", lineno)
            try:
                event = GossipEventType(code)
            except ValueError:
                raise FormatError(f"unknown gossip event code {code}", lineno) from None
            out.append(GossipTraceRecord(ts, peer, event, _parse_bool(row[3], lineno)))
    return out


def trace_csv_text(records: Iterable[GossipTraceRecord]) -> str:
    """Serialize to the canonical CSV form (also what write_trace_csv emits)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_CSV_HEADER)
    for r in records:
        w.writerow([r.timestamp_ms, r.peer, int(r.event), "true" if r.honest else "false"])
    return buf.getvalue()


def write_trace_csv(path: str, records: Iterable[GossipTraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(trace_csv_text(records))


def read_discovery_csv(path: str) -> list[DiscoveryLogRecord]:
    out: list[DiscoveryLogRecord] = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != list(DISCOVERY_CSV_HEADER):
            raise FormatError(f"bad header {header!r}", 1)
        for lineno, row in enumerate(rows, start=2):
            if len(row) != 7:
                raise FormatError(f"expected 7 fields, got {len(row)}", lineno)
            rec = DiscoveryLogRecord(
                timestamp_ms=_parse_int(row[0], "timestamp_ms", lineno),
                removed_ip=row[1],
                removed_port=_parse_int(row[2], "removed_port", lineno),
                added_ip=row[3],
                added_port=_parse_int(row[4], "added_port", lineno),
                bucket=_parse_int(row[5], "bucket", lineno),
                label=row[6],
            )
            problem = discovery_record_problem(rec)
            if problem is not None:
                raise FormatError(problem, lineno)
            out.append(rec)
    return out


def discovery_csv_text(records: Iterable[DiscoveryLogRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DISCOVERY_CSV_HEADER)
    for r in records:
        w.writerow(
            [
                r.timestamp_ms,
                r.removed_ip,
                r.removed_port,
                r.added_ip,
                r.added_port,
                r.bucket,
                r.label,
            ]
        )
    return buf.getvalue()


def write_discovery_csv(path: str, records: Iterable[DiscoveryLogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(discovery_csv_text(records))
