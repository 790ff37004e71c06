"""Turns raw simulator output into model-ready tensors.

Numeric route: trace records -> per-peer 300 ms count vectors -> min-max
scaling -> sliding windows. Categorical route: discovery records -> string
token keys (bucket, IP novelty, eviction flag) -> vocabulary ids -> sliding
windows over the id sequence. Both routes share the window maker and the
time-ordered train/eval split.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .events import (
    BinnedTraceVector,
    DiscoveryLogRecord,
    EVENT_TYPE_COUNT,
    GossipTraceRecord,
    LABEL_ABNORMAL,
    LABEL_NORMAL,
    LabeledToken,
    SENTINEL_IP,
    SENTINEL_PORT,
    discovery_record_problem,
    trace_record_problem,
)

DEFAULT_BIN_MS = 300


class PipelineParams(BaseModel):
    """Knobs for binning, tokenization, windowing and splitting."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    bin_ms: int = Field(default=DEFAULT_BIN_MS, ge=1)
    window_size: int = Field(default=10, ge=1)
    step_size: int = Field(default=1, ge=1)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    min_token_count: int = Field(default=1, ge=1)
    novelty_window: int = Field(default=1024, ge=1)
    max_token_len: int = Field(default=64, ge=8)


Record = Union[GossipTraceRecord, DiscoveryLogRecord]


def clean(
    records: Iterable[Record],
    time_range: Optional[tuple[int, int]] = None,
) -> tuple[list[Record], int]:
    """Drop records violating their type invariants or outside [lo, hi].

    Returns (kept records in input order, number dropped).
    """
    kept: list[Record] = []
    dropped = 0
    for r in records:
        if isinstance(r, GossipTraceRecord):
            problem = trace_record_problem(r)
        elif isinstance(r, DiscoveryLogRecord):
            problem = discovery_record_problem(r)
        else:
            raise TypeError(f"unsupported record type {type(r).__name__}")
        if problem is None and (time_range is None or time_range[0] <= r.timestamp_ms <= time_range[1]):
            kept.append(r)
        else:
            dropped += 1
    return kept, dropped


def bin_traces(records: Sequence[GossipTraceRecord], bin_ms: int = DEFAULT_BIN_MS) -> list[BinnedTraceVector]:
    """Count events per (peer, bin) and zero-fill a peer's quiet bins.

    Bins cover [k*bin_ms, (k+1)*bin_ms). Each peer's sequence runs without
    gaps from the bin of its first event to the bin of its last, so silence
    inside a peer's lifetime is an explicit all-zero vector. Output is
    ordered by peer, then by bin start.
    """
    if bin_ms < 1:
        raise ValueError("bin_ms must be >= 1")
    counts: dict[int, dict[int, np.ndarray]] = {}
    span: dict[int, tuple[int, int]] = {}
    honest: dict[int, bool] = {}
    for r in records:
        k = r.timestamp_ms // bin_ms
        per_peer = counts.setdefault(r.peer, {})
        vec = per_peer.get(k)
        if vec is None:
            vec = per_peer[k] = np.zeros(EVENT_TYPE_COUNT, dtype=np.int64)
        vec[int(r.event)] += 1
        lo, hi = span.get(r.peer, (k, k))
        span[r.peer] = (min(lo, k), max(hi, k))
        honest[r.peer] = honest.get(r.peer, True) and r.honest

    out: list[BinnedTraceVector] = []
    zero = (0,) * EVENT_TYPE_COUNT
    for peer in sorted(span):
        lo, hi = span[peer]
        per_peer = counts[peer]
        for k in range(lo, hi + 1):
            vec = per_peer.get(k)
            out.append(
                BinnedTraceVector(
                    bin_start_ms=k * bin_ms,
                    counts=zero if vec is None else tuple(int(c) for c in vec),
                    peer=peer,
                    honest=honest[peer],
                )
            )
    return out


def vectors_to_array(bins: Sequence[BinnedTraceVector]) -> np.ndarray:
    """Stack binned count vectors into a float64 (N, EVENT_TYPE_COUNT) array."""
    if not bins:
        return np.zeros((0, EVENT_TYPE_COUNT), dtype=np.float64)
    return np.array([b.counts for b in bins], dtype=np.float64)


class Scaler:
    """Per-feature min-max map fitted on training data.

    apply() sends the fitted range onto [0, 1] linearly and never clamps, so
    the transform stays invertible; values outside the fitted range simply
    land outside [0, 1]. A constant feature maps to 0.0 and inverts back to
    its fitted value.
    """

    VERSION = 1

    def __init__(self, mins: Optional[np.ndarray] = None, maxs: Optional[np.ndarray] = None):
        if (mins is None) != (maxs is None):
            raise ValueError("mins and maxs must be given together")
        self.mins = None if mins is None else np.asarray(mins, dtype=np.float64)
        self.maxs = None if maxs is None else np.asarray(maxs, dtype=np.float64)
        if self.mins is not None and self.mins.shape != self.maxs.shape:
            raise ValueError("mins and maxs must have the same shape")

    @property
    def fitted(self) -> bool:
        return self.mins is not None

    def _require_fitted(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.fitted:
            raise RuntimeError("scaler is not fitted")
        return self.mins, self.maxs

    def apply(self, x: np.ndarray) -> np.ndarray:
        mins, maxs = self._require_fitted()
        x = np.asarray(x, dtype=np.float64)
        span = maxs - mins
        safe = np.where(span == 0.0, 1.0, span)
        out = (x - mins) / safe
        return np.where(span == 0.0, 0.0, out)

    def invert(self, y: np.ndarray) -> np.ndarray:
        mins, maxs = self._require_fitted()
        y = np.asarray(y, dtype=np.float64)
        span = maxs - mins
        return np.where(span == 0.0, mins, y * span + mins)

    def to_json(self) -> str:
        mins, maxs = self._require_fitted()
        return json.dumps(
            {"version": self.VERSION, "mins": mins.tolist(), "maxs": maxs.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "Scaler":
        obj = json.loads(text)
        if obj.get("version") != cls.VERSION:
            raise ValueError(f"unsupported scaler version {obj.get('version')!r}")
        return cls(np.array(obj["mins"], dtype=np.float64), np.array(obj["maxs"], dtype=np.float64))


def fit_scaler(x: np.ndarray) -> Scaler:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty 2-d array to fit a scaler")
    return Scaler(x.min(axis=0), x.max(axis=0))


def token_keys(
    records: Sequence[DiscoveryLogRecord],
    novelty_window: int = 1024,
    max_token_len: int = 64,
) -> list[str]:
    """Map each discovery record to a compact string key.

    The key combines the bucket index, whether the added IP is new within a
    sliding window of the last `novelty_window` distinct IPs, and whether
    the insert evicted somebody. This is stateful over the stream: call it
    once on the full time-ordered sequence.
    """
    recent: OrderedDict[str, None] = OrderedDict()
    keys: list[str] = []
    for r in records:
        if r.added_ip in recent:
            fresh = "rep"
            recent.move_to_end(r.added_ip)
        else:
            fresh = "new"
            recent[r.added_ip] = None
            if len(recent) > novelty_window:
                recent.popitem(last=False)
        evict = "free" if r.removed_ip == SENTINEL_IP and r.removed_port == SENTINEL_PORT else "evict"
        keys.append(f"b{r.bucket:03d}:{fresh}:{evict}"[:max_token_len])
    return keys


class Vocabulary:
    """Token key -> integer id, with a reserved out-of-vocabulary id.

    Keys seen fewer than min_token_count times during fitting are folded
    into the OOV id, which is always the largest id.
    """

    VERSION = 1

    def __init__(self, tokens: Sequence[str], min_token_count: int = 1):
        self._ids = {t: i for i, t in enumerate(tokens)}
        if len(self._ids) != len(tokens):
            raise ValueError("duplicate token keys")
        self.min_token_count = min_token_count

    @classmethod
    def fit(cls, keys: Sequence[str], min_token_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        order: list[str] = []
        for k in keys:
            if k not in counts:
                order.append(k)
            counts[k] = counts.get(k, 0) + 1
        kept = [k for k in order if counts[k] >= min_token_count]
        return cls(kept, min_token_count)

    @property
    def oov_id(self) -> int:
        return len(self._ids)

    @property
    def size(self) -> int:
        # Includes the OOV slot; this is the classification head width.
        return len(self._ids) + 1

    def encode(self, key: str) -> int:
        return self._ids.get(key, self.oov_id)

    def decode(self, token_id: int) -> str:
        if token_id == self.oov_id:
            return "<oov>"
        for k, i in self._ids.items():
            if i == token_id:
                return k
        raise ValueError(f"unknown token id {token_id}")

    def to_json(self) -> str:
        tokens = sorted(self._ids, key=self._ids.get)
        return json.dumps(
            {"version": self.VERSION, "min_token_count": self.min_token_count, "tokens": tokens}
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        if obj.get("version") != cls.VERSION:
            raise ValueError(f"unsupported vocabulary version {obj.get('version')!r}")
        return cls(obj["tokens"], int(obj["min_token_count"]))


def tokenize_discovery(
    records: Sequence[DiscoveryLogRecord],
    vocab: Optional[Vocabulary] = None,
    min_token_count: int = 1,
    novelty_window: int = 1024,
    max_token_len: int = 64,
) -> tuple[list[LabeledToken], Vocabulary]:
    """Tokenize a discovery stream; fit a vocabulary first when none is given."""
    keys = token_keys(records, novelty_window, max_token_len)
    if vocab is None:
        vocab = Vocabulary.fit(keys, min_token_count)
    tokens = [LabeledToken(vocab.encode(k), r.label) for k, r in zip(keys, records)]
    return tokens, vocab


@dataclass
class WindowSet:
    """Sliding windows plus where each target sits in the source sequence.

    inputs has shape (K, window, F) for numeric data or (K, window) for
    token ids; targets is (K, F) or (K,). target_indices locates each
    window's target record in whatever global indexing index_base referred
    to, which is how window verdicts get projected back onto records.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_indices: np.ndarray
    window_size: int
    step_size: int

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        if not parts:
            raise ValueError("nothing to concatenate")
        w, s = parts[0].window_size, parts[0].step_size
        if any(p.window_size != w or p.step_size != s for p in parts):
            raise ValueError("mismatched window parameters")
        return cls(
            inputs=np.concatenate([p.inputs for p in parts], axis=0),
            targets=np.concatenate([p.targets for p in parts], axis=0),
            target_indices=np.concatenate([p.target_indices for p in parts], axis=0),
            window_size=w,
            step_size=s,
        )


def window_count(n: int, window_size: int, step_size: int) -> int:
    """Closed form for how many windows a length-n sequence yields."""
    if n <= window_size:
        return 0
    return (n - 1 - window_size) // step_size + 1


def make_windows(
    values: np.ndarray,
    window_size: int,
    step_size: int = 1,
    index_base: int = 0,
) -> WindowSet:
    """Slice [x[t-m], ..., x[t-1]] -> x[t] pairs for t = m, m+s, m+2s, ...

    A sequence of length <= window_size yields no windows.
    """
    if window_size < 1 or step_size < 1:
        raise ValueError("window_size and step_size must be >= 1")
    values = np.asarray(values)
    n = values.shape[0]
    t_values = np.arange(window_size, n, step_size, dtype=np.int64)
    feat_shape = values.shape[1:]
    if len(t_values) == 0:
        return WindowSet(
            inputs=np.empty((0, window_size) + feat_shape, dtype=values.dtype),
            targets=np.empty((0,) + feat_shape, dtype=values.dtype),
            target_indices=np.empty((0,), dtype=np.int64),
            window_size=window_size,
            step_size=step_size,
        )
    inputs = np.stack([values[t - window_size : t] for t in t_values], axis=0)
    return WindowSet(
        inputs=inputs,
        targets=values[t_values],
        target_indices=t_values + index_base,
        window_size=window_size,
        step_size=step_size,
    )


def split_train_eval(
    labels: Sequence[Union[str, bool]],
    train_fraction: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Time-ordered split: the first train_fraction of normal items train.

    `labels` holds one entry per record in time order: the string labels, or
    booleans meaning "abnormal". Training indices cover only normal records;
    everything else, including all abnormal records, goes to eval. Returns
    (train_indices, eval_indices), both ascending.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    abnormal = np.array(
        [l == LABEL_ABNORMAL if isinstance(l, str) else bool(l) for l in labels], dtype=bool
    )
    bad = [l for l in labels if isinstance(l, str) and l not in (LABEL_NORMAL, LABEL_ABNORMAL)]
    if bad:
        raise ValueError(f"bad label {bad[0]!r}")
    normal_positions = np.flatnonzero(~abnormal)
    n_train = int(len(normal_positions) * train_fraction)
    if n_train == 0:
        raise ValueError("not enough normal records to form a training set")
    train_idx = normal_positions[:n_train]
    mask = np.ones(len(abnormal), dtype=bool)
    mask[train_idx] = False
    return train_idx, np.flatnonzero(mask)
