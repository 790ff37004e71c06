"""Detection quality metrics and the scenario comparison report.

Abnormal is the positive class everywhere. Zero-denominator metrics are
undefined rather than zero and render as an em dash in reports, matching
how missing baseline numbers are shown.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .events import LABEL_ABNORMAL, LABEL_NORMAL

UNDEFINED_CELL = "—"  # em dash


@dataclass(frozen=True, slots=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_bool_array(labels: Sequence[Union[str, bool]]) -> np.ndarray:
    out = np.empty(len(labels), dtype=bool)
    for i, l in enumerate(labels):
        if isinstance(l, str):
            if l == LABEL_ABNORMAL:
                out[i] = True
            elif l == LABEL_NORMAL:
                out[i] = False
            else:
                raise ValueError(f"bad label {l!r}")
        else:
            out[i] = bool(l)
    return out


def confusion(
    predicted: Sequence[Union[str, bool]],
    actual: Sequence[Union[str, bool]],
) -> ConfusionCounts:
    """Count TP/FP/TN/FN with abnormal (True) as the positive class."""
    if len(predicted) != len(actual):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(actual)} labels")
    p = _as_bool_array(predicted)
    a = _as_bool_array(actual)
    return ConfusionCounts(
        tp=int(np.sum(p & a)),
        fp=int(np.sum(p & ~a)),
        tn=int(np.sum(~p & ~a)),
        fn=int(np.sum(~p & a)),
    )


@dataclass(frozen=True, slots=True)
class Metrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    accuracy: Optional[float]


def metrics(c: ConfusionCounts) -> Metrics:
    """Precision, recall, F1 and accuracy; None where the denominator is 0."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else None
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    accuracy = (c.tp + c.tn) / c.total if c.total > 0 else None
    return Metrics(precision, recall, f1, accuracy)


@dataclass(frozen=True, slots=True)
class MetricRow:
    scenario: str
    attackers: int
    victims: int
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    accuracy: Optional[float]
    source: str = "measured"


#: Published results shipped for side-by-side comparison in reports. The
#: first three are the gossip-trace scenarios; the last two are the live
#: discovery experiment, including its random-forest baseline.
PAPER_REFERENCE_ROWS: tuple[MetricRow, ...] = (
    MetricRow("eclipse-single", 100, 1, 1.00, 0.99, 0.99, 0.99, source="paper-reference"),
    MetricRow("covert", 100, 20, 1.00, 0.80, 0.89, 0.80, source="paper-reference"),
    MetricRow("eclipse-net", 200, 50, 1.00, 0.79, 0.88, 0.79, source="paper-reference"),
    MetricRow("discovery-poisoning", 4, 1, 0.81, 0.88, 0.85, 0.87, source="paper-reference"),
    MetricRow(
        "discovery-poisoning-rfc-baseline", 4, 1, 0.71, 0.95, 0.62, None, source="paper-reference"
    ),
)


def reference_rows(scenarios: Optional[Sequence[str]] = None) -> list[MetricRow]:
    if scenarios is None:
        return list(PAPER_REFERENCE_ROWS)
    return [r for r in PAPER_REFERENCE_ROWS if r.scenario in scenarios]


def _cell(value: Optional[float]) -> str:
    return UNDEFINED_CELL if value is None else f"{value:.2f}"


REPORT_COLUMNS = (
    "scenario",
    "attackers",
    "victims",
    "precision",
    "recall",
    "f1",
    "accuracy",
    "source",
)


def render_report(rows: Sequence[MetricRow]) -> tuple[str, str]:
    """Render rows to (markdown table, CSV text) with 2-decimal cells."""
    md = io.StringIO()
    md.write("| Scenario | Attackers | Victims | Precision | Recall | F1 | Accuracy | Source |\n")
    md.write("| --- | --- | --- | --- | --- | --- | --- | --- |\n")
    for r in rows:
        md.write(
            f"| {r.scenario} | {r.attackers} | {r.victims} | {_cell(r.precision)} "
            f"| {_cell(r.recall)} | {_cell(r.f1)} | {_cell(r.accuracy)} | {r.source} |\n"
        )

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r.scenario,
                r.attackers,
                r.victims,
                _cell(r.precision),
                _cell(r.recall),
                _cell(r.f1),
                _cell(r.accuracy),
                r.source,
            ]
        )
    return md.getvalue(), buf.getvalue()


def aggregate_flags_by_peer(
    predicted: Sequence[bool],
    actual: Sequence[bool],
    peers: Sequence[int],
) -> tuple[list[bool], list[bool]]:
    """Collapse record-level flags to one (any-flagged) verdict per peer."""
    if not (len(predicted) == len(actual) == len(peers)):
        raise ValueError("length mismatch")
    pred_by: dict[int, bool] = {}
    act_by: dict[int, bool] = {}
    for flag, truth, peer in zip(predicted, actual, peers):
        pred_by[peer] = pred_by.get(peer, False) or bool(flag)
        act_by[peer] = act_by.get(peer, False) or bool(truth)
    order = sorted(pred_by)
    return [pred_by[p] for p in order], [act_by[p] for p in order]
