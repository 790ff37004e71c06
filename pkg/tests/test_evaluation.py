"""Confusion counting, metric edge cases, report rendering, per-peer rollup."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peerwatch.evaluation import (
    UNDEFINED_CELL,
    ConfusionCounts,
    MetricRow,
    aggregate_flags_by_peer,
    confusion,
    metrics,
    reference_rows,
    render_report,
)


class TestConfusion:
    def test_bool_labels(self):
        c = confusion(
            predicted=[True, True, False, False],
            actual=[True, False, True, False],
        )
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
        assert c.total == 4

    def test_string_labels(self):
        c = confusion(
            predicted=["abnormal", "normal", "abnormal"],
            actual=["abnormal", "abnormal", "normal"],
        )
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 0)

    def test_mixed_label_kinds(self):
        c = confusion(predicted=[True, "normal"], actual=["abnormal", False])
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 0, 0, 1)

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            confusion([True], [True, False])

    def test_bad_label_raises(self):
        with pytest.raises(ValueError):
            confusion(["yes"], ["abnormal"])

    @given(
        st.lists(
            st.tuples(st.booleans(), st.booleans()), min_size=0, max_size=60
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_loop_count(self, pairs):
        predicted = [p for p, _ in pairs]
        actual = [a for _, a in pairs]
        c = confusion(predicted, actual)
        assert c.tp == sum(p and a for p, a in pairs)
        assert c.fp == sum(p and not a for p, a in pairs)
        assert c.fn == sum(not p and a for p, a in pairs)
        assert c.tn == sum(not p and not a for p, a in pairs)


class TestMetrics:
    def test_hand_example(self):
        m = metrics(ConfusionCounts(tp=9, fp=1, tn=5, fn=3))
        assert m.precision == pytest.approx(0.9)
        assert m.recall == pytest.approx(0.75)
        assert m.f1 == pytest.approx(2 * 0.9 * 0.75 / (0.9 + 0.75))
        assert m.accuracy == pytest.approx(14 / 18)

    def test_no_positive_predictions(self):
        m = metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=2))
        assert m.precision is None
        assert m.recall == 0.0
        assert m.f1 is None
        assert m.accuracy == pytest.approx(5 / 7)

    def test_no_actual_positives(self):
        m = metrics(ConfusionCounts(tp=0, fp=3, tn=5, fn=0))
        assert m.precision == 0.0
        assert m.recall is None
        assert m.f1 is None

    def test_zero_precision_and_recall(self):
        m = metrics(ConfusionCounts(tp=0, fp=2, tn=0, fn=2))
        assert m.precision == 0.0 and m.recall == 0.0
        assert m.f1 is None

    def test_empty_counts(self):
        m = metrics(ConfusionCounts(0, 0, 0, 0))
        assert m == type(m)(None, None, None, None)

    def test_perfect_detector(self):
        m = metrics(ConfusionCounts(tp=10, fp=0, tn=10, fn=0))
        assert (m.precision, m.recall, m.f1, m.accuracy) == (1.0, 1.0, 1.0, 1.0)


class TestReferenceRows:
    def test_discovery_row_values(self):
        (row,) = reference_rows(["discovery-poisoning"])
        assert (row.precision, row.recall, row.f1, row.accuracy) == (0.81, 0.88, 0.85, 0.87)

    def test_baseline_row_has_undefined_accuracy(self):
        (row,) = reference_rows(["discovery-poisoning-rfc-baseline"])
        assert (row.precision, row.recall, row.f1) == (0.71, 0.95, 0.62)
        assert row.accuracy is None

    def test_filter_and_default(self):
        assert len(reference_rows()) == 5
        assert reference_rows(["nope"]) == []
        assert {r.source for r in reference_rows()} == {"paper-reference"}


class TestRenderReport:
    def _rows(self):
        return [
            MetricRow("demo", 4, 1, 0.815, 1.0, None, 0.5),
        ]

    def test_markdown_two_decimals_and_dash(self):
        md, _ = render_report(self._rows())
        lines = md.strip().split("\n")
        assert lines[0].startswith("| Scenario ")
        assert "| 0.81 | 1.00 |" in lines[2].replace("  ", " ")
        assert f"| {UNDEFINED_CELL} |" in lines[2]

    def test_csv_shape(self):
        _, text = render_report(self._rows())
        lines = text.strip().split("\n")
        assert lines[0] == "scenario,attackers,victims,precision,recall,f1,accuracy,source"
        assert lines[1] == f"demo,4,1,0.81,1.00,{UNDEFINED_CELL},0.50,measured"

    def test_empty_rows_render_headers_only(self):
        md, text = render_report([])
        assert md.count("\n") == 2
        assert text.strip() == ",".join(
            ["scenario", "attackers", "victims", "precision", "recall", "f1", "accuracy", "source"]
        )


class TestPeerRollup:
    def test_any_flag_wins(self):
        pred, act = aggregate_flags_by_peer(
            predicted=[False, True, False, False],
            actual=[True, True, False, False],
            peers=[7, 7, 3, 3],
        )
        # Sorted by peer id: 3 first, then 7.
        assert pred == [False, True]
        assert act == [False, True]

    def test_single_record_peers(self):
        pred, act = aggregate_flags_by_peer([True], [False], [42])
        assert pred == [True] and act == [False]

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            aggregate_flags_by_peer([True], [False, True], [1, 2])
