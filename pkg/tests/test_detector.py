"""Threshold calibration, flag rules, and verdict projection."""

import numpy as np
import pytest

import peerwatch.detector as det
from peerwatch.detector import (
    AnomalyVerdict,
    DetectorConfig,
    calibrate_threshold,
    detect_categorical,
    detect_numeric,
    forecast_scores,
    read_verdicts_jsonl,
    top_k_candidates,
    verdicts_to_record_flags,
    write_verdicts_jsonl,
)
from peerwatch.nn import ModelParams, SequenceModel, predict
from peerwatch.pipeline import make_windows


def _model(features=2, out=2, seed=1):
    params = ModelParams(
        hidden_size=3,
        num_layers=1,
        num_directions=1,
        output_size=out,
        input_features=features,
    )
    return SequenceModel.initialize(params, seed=seed)


def _windows(seed=2, n=30, features=2, window=4):
    values = np.random.default_rng(seed).normal(size=(n, features))
    return make_windows(values, window_size=window)


class TestNumericScores:
    def test_scores_are_l2_distances(self):
        model = _model()
        ws = _windows()
        scores = forecast_scores(model, ws)
        preds = predict(model, ws.inputs)
        expected = np.linalg.norm(preds - ws.targets, axis=1)
        assert np.allclose(scores, expected, atol=1e-12)

    def test_calibrate_matches_quantile(self):
        model = _model()
        ws = _windows()
        thr = calibrate_threshold(model, ws, quantile=0.9)
        assert thr == pytest.approx(float(np.quantile(forecast_scores(model, ws), 0.9)))

    def test_calibrate_rejects_empty_and_bad_quantile(self):
        model = _model()
        empty = make_windows(np.zeros((2, 2)), window_size=4)
        with pytest.raises(ValueError):
            calibrate_threshold(model, empty)
        with pytest.raises(ValueError):
            calibrate_threshold(model, _windows(), quantile=0.0)
        with pytest.raises(ValueError):
            calibrate_threshold(model, _windows(), quantile=1.5)

    def test_flag_is_strictly_greater(self):
        model = _model()
        ws = _windows(n=10)
        scores = forecast_scores(model, ws)
        verdicts = detect_numeric(model, ws, threshold=float(scores[0]))
        assert verdicts[0].flagged is False
        verdicts = detect_numeric(model, ws, threshold=float(scores[0]) - 1e-9)
        assert verdicts[0].flagged is True

    def test_verdict_fields(self):
        model = _model()
        ws = _windows(n=10)
        verdicts = detect_numeric(model, ws, threshold=np.inf)
        assert [v.window_index for v in verdicts] == list(range(len(ws)))
        assert [v.target_index for v in verdicts] == ws.target_indices.tolist()
        assert all(isinstance(v.predicted, tuple) and len(v.predicted) == 2 for v in verdicts)
        assert all(not v.flagged for v in verdicts)
        assert all(v.observed == tuple(t) for v, t in zip(verdicts, ws.targets))


class TestTopK:
    def test_orders_by_probability(self):
        probs = np.array([[0.1, 0.6, 0.3]])
        assert top_k_candidates(probs, 2).tolist() == [[1, 2]]

    def test_ties_prefer_lower_id(self):
        probs = np.array([[0.4, 0.4, 0.2]])
        assert top_k_candidates(probs, 1).tolist() == [[0]]
        assert top_k_candidates(probs, 2).tolist() == [[0, 1]]

    def test_full_width(self):
        probs = np.array([[0.2, 0.3, 0.5]])
        assert top_k_candidates(probs, 3).tolist() == [[2, 1, 0]]


class TestCategoricalDetect:
    def _fake_predict(self, prob_rows):
        rows = np.asarray(prob_rows, dtype=np.float64)

        def fake(model, inputs, chunk=2048):
            return rows

        return fake

    def _token_windows(self, targets):
        n = len(targets)
        ws = make_windows(np.zeros(n + 3, dtype=np.int64), window_size=3)
        ws.targets[:] = np.asarray(targets)[: len(ws)]
        return ws

    def test_flag_when_observed_outside_top_k(self, monkeypatch):
        probs = [[0.5, 0.3, 0.15, 0.05], [0.5, 0.3, 0.15, 0.05]]
        monkeypatch.setattr(det, "predict", self._fake_predict(probs))
        ws = self._token_windows([1, 3])
        verdicts = detect_categorical(None, ws, k=2)
        assert verdicts[0].flagged is False
        assert verdicts[1].flagged is True
        assert verdicts[1].predicted == (0, 1)
        assert verdicts[1].observed == (3,)

    def test_score_is_negative_log_prob(self, monkeypatch):
        probs = [[0.5, 0.3, 0.2]]
        monkeypatch.setattr(det, "predict", self._fake_predict(probs))
        ws = self._token_windows([2])
        verdicts = detect_categorical(None, ws, k=1)
        assert verdicts[0].score == pytest.approx(-np.log(0.2))

    def test_zero_probability_uses_floor(self, monkeypatch):
        probs = [[1.0, 0.0]]
        monkeypatch.setattr(det, "predict", self._fake_predict(probs))
        ws = self._token_windows([1])
        verdicts = detect_categorical(None, ws, k=1)
        assert verdicts[0].score == pytest.approx(-np.log(1e-12))
        assert verdicts[0].flagged is True

    def test_k_beyond_vocab_raises(self, monkeypatch):
        monkeypatch.setattr(det, "predict", self._fake_predict([[0.6, 0.4]]))
        ws = self._token_windows([0])
        with pytest.raises(ValueError):
            detect_categorical(None, ws, k=3)


class TestProjection:
    def _verdict(self, target, flagged):
        return AnomalyVerdict(
            window_index=0,
            target_index=target,
            predicted=(0.0,),
            observed=(0.0,),
            score=1.0,
            flagged=flagged,
        )

    def test_flags_land_on_targets(self):
        verdicts = [self._verdict(2, True), self._verdict(4, False), self._verdict(5, True)]
        flags = verdicts_to_record_flags(verdicts, n_records=7)
        assert flags.tolist() == [False, False, True, False, False, True, False]

    def test_uncovered_records_stay_normal(self):
        assert verdicts_to_record_flags([], n_records=3).tolist() == [False] * 3

    def test_out_of_range_target_raises(self):
        with pytest.raises(ValueError):
            verdicts_to_record_flags([self._verdict(5, True)], n_records=5)
        with pytest.raises(ValueError):
            verdicts_to_record_flags([self._verdict(-1, False)], n_records=5)


class TestVerdictIO:
    def test_round_trip(self, tmp_path):
        verdicts = [
            AnomalyVerdict(0, 4, (0.25, 1.5), (0.0, 2.0), 1.5811, False),
            AnomalyVerdict(1, 5, (3, 1, 0), (7,), 27.631, True),
        ]
        path = str(tmp_path / "verdicts.jsonl")
        write_verdicts_jsonl(path, verdicts)
        assert read_verdicts_jsonl(path) == verdicts

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        write_verdicts_jsonl(str(path), [AnomalyVerdict(0, 1, (0.0,), (0.0,), 0.0, False)])
        path.write_text(path.read_text() + "\n\n")
        assert len(read_verdicts_jsonl(str(path))) == 1

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text('{"window_index": 0}\n')
        with pytest.raises(ValueError, match="line 1"):
            read_verdicts_jsonl(str(path))


class TestConfig:
    def test_defaults(self):
        cfg = DetectorConfig()
        assert cfg.mode == "numeric"
        assert cfg.top_k == 5
        assert cfg.threshold_quantile == 0.99

    def test_bounds(self):
        with pytest.raises(ValueError):
            DetectorConfig(top_k=0)
        with pytest.raises(ValueError):
            DetectorConfig(threshold_quantile=0.0)
        with pytest.raises(ValueError):
            DetectorConfig(threshold_quantile=1.01)
        with pytest.raises(ValueError):
            DetectorConfig(mode="other")
