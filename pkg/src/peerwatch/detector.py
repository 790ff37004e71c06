"""Window-level anomaly rules on top of a trained forecaster.

Numeric route: score a window by the L2 distance between forecast and
observation; flag when the score exceeds a threshold calibrated as a high
quantile of validation scores. Categorical route: flag when the observed
token is missing from the model's top-k next-token candidates. Window
verdicts project back onto individual records through the window's target
index; records never covered by a window (a sequence's first `window_size`
records) count as normal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .nn import SequenceModel, PROB_FLOOR, predict
from .pipeline import WindowSet


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["numeric", "categorical"] = "numeric"
    top_k: int = Field(default=5, ge=1)
    threshold_quantile: float = Field(default=0.99, gt=0.0, le=1.0)


@dataclass(frozen=True, slots=True)
class AnomalyVerdict:
    window_index: int
    target_index: int
    predicted: tuple
    observed: tuple
    score: float
    flagged: bool


def forecast_scores(model: SequenceModel, windows: WindowSet, chunk: int = 2048) -> np.ndarray:
    """Euclidean forecast error per window."""
    preds = predict(model, windows.inputs, chunk=chunk)
    return np.sqrt(((preds - windows.targets) ** 2).sum(axis=1))


def calibrate_threshold(
    model: SequenceModel,
    validation_windows: WindowSet,
    quantile: float = 0.99,
) -> float:
    """Linear-interpolation quantile of validation forecast errors."""
    if len(validation_windows) == 0:
        raise ValueError("cannot calibrate a threshold without validation windows")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must be in (0, 1]")
    scores = forecast_scores(model, validation_windows)
    return float(np.quantile(scores, quantile))


def detect_numeric(
    model: SequenceModel,
    windows: WindowSet,
    threshold: float,
    chunk: int = 2048,
) -> list[AnomalyVerdict]:
    """Flag windows whose forecast error strictly exceeds the threshold."""
    preds = predict(model, windows.inputs, chunk=chunk)
    scores = np.sqrt(((preds - windows.targets) ** 2).sum(axis=1))
    out = []
    for w in range(len(windows)):
        score = float(scores[w])
        out.append(
            AnomalyVerdict(
                window_index=w,
                target_index=int(windows.target_indices[w]),
                predicted=tuple(float(v) for v in preds[w]),
                observed=tuple(float(v) for v in windows.targets[w]),
                score=score,
                flagged=score > threshold,
            )
        )
    return out


def top_k_candidates(probs: np.ndarray, k: int) -> np.ndarray:
    """Ids of the k most probable tokens per row; ties prefer the lower id."""
    # Stable argsort on -p keeps ascending id order within equal probabilities.
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]


def detect_categorical(
    model: SequenceModel,
    windows: WindowSet,
    k: int = 5,
    chunk: int = 2048,
) -> list[AnomalyVerdict]:
    """Flag windows whose observed next token is outside the top-k forecast."""
    probs = predict(model, windows.inputs, chunk=chunk)
    if k > probs.shape[1]:
        raise ValueError(f"top_k {k} exceeds vocabulary size {probs.shape[1]}")
    top = top_k_candidates(probs, k)
    observed = np.asarray(windows.targets, dtype=np.int64)
    out = []
    for w in range(len(windows)):
        obs = int(observed[w])
        candidates = tuple(int(t) for t in top[w])
        p_obs = float(probs[w, obs])
        out.append(
            AnomalyVerdict(
                window_index=w,
                target_index=int(windows.target_indices[w]),
                predicted=candidates,
                observed=(obs,),
                score=float(-np.log(max(p_obs, PROB_FLOOR))),
                flagged=obs not in candidates,
            )
        )
    return out


def verdicts_to_record_flags(
    verdicts: Sequence[AnomalyVerdict],
    n_records: int,
) -> np.ndarray:
    """Project window verdicts onto the records their targets point at.

    Returns a boolean array of length n_records; records no window targets
    stay False, i.e. are treated as normal.
    """
    flags = np.zeros(n_records, dtype=bool)
    for v in verdicts:
        if not 0 <= v.target_index < n_records:
            raise ValueError(f"target index {v.target_index} outside 0..{n_records - 1}")
        if v.flagged:
            flags[v.target_index] = True
    return flags


def write_verdicts_jsonl(path: str, verdicts: Sequence[AnomalyVerdict]) -> None:
    with open(path, "w") as fh:
        for v in verdicts:
            fh.write(json.dumps(asdict(v)) + "\n")


def read_verdicts_jsonl(path: str) -> list[AnomalyVerdict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    AnomalyVerdict(
                        window_index=int(obj["window_index"]),
                        target_index=int(obj["target_index"]),
                        predicted=tuple(obj["predicted"]),
                        observed=tuple(obj["observed"]),
                        score=float(obj["score"]),
                        flagged=bool(obj["flagged"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"line {lineno}: bad verdict record: {e}") from None
    return out
