"""Stage orchestration: simulate -> prepare -> train -> detect -> evaluate.

Stages communicate only through files inside the experiment directory, so
any stage can be rerun in isolation or on another machine's artifacts:

    traces.csv / discovery.csv / manifest.json      simulate
    prepared/*.npy, scaler.json|vocab.json, meta.json   prepare
    checkpoint.json, history.csv                    train
    threshold.json, verdicts.jsonl, predicted_labels.csv   detect
    metrics.json, report.md, report.csv             evaluate

Arrays are stored as .npy (never zipped archives) so byte-identical reruns
stay byte-identical on disk.
"""

from __future__ import annotations

import csv
import json
import os
import time

import numpy as np

from . import detector as det
from . import evaluation as ev
from . import nn
from . import pipeline as pl
from .events import (
    EVENT_TYPE_COUNT,
    LABEL_ABNORMAL,
    LABEL_NORMAL,
    read_discovery_csv,
    read_trace_csv,
    write_discovery_csv,
    write_trace_csv,
)
from .netsim import SimConfig, run_simulation
from .schemas import ExperimentConfig, ModelSpec
from .detector import DetectorConfig
from .nn import TrainConfig
from .pipeline import PipelineParams

TRACES_CSV = "traces.csv"
DISCOVERY_CSV = "discovery.csv"
MANIFEST_JSON = "manifest.json"
PREPARED_DIR = "prepared"
META_JSON = "meta.json"
SCALER_JSON = "scaler.json"
VOCAB_JSON = "vocab.json"
CHECKPOINT_JSON = "checkpoint.json"
HISTORY_CSV = "history.csv"
THRESHOLD_JSON = "threshold.json"
VERDICTS_JSONL = "verdicts.jsonl"
PREDICTED_CSV = "predicted_labels.csv"
METRICS_JSON = "metrics.json"
REPORT_MD = "report.md"
REPORT_CSV = "report.csv"


def _prepared(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, PREPARED_DIR, name)


def stage_simulate(config: ExperimentConfig, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    output = run_simulation(config.sim)
    write_trace_csv(os.path.join(out_dir, TRACES_CSV), output.traces)
    write_discovery_csv(os.path.join(out_dir, DISCOVERY_CSV), output.discovery)
    with open(os.path.join(out_dir, MANIFEST_JSON), "w") as fh:
        json.dump(output.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "scenario": config.sim.scenario,
        "counts": output.manifest["counts"],
        "digests": output.manifest["digests"],
    }


def _stratified_val_mask(n: int, fraction: float) -> np.ndarray:
    """Every k-th window goes to validation; spread beats a tail slice."""
    mask = np.zeros(n, dtype=bool)
    if fraction > 0.0 and n > 0:
        stride = max(2, round(1.0 / fraction))
        mask[np.arange(stride - 1, n, stride)] = True
    return mask


def _windows_for_partition(
    scaled: np.ndarray,
    peers: np.ndarray,
    idx: np.ndarray,
    params: PipelineParams,
) -> pl.WindowSet:
    """Per-peer sliding windows over one partition of the binned rows.

    idx selects partition members from the global time-ordered bin list;
    target indices come back as positions *within the partition*.
    """
    part_peers = peers[idx]
    part_values = scaled[idx]
    parts = []
    for peer in np.unique(part_peers):
        positions = np.flatnonzero(part_peers == peer)
        ws = pl.make_windows(part_values[positions], params.window_size, params.step_size)
        ws.target_indices = positions[ws.target_indices]
        parts.append(ws)
    return pl.WindowSet.concat(parts)


def _prepare_numeric(config: ExperimentConfig, out_dir: str) -> dict:
    params = config.pipeline
    records = read_trace_csv(os.path.join(out_dir, TRACES_CSV))
    kept, dropped = pl.clean(records)
    bins = pl.bin_traces(kept, params.bin_ms)
    if not bins:
        raise ValueError("no binned vectors: the trace file is empty")
    bins.sort(key=lambda b: (b.bin_start_ms, b.peer))
    labels = [LABEL_NORMAL if b.honest else LABEL_ABNORMAL for b in bins]
    peers = np.array([b.peer for b in bins], dtype=np.int64)
    raw = pl.vectors_to_array(bins)

    train_idx, eval_idx = pl.split_train_eval(labels, params.train_fraction)
    scaler = pl.fit_scaler(raw[train_idx])
    scaled = scaler.apply(raw)

    train_ws = _windows_for_partition(scaled, peers, train_idx, params)
    eval_ws = _windows_for_partition(scaled, peers, eval_idx, params)
    if len(train_ws) == 0:
        raise ValueError("training partition yields no windows; not enough bins per peer")

    val_mask = _stratified_val_mask(len(train_ws), params.validation_fraction)
    eval_labels = np.array([labels[i] == LABEL_ABNORMAL for i in eval_idx], dtype=bool)

    os.makedirs(os.path.join(out_dir, PREPARED_DIR), exist_ok=True)
    np.save(_prepared(out_dir, "train_inputs.npy"), train_ws.inputs[~val_mask])
    np.save(_prepared(out_dir, "train_targets.npy"), train_ws.targets[~val_mask])
    np.save(_prepared(out_dir, "val_inputs.npy"), train_ws.inputs[val_mask])
    np.save(_prepared(out_dir, "val_targets.npy"), train_ws.targets[val_mask])
    np.save(_prepared(out_dir, "eval_inputs.npy"), eval_ws.inputs)
    np.save(_prepared(out_dir, "eval_targets.npy"), eval_ws.targets)
    np.save(_prepared(out_dir, "eval_target_indices.npy"), eval_ws.target_indices)
    np.save(_prepared(out_dir, "eval_labels.npy"), eval_labels)
    np.save(_prepared(out_dir, "eval_peers.npy"), peers[eval_idx])
    with open(_prepared(out_dir, SCALER_JSON), "w") as fh:
        fh.write(scaler.to_json())

    meta = {
        "route": "numeric",
        "n_features": EVENT_TYPE_COUNT,
        "window_size": params.window_size,
        "step_size": params.step_size,
        "bin_ms": params.bin_ms,
        "records": len(records),
        "dropped": dropped,
        "bins": len(bins),
        "train_records": int(len(train_idx)),
        "eval_records": int(len(eval_idx)),
        "train_windows": int((~val_mask).sum()),
        "val_windows": int(val_mask.sum()),
        "eval_windows": len(eval_ws),
    }
    with open(_prepared(out_dir, META_JSON), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def _prepare_categorical(config: ExperimentConfig, out_dir: str) -> dict:
    params = config.pipeline
    records = read_discovery_csv(os.path.join(out_dir, DISCOVERY_CSV))
    kept, dropped = pl.clean(records)
    if not kept:
        raise ValueError("no discovery records to prepare")
    # Novelty is stateful, so tokenize the whole stream once; the vocabulary
    # is still fitted only on the training slice.
    keys = pl.token_keys(kept, params.novelty_window, params.max_token_len)
    labels = [r.label for r in kept]
    train_idx, eval_idx = pl.split_train_eval(labels, params.train_fraction)
    vocab = pl.Vocabulary.fit([keys[i] for i in train_idx], params.min_token_count)
    ids = np.array([vocab.encode(k) for k in keys], dtype=np.int64)

    train_ws = pl.make_windows(ids[train_idx], params.window_size, params.step_size)
    eval_ws = pl.make_windows(ids[eval_idx], params.window_size, params.step_size)
    if len(train_ws) == 0:
        raise ValueError("training partition yields no windows")

    val_mask = _stratified_val_mask(len(train_ws), params.validation_fraction)
    eval_labels = np.array([labels[i] == LABEL_ABNORMAL for i in eval_idx], dtype=bool)

    os.makedirs(os.path.join(out_dir, PREPARED_DIR), exist_ok=True)
    np.save(_prepared(out_dir, "train_inputs.npy"), train_ws.inputs[~val_mask])
    np.save(_prepared(out_dir, "train_targets.npy"), train_ws.targets[~val_mask])
    np.save(_prepared(out_dir, "val_inputs.npy"), train_ws.inputs[val_mask])
    np.save(_prepared(out_dir, "val_targets.npy"), train_ws.targets[val_mask])
    np.save(_prepared(out_dir, "eval_inputs.npy"), eval_ws.inputs)
    np.save(_prepared(out_dir, "eval_targets.npy"), eval_ws.targets)
    np.save(_prepared(out_dir, "eval_target_indices.npy"), eval_ws.target_indices)
    np.save(_prepared(out_dir, "eval_labels.npy"), eval_labels)
    with open(_prepared(out_dir, VOCAB_JSON), "w") as fh:
        fh.write(vocab.to_json())

    meta = {
        "route": "categorical",
        "vocab_size": vocab.size,
        "window_size": params.window_size,
        "step_size": params.step_size,
        "records": len(records),
        "dropped": dropped,
        "train_records": int(len(train_idx)),
        "eval_records": int(len(eval_idx)),
        "train_windows": int((~val_mask).sum()),
        "val_windows": int(val_mask.sum()),
        "eval_windows": len(eval_ws),
    }
    with open(_prepared(out_dir, META_JSON), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def stage_prepare(config: ExperimentConfig, out_dir: str) -> dict:
    if config.route == "categorical":
        return _prepare_categorical(config, out_dir)
    return _prepare_numeric(config, out_dir)


def _load_meta(out_dir: str) -> dict:
    with open(_prepared(out_dir, META_JSON)) as fh:
        return json.load(fh)


def _model_params(config: ExperimentConfig, meta: dict) -> nn.ModelParams:
    spec = config.model
    if meta["route"] == "categorical":
        return nn.ModelParams(
            hidden_size=spec.hidden_size,
            num_layers=spec.num_layers,
            num_directions=spec.num_directions,
            vocab_size=meta["vocab_size"],
            embedding_dim=spec.embedding_dim,
            output_size=meta["vocab_size"],
        )
    return nn.ModelParams(
        hidden_size=spec.hidden_size,
        num_layers=spec.num_layers,
        num_directions=spec.num_directions,
        input_features=meta["n_features"],
        output_size=meta["n_features"],
    )


def stage_train(config: ExperimentConfig, out_dir: str) -> dict:
    meta = _load_meta(out_dir)
    train_inputs = np.load(_prepared(out_dir, "train_inputs.npy"))
    train_targets = np.load(_prepared(out_dir, "train_targets.npy"))
    val_inputs = np.load(_prepared(out_dir, "val_inputs.npy"))
    val_targets = np.load(_prepared(out_dir, "val_targets.npy"))

    model = nn.SequenceModel.initialize(_model_params(config, meta), config.train.random_seed)
    started = time.monotonic()
    result = nn.train(model, train_inputs, train_targets, val_inputs, val_targets, config.train)
    elapsed = time.monotonic() - started

    nn.save_checkpoint(model, os.path.join(out_dir, CHECKPOINT_JSON))
    with open(os.path.join(out_dir, HISTORY_CSV), "w") as fh:
        fh.write(nn.history_csv(result))
    return {
        "route": meta["route"],
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_early": result.stopped_early,
        "final_train_loss": result.history[-1].train_loss if result.history else None,
        "train_seconds": round(elapsed, 3),
    }


def _load_eval_windows(out_dir: str, meta: dict) -> pl.WindowSet:
    return pl.WindowSet(
        inputs=np.load(_prepared(out_dir, "eval_inputs.npy")),
        targets=np.load(_prepared(out_dir, "eval_targets.npy")),
        target_indices=np.load(_prepared(out_dir, "eval_target_indices.npy")),
        window_size=meta["window_size"],
        step_size=meta["step_size"],
    )


def stage_detect(config: ExperimentConfig, out_dir: str) -> dict:
    meta = _load_meta(out_dir)
    model = nn.load_checkpoint(os.path.join(out_dir, CHECKPOINT_JSON))
    eval_ws = _load_eval_windows(out_dir, meta)

    summary: dict = {"route": meta["route"], "eval_windows": len(eval_ws)}
    if meta["route"] == "numeric":
        val_inputs = np.load(_prepared(out_dir, "val_inputs.npy"))
        val_ws = pl.WindowSet(
            inputs=val_inputs,
            targets=np.load(_prepared(out_dir, "val_targets.npy")),
            target_indices=np.zeros(len(val_inputs), dtype=np.int64),
            window_size=meta["window_size"],
            step_size=meta["step_size"],
        )
        threshold = det.calibrate_threshold(model, val_ws, config.detector.threshold_quantile)
        with open(os.path.join(out_dir, THRESHOLD_JSON), "w") as fh:
            json.dump(
                {"quantile": config.detector.threshold_quantile, "threshold": threshold}, fh
            )
            fh.write("\n")
        verdicts = det.detect_numeric(model, eval_ws, threshold)
        summary["threshold"] = threshold
    else:
        verdicts = det.detect_categorical(model, eval_ws, config.detector.top_k)
        summary["top_k"] = config.detector.top_k

    flags = det.verdicts_to_record_flags(verdicts, meta["eval_records"])
    det.write_verdicts_jsonl(os.path.join(out_dir, VERDICTS_JSONL), verdicts)
    with open(os.path.join(out_dir, PREDICTED_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_index", "predicted"])
        for i, flag in enumerate(flags):
            w.writerow([i, LABEL_ABNORMAL if flag else LABEL_NORMAL])
    summary["flagged_windows"] = int(sum(v.flagged for v in verdicts))
    summary["flagged_records"] = int(flags.sum())
    return summary


def _read_predicted(out_dir: str) -> np.ndarray:
    path = os.path.join(out_dir, PREDICTED_CSV)
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["record_index", "predicted"]:
            raise ValueError(f"{path}: bad header {header!r}")
        pairs = [(int(r[0]), r[1]) for r in rows]
    flags = np.zeros(len(pairs), dtype=bool)
    for i, label in pairs:
        if label not in (LABEL_NORMAL, LABEL_ABNORMAL):
            raise ValueError(f"bad predicted label {label!r}")
        flags[i] = label == LABEL_ABNORMAL
    return flags


def stage_evaluate(config: ExperimentConfig, out_dir: str) -> dict:
    predicted = _read_predicted(out_dir)
    actual = np.load(_prepared(out_dir, "eval_labels.npy"))
    if config.route == "numeric":
        # The gossip detector classifies peer connections, not individual
        # bins: one verdict per trace row, flagged if any record flags.
        peers = np.load(_prepared(out_dir, "eval_peers.npy"))
        pred_rows, actual_rows = ev.aggregate_flags_by_peer(
            predicted.tolist(), actual.tolist(), peers.tolist()
        )
        counts = ev.confusion(pred_rows, actual_rows)
        unit = "connection"
    else:
        counts = ev.confusion(predicted.tolist(), actual.tolist())
        unit = "record"
    m = ev.metrics(counts)

    measured = ev.MetricRow(
        scenario=config.name,
        attackers=config.sim.n_attackers,
        victims=config.sim.n_victims,
        precision=m.precision,
        recall=m.recall,
        f1=m.f1,
        accuracy=m.accuracy,
        source="measured",
    )
    if config.route == "categorical":
        refs = ev.reference_rows(["discovery-poisoning", "discovery-poisoning-rfc-baseline"])
    else:
        refs = ev.reference_rows(["eclipse-single", "covert", "eclipse-net"])
    md, csv_text = ev.render_report([measured] + refs)
    with open(os.path.join(out_dir, REPORT_MD), "w") as fh:
        fh.write("# Detection report\n\n" + md)
    with open(os.path.join(out_dir, REPORT_CSV), "w") as fh:
        fh.write(csv_text)

    payload = {
        "unit": unit,
        "tp": counts.tp,
        "fp": counts.fp,
        "tn": counts.tn,
        "fn": counts.fn,
        "precision": m.precision,
        "recall": m.recall,
        "f1": m.f1,
        "accuracy": m.accuracy,
    }
    with open(os.path.join(out_dir, METRICS_JSON), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload


STAGES = {
    "simulate": stage_simulate,
    "prepare": stage_prepare,
    "train": stage_train,
    "detect": stage_detect,
    "evaluate": stage_evaluate,
}

STAGE_ORDER = ("simulate", "prepare", "train", "detect", "evaluate")


def run_experiment(config: ExperimentConfig, out_dir: str) -> dict:
    stages = {}
    for name in STAGE_ORDER:
        stages[name] = STAGES[name](config, out_dir)
    return {"name": config.name, "out_dir": out_dir, "stages": stages, "metrics": stages["evaluate"]}


# -- presets ----------------------------------------------------------------


def _gossip_preset(name: str, sim: SimConfig) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        sim=sim,
        pipeline=PipelineParams(),
        model=ModelSpec(hidden_size=20, num_layers=2, num_directions=2),
        train=TrainConfig(
            epochs=100, batch_size=1000, learning_rate=0.01, patience=5, loss="mse", random_seed=50
        ),
        detector=DetectorConfig(mode="numeric", threshold_quantile=0.999),
    )


def _discovery_preset() -> ExperimentConfig:
    return ExperimentConfig(
        name="discovery-poisoning",
        sim=SimConfig(
            scenario="discovery-poisoning",
            seed=42,
            n_honest=256,
            n_attackers=4,
            n_victims=1,
            duration_ms=300_000,
            attack_start_ms=165_000,
            bucket_capacity=16,
            honest_churn_hz=6.0,
            attack_churn_hz=20.0,
            fresh_ip_fraction=0.01,
            honest_ip_pool=32,
        ),
        pipeline=PipelineParams(train_fraction=0.5),
        model=ModelSpec(hidden_size=128, num_layers=2, num_directions=2, embedding_dim=10),
        train=TrainConfig(
            epochs=100,
            batch_size=1024,
            learning_rate=0.01,
            patience=30,
            loss="cross_entropy",
            random_seed=42,
        ),
        detector=DetectorConfig(mode="categorical", top_k=5),
    )


def build_presets() -> dict[str, ExperimentConfig]:
    from .netsim import scenario_presets

    out: dict[str, ExperimentConfig] = {}
    for name, sim in scenario_presets():
        out[name] = _gossip_preset(name, sim)
    out["discovery-poisoning"] = _discovery_preset()
    return out


def get_preset(name: str) -> ExperimentConfig:
    presets = build_presets()
    if name not in presets:
        known = ", ".join(sorted(presets))
        raise KeyError(f"unknown preset {name!r}; known presets: {known}")
    return presets[name]
