"""Dense LSTM sequence models with hand-derived reverse-mode gradients.

No autograd framework: the forward pass caches what the analytic backward
pass needs, and the gradient of every parameter is assembled explicitly.
Everything is float64. Layout conventions:

* Gate weights are stacked row-wise in the order forget, input, output,
  candidate, so a cell carries W (4H, D), U (4H, H), b (4H,).
* Numeric batches are (batch, time, features); token batches are
  (batch, time) integer ids run through an embedding table.
* Bidirectional layers concatenate the forward and backward hidden state
  at each position; the prediction head reads the final position only.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or structurally wrong checkpoint file."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss or gradient at epoch {epoch}, batch {batch}: {value}")
        self.epoch = epoch
        self.batch = batch


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class LstmCellParams:
    """One direction of one layer: stacked gate weights and biases."""

    __slots__ = ("W", "U", "b")

    def __init__(self, W: np.ndarray, U: np.ndarray, b: np.ndarray):
        W = np.asarray(W, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if U.ndim != 2 or U.shape[0] != 4 * U.shape[1]:
            raise ValueError(f"U must be (4H, H), got {U.shape}")
        hidden = U.shape[1]
        if W.ndim != 2 or W.shape[0] != 4 * hidden:
            raise ValueError(f"W must be (4H, input), got {W.shape}")
        if b.shape != (4 * hidden,):
            raise ValueError(f"b must be (4H,), got {b.shape}")
        self.W, self.U, self.b = W, U, b

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]


def lstm_cell_step(
    cell: LstmCellParams,
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-step cell update for 1-d state vectors.

    Gates use the logistic function; candidate and output squash with tanh:
        f = sigma(Wf x + Uf h + bf)        i = sigma(Wi x + Ui h + bi)
        o = sigma(Wo x + Uo h + bo)        g = tanh(Wg x + Ug h + bg)
        c = f * c_prev + i * g             h = o * tanh(c)
    """
    H = cell.hidden
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x.shape != (cell.input_dim,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ValueError("shape mismatch in lstm_cell_step")
    z = cell.W @ x + cell.U @ h_prev + cell.b
    f = _sigmoid(z[:H])
    i = _sigmoid(z[H : 2 * H])
    o = _sigmoid(z[2 * H : 3 * H])
    g = np.tanh(z[3 * H :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise FloatingPointError("non-finite LSTM state")
    return h, c


class ModelParams(BaseModel):
    """Architecture description, close to a hyperparameter table row.

    Numeric models set input_features; categorical models set vocab_size and
    embedding_dim instead, and their output_size must equal vocab_size.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_size: int = Field(ge=1)
    num_layers: int = Field(default=2, ge=1)
    num_directions: Literal[1, 2] = 2
    output_size: int = Field(ge=1)
    input_features: Optional[int] = Field(default=None, ge=1)
    vocab_size: Optional[int] = Field(default=None, ge=2)
    embedding_dim: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _coherent(self) -> "ModelParams":
        categorical = self.vocab_size is not None
        if categorical:
            if self.embedding_dim is None:
                raise ValueError("categorical model needs embedding_dim")
            if self.input_features is not None:
                raise ValueError("set input_features or vocab_size, not both")
            if self.output_size != self.vocab_size:
                raise ValueError("classification head width must equal vocab_size")
        else:
            if self.input_features is None:
                raise ValueError("numeric model needs input_features")
            if self.embedding_dim is not None:
                raise ValueError("embedding_dim is only for categorical models")
        return self

    @property
    def mode(self) -> str:
        return "classification" if self.vocab_size is not None else "regression"

    @property
    def step_input_dim(self) -> int:
        return self.embedding_dim if self.vocab_size is not None else self.input_features


class SequenceModel:
    """Stacked (optionally bidirectional) LSTM with a linear head.

    The head consumes the last position of the top layer's output; for a
    classification model its logits pass through softmax, so forward()
    returns probabilities there and raw forecasts for regression.
    """

    def __init__(
        self,
        params: ModelParams,
        embedding: Optional[np.ndarray],
        cells: list[list[LstmCellParams]],
        head_w: np.ndarray,
        head_b: np.ndarray,
    ):
        self.params = params
        self.embedding = embedding
        self.cells = cells
        self.head_w = np.asarray(head_w, dtype=np.float64)
        self.head_b = np.asarray(head_b, dtype=np.float64)

    @classmethod
    def initialize(cls, params: ModelParams, seed: int) -> "SequenceModel":
        """Uniform(-1/sqrt(H), +1/sqrt(H)) init, then forget bias nudged +1.

        Draw order is fixed (embedding, cells layer-major then direction,
        head), so one seed pins every parameter bit-for-bit.
        """
        rng = np.random.default_rng([int(seed), 0])
        H = params.hidden_size
        bound = 1.0 / np.sqrt(H)
        draw = lambda *shape: rng.uniform(-bound, bound, shape)

        embedding = None
        if params.vocab_size is not None:
            embedding = draw(params.vocab_size, params.embedding_dim)
        cells: list[list[LstmCellParams]] = []
        for layer in range(params.num_layers):
            in_dim = params.step_input_dim if layer == 0 else H * params.num_directions
            row = []
            for _ in range(params.num_directions):
                W = draw(4 * H, in_dim)
                U = draw(4 * H, H)
                b = draw(4 * H)
                b[:H] += 1.0  # forget-gate bias starts open
                row.append(LstmCellParams(W, U, b))
            cells.append(row)
        head_w = draw(params.output_size, H * params.num_directions)
        head_b = draw(params.output_size)
        return cls(params, embedding, cells, head_w, head_b)

    DIRECTION_NAMES = ("fw", "bw")

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        if self.embedding is not None:
            out.append(("embedding", self.embedding))
        for l, row in enumerate(self.cells):
            for d, cell in enumerate(row):
                tag = f"layer{l}.{self.DIRECTION_NAMES[d]}"
                out.append((f"{tag}.W", cell.W))
                out.append((f"{tag}.U", cell.U))
                out.append((f"{tag}.b", cell.b))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        for current_name, arr in self.named_parameters():
            if current_name == name:
                if arr.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {value.shape}")
                arr[...] = value
                return
        raise KeyError(name)


def _scan(cell: LstmCellParams, seq: np.ndarray, reverse: bool):
    """Run one direction over (B, T, D); returns (B, T, H) plus step cache."""
    B, T, _ = seq.shape
    H = cell.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = [None] * T
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    Wt, Ut = cell.W.T, cell.U.T
    for t in order:
        z = seq[:, t, :] @ Wt + h @ Ut + cell.b
        f = _sigmoid(z[:, :H])
        i = _sigmoid(z[:, H : 2 * H])
        o = _sigmoid(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((t, h, c, f, i, o, g, tc))
        h, c = h_new, c_new
        hs[t] = h_new
    return np.stack(hs, axis=1), steps


def forward(model: SequenceModel, inputs: np.ndarray, return_cache: bool = False):
    """Full forward pass.

    inputs: float (B, T, F) for regression, int (B, T) for classification.
    Returns predictions (B, output_size), which are probabilities in
    classification mode, and, when requested, the cache backward() needs.
    """
    p = model.params
    if p.mode == "classification":
        tokens = np.asarray(inputs)
        if tokens.ndim != 2:
            raise ValueError(f"token batch must be (B, T), got {tokens.shape}")
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= p.vocab_size:
            raise ValueError("token id out of vocabulary range")
        seq = model.embedding[tokens]
    else:
        tokens = None
        seq = np.asarray(inputs, dtype=np.float64)
        if seq.ndim != 3 or seq.shape[2] != p.input_features:
            raise ValueError(f"numeric batch must be (B, T, {p.input_features}), got {seq.shape}")

    layer_inputs = []
    scans = []
    for row in model.cells:
        layer_inputs.append(seq)
        outs = []
        row_steps = []
        for d, cell in enumerate(row):
            out, steps = _scan(cell, seq, reverse=(d == 1))
            outs.append(out)
            row_steps.append(steps)
        scans.append(row_steps)
        seq = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=2)

    rep = seq[:, -1, :]
    out = rep @ model.head_w.T + model.head_b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite model output")
    probs = _softmax(out) if p.mode == "classification" else None
    pred = probs if probs is not None else out

    if not return_cache:
        return pred, None
    cache = {
        "tokens": tokens,
        "layer_inputs": layer_inputs,
        "scans": scans,
        "rep": rep,
        "probs": probs,
    }
    return pred, cache


def backward(model: SequenceModel, cache: dict, d_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the scalar loss wrt every parameter.

    d_pred is the loss gradient wrt forward()'s return value, so for
    classification it is a gradient wrt probabilities and the softmax
    Jacobian is applied here.
    """
    p = model.params
    H = p.hidden_size
    d_pred = np.asarray(d_pred, dtype=np.float64)

    if p.mode == "classification":
        probs = cache["probs"]
        inner = (d_pred * probs).sum(axis=1, keepdims=True)
        d_logits = probs * (d_pred - inner)
    else:
        d_logits = d_pred

    rep = cache["rep"]
    grads: dict[str, np.ndarray] = {
        "head.w": d_logits.T @ rep,
        "head.b": d_logits.sum(axis=0),
    }
    d_rep = d_logits @ model.head_w

    top = cache["layer_inputs"][-1]
    B, T, _ = top.shape
    d_seq_out = np.zeros((B, T, H * p.num_directions))
    d_seq_out[:, -1, :] = d_rep

    for l in range(len(model.cells) - 1, -1, -1):
        seq = cache["layer_inputs"][l]
        d_seq_in = np.zeros_like(seq)
        for d, cell in enumerate(model.cells[l]):
            tag = f"layer{l}.{model.DIRECTION_NAMES[d]}"
            dW = np.zeros_like(cell.W)
            dU = np.zeros_like(cell.U)
            db = np.zeros_like(cell.b)
            if p.num_directions == 1:
                dH = d_seq_out
            else:
                dH = d_seq_out[:, :, d * H : (d + 1) * H]
            dh_carry = np.zeros((seq.shape[0], H))
            dc_carry = np.zeros((seq.shape[0], H))
            for t, h_prev, c_prev, f, i, o, g, tc in reversed(cache["scans"][l][d]):
                dh = dH[:, t, :] + dh_carry
                do = dh * tc
                dc = dc_carry + dh * o * (1.0 - tc * tc)
                df = dc * c_prev
                di = dc * g
                dg = dc * i
                dz = np.concatenate(
                    [
                        df * f * (1.0 - f),
                        di * i * (1.0 - i),
                        do * o * (1.0 - o),
                        dg * (1.0 - g * g),
                    ],
                    axis=1,
                )
                x = seq[:, t, :]
                dW += dz.T @ x
                dU += dz.T @ h_prev
                db += dz.sum(axis=0)
                d_seq_in[:, t, :] += dz @ cell.W
                dh_carry = dz @ cell.U
                dc_carry = dc * f
            grads[f"{tag}.W"] = dW
            grads[f"{tag}.U"] = dU
            grads[f"{tag}.b"] = db
        d_seq_out = d_seq_in

    if p.mode == "classification":
        d_emb = np.zeros_like(model.embedding)
        np.add.at(d_emb, cache["tokens"], d_seq_out)
        grads["embedding"] = d_emb
    return grads


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.mean((pred - target) ** 2))


def mse_gradient(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    return 2.0 * (pred - np.asarray(target, dtype=np.float64)) / pred.size


def loss_cross_entropy(probs: np.ndarray, targets) -> float:
    """Mean negative log probability of the target ids, floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
        targets = np.asarray([targets])
    else:
        targets = np.asarray(targets)
    picked = probs[np.arange(len(targets)), targets]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_gradient(probs: np.ndarray, targets) -> np.ndarray:
    """Gradient of loss_cross_entropy wrt the probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    squeeze = probs.ndim == 1
    if squeeze:
        probs = probs[None, :]
        targets = np.asarray([targets])
    else:
        targets = np.asarray(targets)
    grad = np.zeros_like(probs)
    rows = np.arange(len(targets))
    picked = np.maximum(probs[rows, targets], PROB_FLOOR)
    grad[rows, targets] = -1.0 / (picked * len(targets))
    return grad[0] if squeeze else grad


def predict(model: SequenceModel, inputs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Chunked forward pass without caching."""
    parts = []
    for start in range(0, len(inputs), chunk):
        pred, _ = forward(model, inputs[start : start + chunk])
        parts.append(pred)
    if not parts:
        return np.zeros((0, model.params.output_size))
    return np.concatenate(parts, axis=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=1000, ge=1)
    learning_rate: float = Field(default=0.01, gt=0.0)
    patience: int = Field(default=5, ge=0)
    loss: Literal["mse", "cross_entropy"] = "mse"
    random_seed: int = 0


@dataclass(frozen=True, slots=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: Optional[float]


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    stopped_early: bool = False


def _batch_loss_and_grads(model, loss_kind, xb, yb):
    pred, cache = forward(model, xb, return_cache=True)
    if loss_kind == "mse":
        loss = loss_mse(pred, yb)
        d_pred = mse_gradient(pred, yb)
    else:
        loss = loss_cross_entropy(pred, yb)
        d_pred = cross_entropy_gradient(pred, yb)
    return loss, backward(model, cache, d_pred)


def evaluate_loss(model: SequenceModel, inputs, targets, loss_kind: str, chunk: int = 2048) -> float:
    """Loss over a whole set, weighted so chunking cannot change the value."""
    if len(inputs) == 0:
        raise ValueError("cannot evaluate loss on an empty set")
    total = 0.0
    for start in range(0, len(inputs), chunk):
        xb = inputs[start : start + chunk]
        pred, _ = forward(model, xb)
        if loss_kind == "mse":
            part = loss_mse(pred, targets[start : start + chunk])
        else:
            part = loss_cross_entropy(pred, targets[start : start + chunk])
        total += part * len(xb)
    return total / len(inputs)


def train(
    model: SequenceModel,
    train_inputs: np.ndarray,
    train_targets: np.ndarray,
    val_inputs: Optional[np.ndarray],
    val_targets: Optional[np.ndarray],
    config: TrainConfig,
) -> TrainResult:
    """Adam + full BPTT, mutating `model` in place.

    Early stopping watches validation loss: after max(1, patience)
    consecutive epochs without improvement, training stops and the
    best-validation parameters are restored. With no validation set the
    loop always runs all epochs and keeps the final parameters.
    """
    if model.params.mode == "classification" and config.loss != "cross_entropy":
        raise ValueError("classification models train with cross_entropy loss")
    if model.params.mode == "regression" and config.loss != "mse":
        raise ValueError("regression models train with mse loss")
    if len(train_inputs) == 0:
        raise ValueError("empty training set")
    has_val = val_inputs is not None and len(val_inputs) > 0

    rng = np.random.default_rng([int(config.random_seed), 1])
    names = [n for n, _ in model.named_parameters()]
    adam_m = {n: np.zeros_like(a) for n, a in model.named_parameters()}
    adam_v = {n: np.zeros_like(a) for n, a in model.named_parameters()}
    step = 0

    result = TrainResult()
    best_params: Optional[dict[str, np.ndarray]] = None
    bad_epochs = 0
    stop_after = max(1, config.patience)

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_inputs))
        epoch_loss = 0.0
        for batch_no, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start : start + config.batch_size]
            loss, grads = _batch_loss_and_grads(
                model, config.loss, train_inputs[idx], train_targets[idx]
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, batch_no, loss)
            epoch_loss += loss * len(idx)
            step += 1
            bias1 = 1.0 - ADAM_BETA1**step
            bias2 = 1.0 - ADAM_BETA2**step
            for name, param in model.named_parameters():
                g = grads[name]
                if not np.all(np.isfinite(g)):
                    raise TrainingDiverged(epoch, batch_no, float("nan"))
                m = adam_m[name]
                v = adam_v[name]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                param -= config.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)

        train_loss = epoch_loss / len(train_inputs)
        val_loss = (
            evaluate_loss(model, val_inputs, val_targets, config.loss) if has_val else None
        )
        result.history.append(EpochStats(epoch, train_loss, val_loss))

        if has_val:
            if result.best_val_loss is None or val_loss < result.best_val_loss:
                result.best_val_loss = val_loss
                result.best_epoch = epoch
                best_params = {n: a.copy() for n, a in model.named_parameters()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= stop_after:
                    result.stopped_early = True
                    break

    if best_params is not None:
        for name in names:
            model.set_parameter(name, best_params[name])
    if result.best_epoch is None:
        result.best_epoch = result.history[-1].epoch if result.history else None
    return result


def history_csv(result: TrainResult) -> str:
    lines = ["epoch,train_loss,val_loss"]
    for row in result.history:
        val = "" if row.val_loss is None else repr(row.val_loss)
        lines.append(f"{row.epoch},{row.train_loss!r},{val}")
    return "\n".join(lines) + "\n"


def save_checkpoint(model: SequenceModel, path: str) -> None:
    arrays = {}
    for name, arr in model.named_parameters():
        arrays[name] = {
            "shape": list(arr.shape),
            "dtype": "<f8",
            "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode(),
        }
    doc = {
        "version": CHECKPOINT_VERSION,
        "model": model.params.model_dump(),
        "arrays": arrays,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str) -> SequenceModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"invalid checkpoint JSON: {e}") from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        params = ModelParams(**doc["model"])
        raw = doc["arrays"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None

    shell = SequenceModel.initialize(params, seed=0)
    expected = dict(shell.named_parameters())
    if set(raw) != set(expected):
        missing = set(expected) - set(raw)
        extra = set(raw) - set(expected)
        raise CheckpointError(f"array set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, meta in raw.items():
        if meta.get("dtype") != "<f8":
            raise CheckpointError(f"{name}: unsupported dtype {meta.get('dtype')!r}")
        shape = tuple(meta["shape"])
        if shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {shape} does not match {expected[name].shape}")
        data = base64.b64decode(meta["data"])
        if len(data) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: payload length mismatch")
        shell.set_parameter(name, np.frombuffer(data, dtype="<f8").reshape(shape))
    return shell
