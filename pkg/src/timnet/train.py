"""Label-smoothed cross-entropy, Adam, and the epoch loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DiffValue, RngStream
from .model import ModelConfig, TimNetParams, apply_bn_updates, forward, init_timnet

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 500
    smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.smoothing < 1:
            raise ValueError(f"smoothing must be in [0, 1), got {self.smoothing}")


@dataclass
class Dataset:
    """Fixed-length features (N x T x F) with integer labels indexing ``vocab``."""

    features: np.ndarray
    labels: np.ndarray
    vocab: list
    ids: list = field(default_factory=list)
    speakers: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]
        if not self.speakers:
            self.speakers = [""] * len(self.labels)
        if self.features.ndim != 3 or len(self.features) != len(self.labels):
            raise ValueError(f"features {self.features.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.vocab)):
            raise ValueError(f"labels must lie in [0, {len(self.vocab)})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx], self.labels[idx], list(self.vocab),
            [self.ids[i] for i in idx], [self.speakers[i] for i in idx],
        )


def smoothed_targets(labels: np.ndarray, n_classes: int, factor: float) -> np.ndarray:
    q = np.full((len(labels), n_classes), factor / n_classes)
    q[np.arange(len(labels)), labels] += 1.0 - factor
    return q


def smoothed_cross_entropy(probs: DiffValue, labels, factor: float) -> DiffValue:
    """Mean over the batch of -sum_k q_k log p_k with label-smoothed targets q."""
    if not 0 <= factor < 1:
        raise ValueError(f"smoothing factor must be in [0, 1), got {factor}")
    probs = dc.as_value(probs)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = probs.shape
    if labels.shape != (B,):
        raise ValueError(f"{B} predictions but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels out of range for {K} classes")
    q = smoothed_targets(labels, K, factor)
    p = probs.value
    clamped = np.maximum(p, LOG_CLAMP)
    loss = -(q * np.log(clamped)).sum() / B

    def bw(g):
        return (np.where(p > LOG_CLAMP, -g * q / (B * clamped), 0.0),)

    return DiffValue.from_op(loss, (probs,), bw)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> dict:
    """One Adam update, in place on the arrays in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        params[name] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_war: float
    eval_loss: float | None = None
    eval_war: float | None = None
    eval_uar: float | None = None


HISTORY_COLUMNS = ("epoch", "train_loss", "train_war", "eval_loss", "eval_war", "eval_uar")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) for c in HISTORY_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {c: (None if row[c] == "" else float(row[c])) for c in HISTORY_COLUMNS[1:]}
                out.records.append(EpochRecord(int(row["epoch"]), **vals))
        return out


@dataclass
class TrainResult:
    params: TimNetParams
    history: TrainHistory
    best_params: TimNetParams | None = None
    best_epoch: int | None = None
    best_war: float | None = None


def make_batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    """Split ``order`` into batches; a trailing single item joins the previous batch."""
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def evaluate_split(params, cfg: ModelConfig, data: Dataset, smoothing: float, batch_size: int = 256):
    """Inference-mode loss, WAR and UAR on a dataset."""
    from .eval import confusion, uar_war

    probs = []
    for start in range(0, len(data), batch_size):
        probs.append(forward(data.features[start:start + batch_size], params, cfg).probs.value)
    probs = np.concatenate(probs)
    loss = float(smoothed_cross_entropy(DiffValue(probs), data.labels, smoothing).value)
    uar, war = uar_war(confusion(probs.argmax(axis=1), data.labels, cfg.n_classes))
    return loss, war, uar


def train(data: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, eval_data: Dataset | None = None,
          params: TimNetParams | None = None, rng: RngStream | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch (or from ``params``) for ``train_cfg.epochs`` epochs.

    With ``eval_data`` the checkpoint with the highest eval WAR is kept as
    ``best_params`` (earliest epoch wins ties). ``on_epoch(record)`` may
    return True to stop after that epoch.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if len(data) < 2:
        raise ValueError("batch normalization needs at least 2 training items")
    if len(data.vocab) != model_cfg.n_classes:
        raise ValueError(f"dataset has {len(data.vocab)} classes but the model expects {model_cfg.n_classes}")
    if data.features.shape[1:] != (model_cfg.input_T, model_cfg.n_features):
        raise ValueError(f"features are {data.features.shape[1:]}, model expects "
                         f"({model_cfg.input_T}, {model_cfg.n_features})")
    rng = rng or RngStream(train_cfg.seed)
    if params is None:
        params = init_timnet(model_cfg, rng.split("init"))
    params.labels = list(data.vocab)
    shuffle_rng, dropout_rng = rng.split("shuffle"), rng.split("dropout")
    trainable = params.trainable(model_cfg)
    values = {k: p.value for k, p in trainable.items()}
    state = AdamState()
    history = TrainHistory()
    result = TrainResult(params, history)

    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.generator().permutation(len(data)) if train_cfg.shuffle else np.arange(len(data))
        loss_sum, correct = 0.0, 0
        for idx in make_batches(len(data), train_cfg.batch_size, order):
            for p in trainable.values():
                p.zero_grad()
            trace = forward(data.features[idx], params, model_cfg, training=True, rng=dropout_rng.split(step))
            loss = smoothed_cross_entropy(trace.probs, data.labels[idx], train_cfg.smoothing)
            dc.backward(loss, trainable.values())
            adam_step(values, {k: p.grad for k, p in trainable.items()}, state, train_cfg)
            apply_bn_updates(params, trace.bn_updates)
            loss_sum += float(loss.value) * len(idx)
            correct += int((trace.probs.value.argmax(axis=1) == data.labels[idx]).sum())
            step += 1
        record = EpochRecord(epoch, loss_sum / len(data), correct / len(data))
        if eval_data is not None and len(eval_data):
            record.eval_loss, record.eval_war, record.eval_uar = evaluate_split(
                params, model_cfg, eval_data, train_cfg.smoothing)
            if result.best_war is None or record.eval_war > result.best_war:
                result.best_war, result.best_epoch = record.eval_war, epoch
                result.best_params = params.copy()
        history.records.append(record)
        log.debug("epoch %d loss %.4f war %.3f", epoch, record.train_loss, record.train_war)
        if on_epoch is not None and on_epoch(record):
            break
    return result
