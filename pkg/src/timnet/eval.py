"""UAR/WAR metrics, fold plans, cross-validation protocols and cross-corpus evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import RngStream
from .model import ModelConfig, TimNetParams, embed, forward
from .train import Dataset, TrainConfig, train

log = logging.getLogger(__name__)

PROTOCOLS = ("last", "best")
PROTOCOL_TAGS = {"last": "*", "best": "**"}


def confusion(preds, labels, K: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise ValueError(f"{name} outside [0, {K})")
    M = np.zeros((K, K), dtype=np.int64)
    np.add.at(M, (labels, preds), 1)
    return M


def per_class_recall(M) -> np.ndarray:
    """Recall of each class with at least one item; absent classes are dropped."""
    M = np.asarray(M)
    rows = M.sum(axis=1)
    present = rows > 0
    return np.diag(M)[present] / rows[present]


def uar_war(M) -> tuple[float, float]:
    M = np.asarray(M)
    total = M.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    return float(per_class_recall(M).mean()), float(np.trace(M) / total)


# ---------------------------------------------------------------------------
# fold plans


@dataclass
class FoldPlan:
    folds: list
    protocol: str = "best"
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_indices(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))


def kfold_split(n_items: int, k: int, seed: int = 0, protocol: str = "best", groups=None) -> FoldPlan:
    """Shuffled partition into k folds whose sizes differ by at most one.

    With ``groups`` (e.g. speaker ids) whole groups are assigned to folds,
    largest first to the currently smallest fold, so no group straddles two
    folds; sizes are then only approximately balanced.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n_items:
        raise ValueError(f"cannot split {n_items} items into {k} folds")
    gen = RngStream(seed).split("folds").generator()
    if groups is None:
        perm = gen.permutation(n_items)
        return FoldPlan([np.sort(part) for part in np.array_split(perm, k)], protocol, seed)

    groups = np.asarray(groups)
    names = np.unique(groups)
    if len(names) < k:
        raise ValueError(f"{len(names)} groups cannot fill {k} folds")
    names = names[gen.permutation(len(names))]
    sizes = {g: int((groups == g).sum()) for g in names}
    ordered = sorted(names, key=lambda g: -sizes[g])
    folds = [[] for _ in range(k)]
    for g in ordered:
        target = min(range(k), key=lambda i: len(folds[i]))
        folds[target].extend(np.flatnonzero(groups == g).tolist())
    return FoldPlan([np.sort(np.array(f, dtype=np.int64)) for f in folds], protocol, seed)


# ---------------------------------------------------------------------------
# reports


@dataclass
class FoldResult:
    fold: int
    confusion: np.ndarray
    uar: float
    war: float
    epoch: int


@dataclass
class EvalReport:
    folds: list
    protocol: str
    labels: list
    warnings: list = field(default_factory=list)

    @property
    def uar(self) -> float:
        return float(np.mean([f.uar for f in self.folds]))

    @property
    def war(self) -> float:
        return float(np.mean([f.war for f in self.folds]))

    @property
    def total_confusion(self) -> np.ndarray:
        return sum(f.confusion for f in self.folds)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "protocol", "epoch", "n_items", "uar", "war"])
            for f in self.folds:
                w.writerow([f.fold, PROTOCOL_TAGS.get(self.protocol, self.protocol), f.epoch,
                            int(f.confusion.sum()), repr(f.uar), repr(f.war)])
            w.writerow(["mean", PROTOCOL_TAGS.get(self.protocol, self.protocol), "",
                        int(self.total_confusion.sum()), repr(self.uar), repr(self.war)])


def _fold_result(i, params, cfg, data: Dataset, epoch, K=None) -> FoldResult:
    preds = predict(params, cfg, data.features)
    M = confusion(preds, data.labels, K or cfg.n_classes)
    uar, war = uar_war(M)
    return FoldResult(i, M, uar, war, epoch)


def predict(params: TimNetParams, cfg: ModelConfig, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(features[s:s + batch_size], params, cfg).probs.value.argmax(axis=1)
           for s in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def run_cv_protocols(data: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, plan: FoldPlan,
                     protocols=PROTOCOLS, on_fold=None) -> dict[str, EvalReport]:
    """Cross-validate once and score every requested protocol from the same runs.

    Each fold trains on the other k-1 folds with a stream split from the
    master seed by fold index. ``last`` scores the final-epoch weights;
    ``best`` scores the epoch with the highest held-out WAR.
    """
    master = RngStream(train_cfg.seed)
    reports = {p: EvalReport([], p, list(data.vocab)) for p in protocols}
    for i, held_out in enumerate(plan.folds):
        if len(held_out) == 0:
            raise ValueError(f"fold {i} is empty")
        tr, te = data.subset(plan.train_indices(i)), data.subset(held_out)
        missing = sorted(set(range(len(data.vocab))) - set(tr.labels.tolist()))
        if missing:
            msg = f"fold {i}: classes {[data.vocab[c] for c in missing]} absent from training"
            log.warning(msg)
            for r in reports.values():
                r.warnings.append(msg)
        result = train(tr, model_cfg, train_cfg, eval_data=te, rng=master.split(i))
        if "last" in reports:
            reports["last"].folds.append(_fold_result(i, result.params, model_cfg, te, train_cfg.epochs))
        if "best" in reports:
            best = result.best_params if result.best_params is not None else result.params
            reports["best"].folds.append(_fold_result(i, best, model_cfg, te, result.best_epoch or train_cfg.epochs))
        if on_fold is not None:
            on_fold(i, {p: r.folds[-1] for p, r in reports.items()}, result)
    return reports


def run_cv(data: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, plan: FoldPlan) -> EvalReport:
    return run_cv_protocols(data, model_cfg, train_cfg, plan, protocols=(plan.protocol,))[plan.protocol]


# ---------------------------------------------------------------------------
# cross-corpus


def shared_classes(source_labels, target_vocab) -> list:
    return sorted(set(source_labels) & set(target_vocab))


def cross_eval(params: TimNetParams, cfg: ModelConfig, target: Dataset) -> EvalReport:
    """Score a trained model on another corpus without adapting to it.

    Classes are matched by label string. Items whose label the model never
    saw are dropped, and predictions are restricted to the shared classes.
    """
    shared = shared_classes(params.labels, target.vocab)
    if not shared:
        raise ValueError("checkpoint and target dataset share no classes")
    src_idx = np.array([params.labels.index(c) for c in shared])
    tgt_map = {target.vocab.index(c): j for j, c in enumerate(shared)}
    keep = np.array([lab in tgt_map for lab in target.labels.tolist()], dtype=bool)
    feats = target.features[keep]
    labels = np.array([tgt_map[lab] for lab in target.labels[keep].tolist()], dtype=np.int64)
    report = EvalReport([], "cross", shared)
    if len(labels) == 0:
        raise ValueError("no target items carry a shared class")
    probs = np.concatenate([forward(feats[s:s + 256], params, cfg).probs.value
                            for s in range(0, len(feats), 256)])
    preds = probs[:, src_idx].argmax(axis=1)
    M = confusion(preds, labels, len(shared))
    uar, war = uar_war(M)
    report.folds.append(FoldResult(0, M, uar, war, 0))
    dropped = int((~keep).sum())
    if dropped:
        report.warnings.append(f"{dropped} target items dropped (class not in checkpoint)")
    return report


def export_embeddings(params: TimNetParams, cfg: ModelConfig, data: Dataset, path) -> np.ndarray:
    """Write one fused feature vector per utterance as ``utterance_id,c0,...``."""
    g = embed(params, cfg, data.features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id"] + [f"c{i}" for i in range(g.shape[1])])
        for uid, row in zip(data.ids, g):
            w.writerow([uid] + [repr(float(v)) for v in row])
    return g
