"""Adam optimizer, learning-rate schedule, training loop, and k-fold harness.

Training treats every 3D volume as an independent sample: volumes from all
subjects are pooled and reshuffled each epoch. Evaluation reports both
volume-level metrics and subject-level metrics, where a subject's label is
the argmax of its mean per-volume probability vector (exact ties go to the
lowest class index and are counted).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import FoldPlan, SubjectRecord, plan_folds
from .errors import ConfigError, DataError, PlanError
from .layers import cross_entropy_logits

log = logging.getLogger("volformer.train")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    lr_drop_epoch: int = 8
    lr_drop_factor: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    class_weighting: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.lr_drop_epoch <= self.epochs:
            raise ConfigError(
                f"lr_drop_epoch {self.lr_drop_epoch} outside 1..{self.epochs}")
        if self.lr <= 0 or self.lr_drop_factor <= 0:
            raise ConfigError("lr and lr_drop_factor must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must sit in [0, 1), got "
                              f"{self.beta1}/{self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"train config must be an object, got {type(doc).__name__}")
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: base rate, divided by the drop factor from the drop epoch on."""
    if not 1 <= epoch <= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch < cfg.lr_drop_epoch:
        return cfg.lr
    return cfg.lr / cfg.lr_drop_factor


# ---------------------------------------------------------------------------
# optimizer


def adam_init(params: list[np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(p), np.zeros_like(p)) for p in params]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: list[tuple[np.ndarray, np.ndarray]], t: int,
              cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction.

    Raises ArithmeticError before touching any parameter or state if a
    gradient contains a non-finite value, so a skipped step leaves the
    optimizer untouched.
    """
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    if len(params) != len(grads) or len(params) != len(state):
        raise ConfigError("params, grads and state must have matching lengths")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ArithmeticError("non-finite gradient")
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p, g, (m, v) in zip(params, grads, state):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class Adam:
    """Stateful wrapper tying the functional update to a model's parameters."""

    def __init__(self, named_params: list[tuple[str, T.Tensor]], cfg: TrainConfig):
        self.cfg = cfg
        self.names = [n for n, _ in named_params]
        self.tensors = [p for _, p in named_params]
        self.state = adam_init([p.data for p in self.tensors])
        self.t = 0

    def step(self, lr: float) -> bool:
        """Apply one update; returns False (and changes nothing) on bad grads."""
        grads = []
        for name, p in zip(self.names, self.tensors):
            if p.grad is None:
                raise ConfigError(f"parameter {name} has no gradient")
            grads.append(p.grad)
        cfg = TrainConfig(**{**self.cfg.to_dict(), "lr": lr})
        try:
            adam_step([p.data for p in self.tensors], grads, self.state,
                      self.t + 1, cfg)
        except ArithmeticError:
            return False
        self.t += 1
        return True


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class _Item:
    subject_id: str
    label: int
    volume: np.ndarray
    smri: np.ndarray | None
    fc: np.ndarray | None
    pheno: np.ndarray | None


def _items(records: list[SubjectRecord]) -> list[_Item]:
    """Pool volumes in canonical per-subject order, so the item list (and any
    seeded shuffle of it) does not depend on manifest row order."""
    items = []
    for rec in sorted(records, key=lambda r: r.subject_id):
        pheno = None
        if rec.phenotype is not None:
            mask = rec.pheno_mask if rec.pheno_mask is not None else 1.0
            pheno = np.asarray(rec.phenotype, dtype=np.float32) * mask
        for sample in rec.fmri_volumes:
            items.append(_Item(rec.subject_id, rec.label, sample.volume,
                               rec.smri.volume if rec.smri is not None else None,
                               rec.fc_vector, pheno))
    return items


def _stack(items: list[_Item], dtype) -> tuple[T.Tensor, np.ndarray, dict]:
    volumes = T.Tensor(np.stack([it.volume[None] for it in items]).astype(dtype))
    labels = np.array([it.label for it in items], dtype=np.int64)
    extras: dict = {}
    for branch in ("smri", "fc", "pheno"):
        values = [getattr(it, branch) for it in items]
        have = [v is not None for v in values]
        if all(have):
            if branch == "smri":
                extras[branch] = T.Tensor(np.stack([v[None] for v in values]).astype(dtype))
            else:
                extras[branch] = T.Tensor(np.stack(values).astype(dtype))
        elif any(have):
            raise DataError(f"batch mixes subjects with and without {branch} data")
    return volumes, labels, extras


def _class_weights(items: list[_Item], class_count: int) -> np.ndarray:
    counts = np.bincount([it.label for it in items], minlength=class_count)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return weights


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    skipped_batches: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "train_acc"])
            for epoch, (l, a) in enumerate(zip(self.loss, self.train_accuracy), 1):
                writer.writerow([epoch, repr(l), repr(a)])


def train_fold(model, train_records: list[SubjectRecord], cfg: TrainConfig
               ) -> TrainHistory:
    """Train a model in place over pooled, per-epoch-shuffled volumes."""
    cfg.validate()
    items = _items(train_records)
    if not items:
        raise DataError("training set contains no volumes")
    dtype = model.params()[0][1].data.dtype
    class_count = model.cfg.class_count
    weights = _class_weights(items, class_count) if cfg.class_weighting else None
    opt = Adam(model.params(), cfg)
    rng = np.random.default_rng(cfg.seed if cfg.deterministic else None)
    history = TrainHistory()
    n = len(items)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        counted = 0
        for start in range(0, n, cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            volumes, labels, extras = _stack(batch, dtype)
            T.zero_grads([p for _, p in model.params()])
            logits = model.forward_logits(volumes, training=True, **extras)
            batch_w = weights[labels] if weights is not None else None
            loss = cross_entropy_logits(logits, labels, batch_w)
            T.backward(loss)
            if not opt.step(lr):
                history.skipped_batches += 1
                log.warning("skipped batch at epoch %d: non-finite gradient", epoch)
                continue
            loss_sum += float(loss.data) * len(batch)
            correct += int((np.argmax(logits.data, axis=-1) == labels).sum())
            counted += len(batch)
        history.loss.append(loss_sum / max(counted, 1))
        history.train_accuracy.append(correct / max(counted, 1))
        history.lr.append(lr)
    return history


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    volume_accuracy: float
    subject_accuracy: float
    precision: list[float]
    recall: list[float]
    confusion: np.ndarray
    volume_count: int
    subject_count: int
    excluded_subjects: list[str] = field(default_factory=list)
    tie_count: int = 0
    folds: list["MetricReport"] | None = None
    volume_accuracy_std: float = 0.0
    subject_accuracy_std: float = 0.0

    def to_dict(self) -> dict:
        out = {
            "volume_accuracy": self.volume_accuracy,
            "subject_accuracy": self.subject_accuracy,
            "precision": list(map(float, self.precision)),
            "recall": list(map(float, self.recall)),
            "confusion": np.asarray(self.confusion).astype(int).tolist(),
            "volume_count": self.volume_count,
            "subject_count": self.subject_count,
            "excluded_subjects": list(self.excluded_subjects),
            "tie_count": self.tie_count,
        }
        if self.folds is not None:
            out["folds"] = [f.to_dict() for f in self.folds]
            out["volume_accuracy_std"] = self.volume_accuracy_std
            out["subject_accuracy_std"] = self.subject_accuracy_std
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_fold_csv(self, path) -> None:
        if self.folds is None:
            raise ConfigError("per-fold CSV needs an aggregated report")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "volume_accuracy", "subject_accuracy",
                             "volume_count", "subject_count"])
            for i, f in enumerate(self.folds):
                writer.writerow([i, repr(f.volume_accuracy), repr(f.subject_accuracy),
                                 f.volume_count, f.subject_count])


def evaluate(model, test_records: list[SubjectRecord]) -> MetricReport:
    """Volume-level metrics plus subject-level mean-probability voting."""
    class_count = model.cfg.class_count
    dtype = model.params()[0][1].data.dtype
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    excluded: list[str] = []
    ties = 0
    subj_correct = 0
    subj_total = 0
    for rec in sorted(test_records, key=lambda r: r.subject_id):
        sub_items = _items([rec])
        if not sub_items:
            excluded.append(rec.subject_id)
            log.warning("subject %s has no volumes; excluded from evaluation",
                        rec.subject_id)
            continue
        volumes, labels, extras = _stack(sub_items, dtype)
        probs = model.forward_probs(volumes, **extras).data
        preds = np.argmax(probs, axis=-1)
        for y, p in zip(labels, preds):
            confusion[y, p] += 1
        mean_prob = probs.mean(axis=0)
        top = mean_prob.max()
        if int((mean_prob == top).sum()) > 1:
            ties += 1
            log.info("subject %s mean probabilities tie at %.6f; choosing the "
                     "lowest class index", rec.subject_id, top)
        subj_pred = int(np.argmax(mean_prob))
        subj_correct += subj_pred == rec.label
        subj_total += 1
    volume_total = int(confusion.sum())
    volume_acc = float(np.trace(confusion)) / volume_total if volume_total else 0.0
    row = confusion.sum(axis=1)
    col = confusion.sum(axis=0)
    recall = [float(confusion[c, c]) / row[c] if row[c] else 0.0
              for c in range(class_count)]
    precision = [float(confusion[c, c]) / col[c] if col[c] else 0.0
                 for c in range(class_count)]
    return MetricReport(
        volume_accuracy=volume_acc,
        subject_accuracy=subj_correct / subj_total if subj_total else 0.0,
        precision=precision, recall=recall, confusion=confusion,
        volume_count=volume_total, subject_count=subj_total,
        excluded_subjects=excluded, tie_count=ties)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    model: object
    history: TrainHistory
    report: MetricReport


def cross_validate(records: list[SubjectRecord], model_factory, cfg: TrainConfig,
                   k: int = 5, plan: FoldPlan | None = None
                   ) -> tuple[MetricReport, list[FoldResult]]:
    """Train one fresh model per fold; aggregate with population-std spread.

    ``model_factory(fold_index)`` must return a newly initialized model.
    """
    cfg.validate()
    if plan is None:
        plan = plan_folds(records, k=k, seed=cfg.seed)
    results: list[FoldResult] = []
    for fold in range(plan.fold_count):
        train_recs, test_recs = plan.split(records, fold)
        overlap = ({r.subject_id for r in train_recs}
                   & {r.subject_id for r in test_recs})
        if overlap:
            raise PlanError(f"subjects leak between train and test: {sorted(overlap)}")
        model = model_factory(fold)
        history = train_fold(model, train_recs, cfg)
        report = evaluate(model, test_recs)
        results.append(FoldResult(fold, model, history, report))
        log.info("fold %d: volume acc %.4f, subject acc %.4f", fold,
                 report.volume_accuracy, report.subject_accuracy)
    return aggregate_reports([r.report for r in results]), results


def aggregate_reports(fold_reports: list[MetricReport]) -> MetricReport:
    """Pool per-fold reports: mean/std accuracies, summed confusion."""
    if not fold_reports:
        raise ConfigError("cannot aggregate zero fold reports")
    vol = np.array([r.volume_accuracy for r in fold_reports])
    sub = np.array([r.subject_accuracy for r in fold_reports])
    confusion = np.sum([r.confusion for r in fold_reports], axis=0)
    row = confusion.sum(axis=1)
    col = confusion.sum(axis=0)
    n = confusion.shape[0]
    return MetricReport(
        volume_accuracy=float(vol.mean()),
        subject_accuracy=float(sub.mean()),
        precision=[float(confusion[c, c]) / col[c] if col[c] else 0.0 for c in range(n)],
        recall=[float(confusion[c, c]) / row[c] if row[c] else 0.0 for c in range(n)],
        confusion=confusion,
        volume_count=int(sum(r.volume_count for r in fold_reports)),
        subject_count=int(sum(r.subject_count for r in fold_reports)),
        excluded_subjects=[s for r in fold_reports for s in r.excluded_subjects],
        tie_count=int(sum(r.tie_count for r in fold_reports)),
        folds=fold_reports,
        volume_accuracy_std=float(vol.std()),
        subject_accuracy_std=float(sub.std()))
