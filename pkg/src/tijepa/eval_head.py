"""Linear sentiment head on frozen fused representations, plus metrics.

The backbone (encoders + online fusion module) runs gradient-free; only the
single linear layer trains. Because the backbone never moves, pooled features
are computed once per example and reused across epochs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import fuse
from .dataprep import LABELS, LABEL_TO_INDEX
from .errors import DataError, ShapeError
from .numerics import (
    Tensor,
    add,
    backward,
    cross_entropy_logits,
    matmul,
    mean_rows,
    no_grad,
    reshape,
    scale,
    zero_grads,
)
from .trainer import AdamWState, PretrainState, adamw_step, read_tensor_file, write_tensor_file
from .encoders import tokenize_text

logger = logging.getLogger(__name__)

_STREAM_HEAD = 6


class ClassifierHead:
    """One linear layer from pooled fused features to three class logits."""

    def __init__(self, feature_dim: int, rng: np.random.Generator | None = None):
        self.feature_dim = feature_dim
        if rng is None:
            weight = np.zeros((feature_dim, len(LABELS)))
        else:
            weight = rng.normal(0.0, 0.02, (feature_dim, len(LABELS)))
        self.weight = Tensor(weight, requires_grad=True, dtype=np.float32)
        self.bias = Tensor(np.zeros(len(LABELS)), requires_grad=True, dtype=np.float32)

    def logits(self, pooled: Tensor) -> Tensor:
        row = reshape(pooled, (1, self.feature_dim))
        return reshape(add(matmul(row, self.weight), self.bias), (len(LABELS),))

    def named_parameters(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def pooled_representation(state: PretrainState, image: np.ndarray, caption,
                          use_target_fusion: bool = False) -> np.ndarray:
    """Mean over fused patch tokens of the full image, gradient-free.

    Classification rides the trained online fusion module by default; pass
    ``use_target_fusion`` to pool the EMA twin's output instead.
    """
    module = state.target_fusion if use_target_fusion else state.fusion
    with no_grad():
        ids = tokenize_text(caption, state.text_encoder.cfg.max_text_len)
        text_reps = state.text_encoder.encode(ids)
        image_reps = state.image_encoder.encode(image)
        fused = fuse(module, image_reps, text_reps)
        return mean_rows(fused).data.copy()


def pool_and_classify(image: np.ndarray, caption, state: PretrainState,
                      head: ClassifierHead) -> Tensor:
    pooled = Tensor(pooled_representation(state, image, caption))
    return head.logits(pooled)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    return cross_entropy_logits(logits, label)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneHistory:
    train_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)


def _pooled_features(state: PretrainState, examples) -> list[tuple[np.ndarray, int]]:
    features = []
    for example in examples:
        if example.label is None:
            raise DataError("fine-tuning requires labeled examples")
        pooled = pooled_representation(state, example.image, example.caption)
        features.append((pooled, LABEL_TO_INDEX[example.label]))
    return features


def _accuracy(head: ClassifierHead, features) -> float:
    if not features:
        return 0.0
    correct = 0
    with no_grad():
        for pooled, label in features:
            logits = head.logits(Tensor(pooled))
            correct += int(np.argmax(logits.data) == label)
    return correct / len(features)


def finetune(state: PretrainState, train_examples, val_examples=(), epochs: int = 40,
             lr: float = 0.001, batch_size: int = 16, seed: int = 0,
             head: ClassifierHead | None = None) -> tuple[ClassifierHead, FinetuneHistory]:
    """Train the head with Adam (no weight decay) on frozen backbone features."""
    if not train_examples:
        raise DataError("fine-tuning train split is empty")
    feature_dim = state.config.embed_dim
    if head is None:
        head = ClassifierHead(feature_dim, np.random.default_rng([seed, _STREAM_HEAD]))
    train_features = _pooled_features(state, train_examples)
    val_features = _pooled_features(state, val_examples) if val_examples else []

    params = head.named_parameters()
    opt = AdamWState.create(params)
    history = FinetuneHistory()
    n = len(train_features)
    batch_size = min(batch_size, n)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, _STREAM_HEAD, epoch + 1]).permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            zero_grads(params)
            terms = []
            for i in batch:
                pooled, label = train_features[int(i)]
                terms.append(cross_entropy(head.logits(Tensor(pooled)), label))
            total = terms[0]
            for term in terms[1:]:
                total = add(total, term)
            loss = scale(total, 1.0 / len(terms))
            epoch_losses.append(loss.item())
            backward(loss)
            adamw_step(params, opt, lr, weight_decay=0.0)
        history.train_losses.append(float(np.mean(epoch_losses)))
        if val_features:
            acc = _accuracy(head, val_features)
            history.val_accuracies.append(acc)
            logger.info("epoch %d: train_loss=%.4f val_acc=%.4f",
                        epoch + 1, history.train_losses[-1], acc)
        else:
            logger.info("epoch %d: train_loss=%.4f", epoch + 1, history.train_losses[-1])
    return head, history


def save_head(head: ClassifierHead, path) -> None:
    write_tensor_file(path, {"head.weight": head.weight.data, "head.bias": head.bias.data})


def load_head(path) -> ClassifierHead:
    tensors = read_tensor_file(path)
    if set(tensors) != {"head.weight", "head.bias"}:
        raise DataError(f"not a classifier head checkpoint: {path}")
    weight = tensors["head.weight"]
    if weight.ndim != 2 or weight.shape[1] != len(LABELS):
        raise DataError(f"head weight must be (dim, {len(LABELS)}), got {weight.shape}")
    head = ClassifierHead(weight.shape[0])
    head.weight.data[...] = weight
    head.bias.data[...] = tensors["head.bias"]
    return head


# ---------------------------------------------------------------------------
# metrics


class ConfusionMatrix:
    """3x3 counts, rows = true class, cols = predicted class."""

    def __init__(self, counts=None):
        if counts is None:
            self.counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
        else:
            arr = np.asarray(counts, dtype=np.int64)
            if arr.shape != (len(LABELS), len(LABELS)) or (arr < 0).any():
                raise ShapeError("confusion matrix must be 3x3 with non-negative counts")
            self.counts = arr.copy()

    def add(self, true_index: int, predicted_index: int) -> None:
        self.counts[true_index, predicted_index] += 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    macro_f1: float
    weighted_f1: float
    zero_division_hit: bool  # some class had a 0/0 precision/recall, reported as 0


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest precision/recall/F1 per class, accuracy, and F1 aggregates.

    0/0 ratios are defined as 0 and flagged in the report.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise DataError("cannot compute metrics over an empty confusion matrix")
    zero_hit = False
    per_class = []
    for c in range(len(LABELS)):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        if tp + fp == 0 or tp + fn == 0:
            zero_hit = True
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(ClassMetrics(precision, recall, f1, tp + fn))
    accuracy = float(np.trace(counts)) / total
    macro_f1 = float(np.mean([m.f1 for m in per_class]))
    weighted_f1 = float(sum(m.f1 * m.support for m in per_class)) / total
    return MetricsReport(tuple(per_class), accuracy, macro_f1, weighted_f1, zero_hit)


def evaluate(state: PretrainState, head: ClassifierHead, examples) -> ConfusionMatrix:
    cm = ConfusionMatrix()
    for example in examples:
        if example.label is None:
            raise DataError("evaluation requires labeled examples")
        logits = pool_and_classify(example.image, example.caption, state, head)
        cm.add(LABEL_TO_INDEX[example.label], int(np.argmax(logits.data)))
    return cm


def format_report(report: MetricsReport) -> str:
    lines = [
        "Accuracy (%)\tMacro-F1 (%)\tWeighted-F1 (%)",
        f"{report.accuracy * 100:.2f}\t{report.macro_f1 * 100:.2f}\t"
        f"{report.weighted_f1 * 100:.2f}",
        "",
        "class\tprecision\trecall\tf1\tsupport",
    ]
    for label, m in zip(LABELS, report.per_class):
        lines.append(f"{label}\t{m.precision:.4f}\t{m.recall:.4f}\t{m.f1:.4f}\t{m.support}")
    if report.zero_division_hit:
        lines.append("note: some 0/0 precision/recall values reported as 0")
    return "\n".join(lines)


def dump_report(report: MetricsReport) -> str:
    """Machine-readable key=value lines."""
    pairs = [
        ("accuracy", report.accuracy),
        ("macro_f1", report.macro_f1),
        ("weighted_f1", report.weighted_f1),
    ]
    for label, m in zip(LABELS, report.per_class):
        pairs.extend([(f"{label}.precision", m.precision), (f"{label}.recall", m.recall),
                      (f"{label}.f1", m.f1), (f"{label}.support", m.support)])
    return "\n".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                     for k, v in pairs)
