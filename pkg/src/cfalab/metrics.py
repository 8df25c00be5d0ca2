"""Balanced accuracy, macro one-vs-rest AUROC and expected calibration error."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, EmptyInputError, ParameterError


@dataclass(frozen=True)
class ReliabilityBin:
    index: int
    count: int
    accuracy: float
    confidence: float


@dataclass
class EvalReport:
    b_acc: float
    auroc_macro: float
    ece: float
    bins: list[ReliabilityBin] = field(default_factory=list)
    n_samples: int = 0
    split: str = ""

    CSV_FIELDS = ("split", "n_samples", "b_acc", "auroc_macro", "ece")

    def csv_row(self) -> dict[str, str]:
        return {
            "split": self.split,
            "n_samples": str(self.n_samples),
            "b_acc": f"{self.b_acc:.6f}",
            "auroc_macro": f"{self.auroc_macro:.6f}",
            "ece": f"{self.ece:.6f}",
        }

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()

    def reliability_table(self) -> str:
        m = len(self.bins)
        lines = [f"reliability ({m} bins, n={self.n_samples}, ECE={self.ece:.4f})", " bin   range            count    acc   conf"]
        for b in self.bins:
            lo, hi = b.index / m, (b.index + 1) / m
            if b.count:
                lines.append(f"{b.index + 1:4d}  ({lo:.3f}, {hi:.3f}]  {b.count:6d}  {b.accuracy:.3f}  {b.confidence:.3f}")
            else:
                lines.append(f"{b.index + 1:4d}  ({lo:.3f}, {hi:.3f}]  {0:6d}      -      -")
        return "\n".join(lines)


def argmax_predict(probs) -> np.ndarray:
    """Row-wise argmax; the lowest index wins ties."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] == 0:
        raise EmptyInputError("argmax_predict needs nonempty rows")
    return probs.argmax(axis=1)


def balanced_accuracy(preds, labels, n_classes: int | None = None) -> float:
    """Mean recall over the classes that actually occur in ``labels``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInputError("balanced accuracy of an empty set")
    if preds.shape != labels.shape:
        raise ParameterError("preds and labels differ in length")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    support = np.bincount(labels, minlength=n_classes)
    hits = np.bincount(labels[preds == labels], minlength=n_classes)
    recalls = [hits[c] / support[c] for c in range(n_classes) if support[c] > 0]
    return sum(recalls) / len(recalls)


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    # Mann-Whitney U from average ranks; ties contribute one half.
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auroc_per_class(probs, labels) -> dict[int, float]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = {}
    for c in range(probs.shape[1]):
        positive = labels == c
        if positive.any() and not positive.all():
            out[c] = _binary_auc(probs[:, c], positive)
    return out


def auroc_macro(probs, labels) -> float:
    """One-vs-rest AUROC averaged over classes with both positives and negatives."""
    per_class = auroc_per_class(probs, labels)
    if not per_class:
        raise DegenerateInputError("no class has both positive and negative samples")
    vals = [per_class[c] for c in sorted(per_class)]
    return sum(vals) / len(vals)


def ece(probs, labels, n_bins: int = 15) -> tuple[float, list[ReliabilityBin]]:
    """Expected calibration error over equal-width confidence bins.

    Bin ``m`` (0-based) covers ``(m/M, (m+1)/M]``; a confidence of exactly 0
    falls into the first bin.  Confidence is the max probability and the
    prediction its argmax.
    """
    if n_bins < 1:
        raise ParameterError("number of bins must be at least 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise EmptyInputError("ECE of an empty set")
    conf = probs.max(axis=1)
    correct = (argmax_predict(probs) == labels).astype(np.float64)
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    hit_sum = np.bincount(idx, weights=correct, minlength=n_bins)

    total = 0.0
    bins = []
    for m in range(n_bins):
        k = int(counts[m])
        if k == 0:
            bins.append(ReliabilityBin(m, 0, 0.0, 0.0))
            continue
        acc = hit_sum[m] / k
        cf = conf_sum[m] / k
        total += k / n * abs(acc - cf)
        bins.append(ReliabilityBin(m, k, float(acc), float(cf)))
    return float(total), bins


def evaluate_predictions(probs, labels, n_bins: int = 15, split: str = "") -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInputError("cannot evaluate an empty split")
    e, bins = ece(probs, labels, n_bins)
    try:
        auc = auroc_macro(probs, labels)
    except DegenerateInputError:
        auc = float("nan")
    return EvalReport(
        b_acc=float(balanced_accuracy(argmax_predict(probs), labels, probs.shape[1])),
        auroc_macro=float(auc),
        ece=e,
        bins=bins,
        n_samples=int(labels.size),
        split=split,
    )
