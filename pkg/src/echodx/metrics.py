"""Confusion-matrix evaluation: per-class recall, precision, F1, accuracy.

Reported values are rounded half-even to two decimals; 0/0 cases report 0
and carry an explicit ``undefined`` flag. The TSV renderings are
byte-stable given the same counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_matrix(true_labels, pred_labels, num_classes: int) -> np.ndarray:
    """counts[i][j] = number of samples with true class i predicted as j."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"label vectors differ in length: {t.shape} vs {p.shape}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise ValueError(f"labels outside [0,{num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


def normalize_rows(counts) -> np.ndarray:
    """Row-stochastic matrix; all-zero rows stay zero."""
    c = np.asarray(counts, dtype=np.float64)
    sums = c.sum(axis=1, keepdims=True)
    out = np.divide(c, sums, out=np.zeros_like(c), where=sums > 0)
    return out


@dataclass
class ClassScores:
    recall: float
    precision: float
    f1: float
    undefined: tuple[str, ...]  # which of the three were 0/0 cases


def per_class_prf1(counts) -> list[ClassScores]:
    """Per-class recall, precision and F1; 0/0 cases become 0 and are flagged."""
    c = np.asarray(counts, dtype=np.float64)
    k = c.shape[0]
    out = []
    for i in range(k):
        row, col, diag = c[i].sum(), c[:, i].sum(), c[i, i]
        flags = []
        recall = precision = f1 = 0.0
        if row > 0:
            recall = diag / row
        else:
            flags.append("recall")
        if col > 0:
            precision = diag / col
        else:
            flags.append("precision")
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            flags.append("f1")
        out.append(ClassScores(recall, precision, f1, tuple(flags)))
    return out


def f1_score(recall: float, precision: float) -> float:
    if recall + precision == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def overall_accuracy(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(c) / total)


def round2(x: float) -> float:
    """Half-even rounding to two decimals, as used in the reports."""
    return float(np.round(x, 2))


def write_metrics_tsv(path, counts, class_names) -> None:
    scores = per_class_prf1(counts)
    lines = ["class\trecall\tprecision\tf1\tundefined"]
    for name, s in zip(class_names, scores):
        flags = ",".join(s.undefined) if s.undefined else "-"
        lines.append(
            f"{name}\t{round2(s.recall):.2f}\t{round2(s.precision):.2f}"
            f"\t{round2(s.f1):.2f}\t{flags}"
        )
    lines.append(f"accuracy\t{round2(overall_accuracy(counts)):.2f}\t\t\t-")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_confusion_tsv(path, counts, class_names) -> None:
    counts = np.asarray(counts)
    lines = ["true\\pred\t" + "\t".join(class_names)]
    for name, row in zip(class_names, counts):
        lines.append(name + "\t" + "\t".join(str(int(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
