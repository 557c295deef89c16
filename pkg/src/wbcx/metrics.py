"""Evaluation metrics: classification (accuracy, macro precision, macro F1,
confusion), box Jaccard, instance Dice, per-attribute accuracy, N:C MSE
(overall and classwise), and one-vs-rest ROC/AUC per explanation value.

The Dice coefficient here is unsmoothed (perfect masks score exactly 1),
unlike the smoothed dice loss used for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ATTRIBUTE_ENUMS,
    ATTRIBUTE_NAMES,
    BoundingBox,
    CellClass,
    MaskPair,
    REAL_CLASSES,
    box_iou,
)
from .errors import EmptyInput, SingleClassLabels

N_REAL = len(REAL_CLASSES)


def classification_metrics(pred_classes: Sequence[CellClass],
                           true_classes: Sequence[CellClass]):
    """Macro averaging runs over classes present in the ground truth; a class
    with zero predicted positives contributes precision 0."""
    if len(pred_classes) == 0 or len(pred_classes) != len(true_classes):
        raise EmptyInput("need equal-length, nonempty prediction/truth lists")
    confusion = np.zeros((N_REAL, N_REAL), dtype=np.int64)
    for p, t in zip(pred_classes, true_classes):
        confusion[t.value, p.value] += 1
    accuracy = float(np.trace(confusion)) / len(true_classes)
    precisions, f1s = [], []
    for c in range(N_REAL):
        support = confusion[c].sum()
        if support == 0:
            continue
        tp = confusion[c, c]
        predicted = confusion[:, c].sum()
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        precisions.append(precision)
        f1s.append(f1)
    return accuracy, float(np.mean(precisions)), float(np.mean(f1s)), confusion


def mean_box_jaccard(pred_boxes: Sequence[BoundingBox],
                     gt_boxes: Sequence[BoundingBox]) -> float:
    if len(pred_boxes) == 0 or len(pred_boxes) != len(gt_boxes):
        raise EmptyInput("need equal-length, nonempty box lists")
    return float(np.mean([box_iou(p, g) for p, g in zip(pred_boxes, gt_boxes)]))


def _dice(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = int((pred.astype(bool) & gt.astype(bool)).sum())
    denom = int(pred.sum()) + int(gt.sum())
    return 2.0 * inter / denom if denom > 0 else 1.0


def mean_instance_dice(pred_masks: Sequence[MaskPair],
                       gt_masks: Sequence[MaskPair]) -> float:
    """Per instance: Dice averaged over the cytoplasm and nucleus channels;
    then averaged over instances."""
    if len(pred_masks) == 0 or len(pred_masks) != len(gt_masks):
        raise EmptyInput("need equal-length, nonempty mask lists")
    scores = []
    for p, g in zip(pred_masks, gt_masks):
        scores.append(0.5 * (_dice(p.cytoplasm, g.cytoplasm) + _dice(p.nucleus, g.nucleus)))
    return float(np.mean(scores))


def nc_mse(pred_ratios: Sequence[float], gt_ratios: Sequence[float]) -> float:
    if len(pred_ratios) == 0 or len(pred_ratios) != len(gt_ratios):
        raise EmptyInput("need equal-length, nonempty ratio lists")
    p = np.asarray(pred_ratios, dtype=np.float64)
    g = np.asarray(gt_ratios, dtype=np.float64)
    if not (np.isfinite(p).all() and np.isfinite(g).all()):
        raise ValueError("ratios must be finite")
    return float(np.mean((p - g) ** 2))


def classwise_nc_mse(pred_ratios: Sequence[float], gt_ratios: Sequence[float],
                     classes: Sequence[CellClass]) -> Dict[CellClass, float]:
    if len(pred_ratios) == 0:
        raise EmptyInput("no samples")
    out: Dict[CellClass, float] = {}
    for c in REAL_CLASSES:
        idx = [i for i, cls in enumerate(classes) if cls is c]
        if idx:
            out[c] = nc_mse([pred_ratios[i] for i in idx], [gt_ratios[i] for i in idx])
    return out


def attribute_accuracy(pred_attrs, gt_attrs) -> Tuple[float, float, float, float]:
    """pred_attrs/gt_attrs: sequences of 4-index tuples."""
    if len(pred_attrs) == 0 or len(pred_attrs) != len(gt_attrs):
        raise EmptyInput("need equal-length, nonempty attribute lists")
    acc = []
    for k in range(4):
        acc.append(float(np.mean([p[k] == g[k] for p, g in zip(pred_attrs, gt_attrs)])))
    return tuple(acc)


def roc_auc(scores: Sequence[float], labels: Sequence[int]):
    """ROC curve (FPR, TPR points over all distinct thresholds, ties crossing
    simultaneously) and trapezoidal AUC. Equals the pairwise rank statistic
    with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.size == 0 or scores.shape != labels.shape:
        raise EmptyInput("need equal-length, nonempty scores and labels")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassLabels("both labels must be present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # keep only the last point of each tied-score run
    distinct = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[distinct] / n_pos]
    fpr = np.r_[0.0, fp[distinct] / n_neg]
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def attribute_auc_table(attr_scores, gt_attr_indices, split: str = "all"):
    """One-vs-rest AUC per (attribute, value). attr_scores: four (n, k) score
    arrays (post-softmax or logits, monotone either way). Entries whose value
    never occurs (or always occurs) in the ground truth are None."""
    table = {}
    for k, (name, enum_cls) in enumerate(zip(ATTRIBUTE_NAMES, ATTRIBUTE_ENUMS)):
        scores_k = np.asarray(attr_scores[k], dtype=np.float64)
        gt_k = np.asarray([g[k] for g in gt_attr_indices], dtype=np.int64)
        for value in enum_cls:
            labels = (gt_k == value.value).astype(np.int64)
            try:
                _, auc = roc_auc(scores_k[:, value.value], labels)
            except SingleClassLabels:
                auc = None
            table[(name, value.name.lower(), split)] = auc
    return table


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_f1: float
    mean_jaccard: float
    mean_dice: float
    attribute_accuracy: Tuple[float, float, float, float]
    nc_mse: float
    nc_mse_normalized: Optional[float]  # raw MSE / Var(ground-truth ratios)
    classwise_nc_mse: Dict[CellClass, float]
    auc_table: Dict[Tuple[str, str, str], Optional[float]]
    confusion: np.ndarray

    def to_record(self) -> Dict[str, str]:
        rec = {
            "accuracy": repr(self.accuracy),
            "macro_precision": repr(self.macro_precision),
            "macro_f1": repr(self.macro_f1),
            "mean_jaccard": repr(self.mean_jaccard),
            "mean_dice": repr(self.mean_dice),
            "nc_mse": repr(self.nc_mse),
            "nc_mse_normalized": "undefined" if self.nc_mse_normalized is None
                                 else repr(self.nc_mse_normalized),
        }
        for name, value in zip(ATTRIBUTE_NAMES, self.attribute_accuracy):
            rec[f"attribute_accuracy.{name}"] = repr(value)
        for c in REAL_CLASSES:
            key = f"classwise_nc_mse.{c.name.lower()}"
            rec[key] = repr(self.classwise_nc_mse[c]) if c in self.classwise_nc_mse else "undefined"
        for (attr, value, split), auc in sorted(self.auc_table.items()):
            rec[f"auc.{attr}.{value}.{split}"] = "undefined" if auc is None else repr(auc)
        for t in range(N_REAL):
            rec[f"confusion.{REAL_CLASSES[t].name.lower()}"] = \
                " ".join(str(int(v)) for v in self.confusion[t])
        return rec

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for key, value in self.to_record().items():
                fh.write(f"{key} = {value}\n")


def load_report(path) -> Dict[str, str]:
    """Parse a flat report record back into a key -> raw-string mapping."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            out[key] = value
    return out


def save_roc_plots(attr_scores, gt_attr_indices, out_dir) -> List[str]:
    """One ROC plot image per attribute value; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, (name, enum_cls) in enumerate(zip(ATTRIBUTE_NAMES, ATTRIBUTE_ENUMS)):
        scores_k = np.asarray(attr_scores[k], dtype=np.float64)
        gt_k = np.asarray([g[k] for g in gt_attr_indices], dtype=np.int64)
        for value in enum_cls:
            labels = (gt_k == value.value).astype(np.int64)
            fig, ax = plt.subplots(figsize=(4, 4))
            try:
                curve, auc = roc_auc(scores_k[:, value.value], labels)
                xs, ys = zip(*curve)
                ax.plot(xs, ys, label=f"AUC = {auc:.3f}")
                ax.legend()
            except SingleClassLabels:
                ax.text(0.5, 0.5, "undefined\n(single-class labels)",
                        ha="center", va="center")
            ax.plot([0, 1], [0, 1], "k--", linewidth=0.5)
            ax.set_xlabel("False positive rate")
            ax.set_ylabel("True positive rate")
            ax.set_title(f"{name}: {value.name.lower()}")
            path = out_dir / f"roc_{name}_{value.name.lower()}.png"
            fig.savefig(path, dpi=100, bbox_inches="tight")
            plt.close(fig)
            written.append(str(path))
    return written


def save_classwise_mse_plot(classwise: Dict[CellClass, float], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [c.name.lower() for c in REAL_CLASSES]
    values = [classwise.get(c, 0.0) for c in REAL_CLASSES]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, values)
    ax.set_ylabel("N:C mean squared error")
    ax.tick_params(axis="x", rotation=60)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
