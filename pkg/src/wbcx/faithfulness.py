"""Faithfulness of the predicted explanations.

The model-induced association (predicted attribute values conditioned on the
predicted class) is compared against the ground-truth association (true
attribute values conditioned on the true class) cell by cell using total
variation distance. Dissimilar associations mean the explanations cannot be
trusted to track what the classifier actually did. The correct-vs-misclassified
AUC analysis checks that explanation quality holds up even when the class
prediction is wrong.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ATTRIBUTE_CARDINALITIES,
    ATTRIBUTE_ENUMS,
    ATTRIBUTE_NAMES,
    CellClass,
    REAL_CLASSES,
)
from .errors import EmptyInput, VocabularyMismatch
from .metrics import attribute_auc_table

DEFAULT_TV_THRESHOLD = 0.15


@dataclass
class AssociationTable:
    """Per (cell class, attribute): an empirical probability vector over the
    attribute's values. Classes with zero support are absent, never zero-filled."""

    rows: Dict[CellClass, Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]

    @property
    def classes(self) -> List[CellClass]:
        return sorted(self.rows, key=lambda c: c.value)


def _tabulate(classes: Sequence[CellClass], attrs: Sequence[Tuple[int, int, int, int]]
              ) -> AssociationTable:
    if len(classes) == 0:
        raise EmptyInput("no samples to tabulate")
    rows = {}
    for c in REAL_CLASSES:
        idx = [i for i, cls in enumerate(classes) if cls is c]
        if not idx:
            continue
        vectors = []
        for k, card in enumerate(ATTRIBUTE_CARDINALITIES):
            counts = np.bincount([attrs[i][k] for i in idx], minlength=card).astype(np.float64)
            vectors.append(counts / counts.sum())
        rows[c] = tuple(vectors)
    return AssociationTable(rows=rows)


def ground_truth_association(dataset) -> AssociationTable:
    """Empirical Pr(true explanation | true class) over a labeled dataset."""
    classes, attrs = [], []
    for item in dataset:
        for ann in item.annotations:
            classes.append(ann.cell_class)
            attrs.append(ann.attributes.as_indices())
    return _tabulate(classes, attrs)


def model_association(pred_classes: Sequence[CellClass],
                      pred_attrs: Sequence[Tuple[int, int, int, int]]) -> AssociationTable:
    """Empirical Pr(predicted explanation | predicted class)."""
    if len(pred_classes) != len(pred_attrs):
        raise EmptyInput("prediction lists must pair up")
    return _tabulate(list(pred_classes), list(pred_attrs))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise VocabularyMismatch(f"vector lengths {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class FaithfulnessReport:
    divergence: Dict[Tuple[CellClass, str], float]  # (class, attribute) -> TV
    threshold: float
    faithful: bool
    absent_classes: List[CellClass]

    def worst(self) -> float:
        return max(self.divergence.values()) if self.divergence else 0.0


def compare_associations(model_table: AssociationTable,
                         gt_table: AssociationTable,
                         threshold: float = DEFAULT_TV_THRESHOLD) -> FaithfulnessReport:
    """TV distance per populated (class, attribute) cell; faithful iff every
    populated cell stays within the threshold. Classes present in only one
    table are excluded and listed."""
    shared = [c for c in gt_table.classes if c in model_table.rows]
    absent = [c for c in set(gt_table.classes) ^ set(model_table.classes)]
    divergence = {}
    for c in shared:
        for k, name in enumerate(ATTRIBUTE_NAMES):
            divergence[(c, name)] = total_variation(model_table.rows[c][k],
                                                    gt_table.rows[c][k])
    faithful = all(tv <= threshold for tv in divergence.values())
    return FaithfulnessReport(divergence=divergence, threshold=threshold,
                              faithful=faithful,
                              absent_classes=sorted(absent, key=lambda c: c.value))


def independence_analysis(pred_classes: Sequence[CellClass],
                          attr_scores,
                          gt_classes: Sequence[CellClass],
                          gt_attrs: Sequence[Tuple[int, int, int, int]]
                          ) -> Dict[Tuple[str, str, str], Optional[float]]:
    """One-vs-rest AUC per explanation value, computed separately on the
    correctly and incorrectly classified samples. Entries that cannot be
    computed on a split (empty split or single-class labels) are None."""
    n = len(gt_classes)
    correct = [i for i in range(n) if pred_classes[i] is gt_classes[i]]
    wrong = [i for i in range(n) if pred_classes[i] is not gt_classes[i]]
    table: Dict[Tuple[str, str, str], Optional[float]] = {}
    for split, idx in (("correct", correct), ("misclassified", wrong)):
        if idx:
            sub_scores = [np.asarray(attr_scores[k])[idx] for k in range(4)]
            sub_gt = [gt_attrs[i] for i in idx]
            table.update(attribute_auc_table(sub_scores, sub_gt, split=split))
        else:
            for name, enum_cls in zip(ATTRIBUTE_NAMES, ATTRIBUTE_ENUMS):
                for value in enum_cls:
                    table[(name, value.name.lower(), split)] = None
    return table


def save_association_charts(model_table: AssociationTable, gt_table: AssociationTable,
                            out_dir) -> List[str]:
    """Paired bar charts, one per populated (class, attribute) cell."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    shared = [c for c in gt_table.classes if c in model_table.rows]
    for c in shared:
        for k, (name, enum_cls) in enumerate(zip(ATTRIBUTE_NAMES, ATTRIBUTE_ENUMS)):
            labels = [v.name.lower() for v in enum_cls]
            x = np.arange(len(labels))
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.bar(x - 0.2, model_table.rows[c][k], width=0.4, label="model")
            ax.bar(x + 0.2, gt_table.rows[c][k], width=0.4, label="ground truth")
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=20)
            ax.set_ylim(0, 1.05)
            ax.set_ylabel("probability")
            ax.set_title(f"{c.name.lower()}: {name}")
            ax.legend()
            path = out_dir / f"association_{c.name.lower()}_{name}.png"
            fig.savefig(path, dpi=100, bbox_inches="tight")
            plt.close(fig)
            written.append(str(path))
    return written


def save_divergence_report(report: FaithfulnessReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"threshold = {report.threshold}\n")
        fh.write(f"faithful = {str(report.faithful).lower()}\n")
        for (c, name), tv in sorted(report.divergence.items(),
                                    key=lambda kv: (kv[0][0].value, kv[0][1])):
            fh.write(f"tv.{c.name.lower()}.{name} = {tv!r}\n")
        for c in report.absent_classes:
            fh.write(f"absent = {c.name.lower()}\n")
