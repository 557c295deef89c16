"""The four training loss terms and their composite.

All functions are differentiable torch expressions so analytic gradients come
from autograd; the harness module verifies every one of them against central
finite differences. Defaults follow the query-based-detector conventions:
w_l1=5, w_giou=2, w_dice=1, w_fl=1, unit attribute weights, empty-class
downweight 0.1, focal gamma=2 / alpha=0.25.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import torch

from .core import (
    ATTRIBUTE_CARDINALITIES,
    CellAnnotation,
    CellClass,
    MaskPair,
    MatchResult,
    PredictionSet,
)
from .errors import DimensionMismatch

PROB_EPS = 1e-7  # probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before log
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    w_giou: float = 2.0
    w_l1: float = 5.0
    w_dice: float = 1.0
    w_fl: float = 1.0
    w_attr: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    empty_class_weight: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


@dataclass
class LossBreakdown:
    """Per-term values; tensors during training, floats after as_floats()."""

    prediction: torch.Tensor
    box: torch.Tensor
    segmentation: torch.Tensor
    explanation: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> "LossBreakdown":
        def to_float(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossBreakdown(*(to_float(getattr(self, f)) for f in
                               ("prediction", "box", "segmentation", "explanation", "total")))


@dataclass
class SlotTensors:
    """Differentiable view of one image's N prediction slots."""

    class_logits: torch.Tensor  # (N, 11)
    boxes: torch.Tensor  # (N, 4) center form in [0, 1]
    mask_probs: torch.Tensor  # (N, 2, H, W) in [0, 1]
    attr_logits: Tuple[torch.Tensor, ...]  # four (N, k) tensors

    @property
    def n_slots(self) -> int:
        return self.class_logits.shape[0]

    @staticmethod
    def from_prediction_set(preds: PredictionSet, dtype=torch.float64) -> "SlotTensors":
        return SlotTensors(
            class_logits=torch.as_tensor(preds.class_scores, dtype=dtype),
            boxes=torch.as_tensor(preds.boxes, dtype=dtype),
            mask_probs=torch.as_tensor(preds.soft_masks, dtype=dtype),
            attr_logits=tuple(torch.as_tensor(a, dtype=dtype) for a in preds.attribute_scores),
        )

    def to_prediction_set(self) -> PredictionSet:
        return PredictionSet(
            class_scores=self.class_logits.detach().cpu().numpy(),
            boxes=self.boxes.detach().cpu().numpy(),
            soft_masks=self.mask_probs.detach().cpu().numpy(),
            attribute_scores=tuple(a.detach().cpu().numpy() for a in self.attr_logits),
        )


def _clamped_log_prob(logits: torch.Tensor, target: int) -> torch.Tensor:
    p = torch.softmax(logits, dim=-1)[target].clamp(PROB_EPS, 1.0 - PROB_EPS)
    return torch.log(p)


def prediction_loss(class_logits: torch.Tensor, gts: Sequence[CellAnnotation],
                    match: MatchResult, weights: LossWeights) -> torch.Tensor:
    """Mean negative log-probability over all N slots; matched slots target
    their ground-truth class, unmatched slots target EMPTY downweighted by
    empty_class_weight."""
    n = class_logits.shape[0]
    slot_target = {match.sigma[i]: gts[i].cell_class.value for i in match.sigma}
    total = class_logits.new_zeros(())
    for j in range(n):
        if j in slot_target:
            total = total - _clamped_log_prob(class_logits[j], slot_target[j])
        else:
            total = total - weights.empty_class_weight * _clamped_log_prob(
                class_logits[j], CellClass.EMPTY.value)
    return total / n


def _corners(box: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = box.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def giou(box_a: torch.Tensor, box_b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of two center-form boxes; differentiable, range (-1, 1]."""
    a = _corners(torch.as_tensor(box_a))
    b = _corners(torch.as_tensor(box_b))
    iw = torch.clamp(torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0]), min=0)
    ih = torch.clamp(torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1]), min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    eh = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclosing = ew * eh
    iou = inter / union
    return iou - (enclosing - union) / enclosing


def box_loss(gt_box: torch.Tensor, pred_box: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """w_giou * (1 - GIoU) + w_l1 * L1 distance in center form."""
    gt_box = torch.as_tensor(gt_box)
    pred_box = torch.as_tensor(pred_box)
    l1 = torch.abs(gt_box - pred_box).sum(-1)
    return weights.w_giou * (1.0 - giou(gt_box, pred_box)) + weights.w_l1 * l1


def dice_loss(soft: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    soft = torch.as_tensor(soft)
    target = torch.as_tensor(target, dtype=soft.dtype)
    if soft.shape != target.shape:
        raise DimensionMismatch(f"{tuple(soft.shape)} vs {tuple(target.shape)}")
    inter = (soft * target).sum()
    return 1.0 - (2.0 * inter + eps) / (soft.sum() + target.sum() + eps)


def focal_loss(soft: torch.Tensor, target: torch.Tensor,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Mean over pixels of -alpha_t * (1 - p_t)^gamma * log(p_t)."""
    soft = torch.as_tensor(soft)
    target = torch.as_tensor(target, dtype=soft.dtype)
    if soft.shape != target.shape:
        raise DimensionMismatch(f"{tuple(soft.shape)} vs {tuple(target.shape)}")
    p_t = torch.where(target > 0.5, soft, 1.0 - soft).clamp(PROB_EPS, 1.0 - PROB_EPS)
    alpha_t = torch.where(target > 0.5, soft.new_tensor(alpha), soft.new_tensor(1.0 - alpha))
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def segmentation_loss(pred_masks: torch.Tensor, gt_masks, weights: LossWeights) -> torch.Tensor:
    """Channel order: 0 cytoplasm, 1 nucleus. Per channel w_dice * dice + w_fl
    * focal, averaged over the two channels."""
    pred_masks = torch.as_tensor(pred_masks)
    if isinstance(gt_masks, MaskPair):
        gt = torch.stack([
            torch.as_tensor(gt_masks.cytoplasm, dtype=pred_masks.dtype),
            torch.as_tensor(gt_masks.nucleus, dtype=pred_masks.dtype),
        ])
    else:
        gt = torch.as_tensor(gt_masks, dtype=pred_masks.dtype)
    if pred_masks.shape != gt.shape or pred_masks.shape[0] != 2:
        raise DimensionMismatch(f"{tuple(pred_masks.shape)} vs {tuple(gt.shape)}")
    total = pred_masks.new_zeros(())
    for ch in range(2):
        total = total + weights.w_dice * dice_loss(pred_masks[ch], gt[ch]) \
            + weights.w_fl * focal_loss(pred_masks[ch], gt[ch],
                                        weights.focal_gamma, weights.focal_alpha)
    return total / 2.0


def explanation_loss(attr_logits: Sequence[torch.Tensor], targets: Sequence[int],
                     weights: LossWeights) -> torch.Tensor:
    """Weighted sum over the four attributes of cross-entropy against the true
    value. The N:C explanation is derived from masks and carries no loss term."""
    if len(attr_logits) != 4 or len(targets) != 4:
        raise ValueError("expected four attribute score vectors and four targets")
    total = torch.as_tensor(attr_logits[0]).new_zeros(())
    for k in range(4):
        logits = torch.as_tensor(attr_logits[k])
        if logits.shape[-1] != ATTRIBUTE_CARDINALITIES[k]:
            raise ValueError(f"attribute {k} expects {ATTRIBUTE_CARDINALITIES[k]} scores")
        total = total - weights.w_attr[k] * _clamped_log_prob(logits, int(targets[k]))
    return total


def composite_loss(slots: SlotTensors, gts: Sequence[CellAnnotation],
                   match: MatchResult, weights: LossWeights) -> LossBreakdown:
    """Class term over all N slots; box, segmentation, and explanation terms
    over matched pairs only, each normalized by the ground-truth count."""
    pred = prediction_loss(slots.class_logits, gts, match, weights)
    zero = slots.class_logits.new_zeros(())
    box = zero.clone()
    seg = zero.clone()
    expl = zero.clone()
    if match.sigma:
        for i, j in match.sigma.items():
            gt = gts[i]
            box = box + box_loss(
                torch.as_tensor(gt.box.as_array(), dtype=slots.boxes.dtype), slots.boxes[j], weights)
            seg = seg + segmentation_loss(slots.mask_probs[j], gt.masks, weights)
            expl = expl + explanation_loss(
                [a[j] for a in slots.attr_logits], gt.attributes.as_indices(), weights)
        n_gt = len(match.sigma)
        box, seg, expl = box / n_gt, seg / n_gt, expl / n_gt
    return LossBreakdown(prediction=pred, box=box, segmentation=seg,
                         explanation=expl, total=pred + box + seg + expl)
