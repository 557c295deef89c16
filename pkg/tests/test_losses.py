"""Loss terms against closed-form and duplicate-implementation oracles."""

import math

import numpy as np
import pytest
import torch

from conftest import random_annotation
from wbcx.core import CellClass, MaskPair, MatchResult
from wbcx.errors import DimensionMismatch
from wbcx.losses import (
    LossWeights,
    SlotTensors,
    box_loss,
    composite_loss,
    dice_loss,
    explanation_loss,
    focal_loss,
    giou,
    prediction_loss,
    segmentation_loss,
)

W = LossWeights()


def _one_hot_logits(n, targets, scale=60.0):
    logits = torch.full((n, 11), -scale, dtype=torch.float64)
    for j, t in targets.items():
        logits[j, t] = scale
    return logits


class TestPredictionLoss:
    def test_perfect_predictions(self):
        rng = np.random.default_rng(0)
        gts = [random_annotation(rng, cls=CellClass.BASOPHIL)]
        match = MatchResult(sigma={0: 0}, n_slots=3)
        logits = _one_hot_logits(3, {0: CellClass.BASOPHIL.value,
                                     1: CellClass.EMPTY.value,
                                     2: CellClass.EMPTY.value})
        loss = prediction_loss(logits, gts, match, W)
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_half_probability_single_slot(self):
        rng = np.random.default_rng(1)
        gts = [random_annotation(rng, cls=CellClass.NEUTROPHIL)]
        match = MatchResult(sigma={0: 0}, n_slots=1)
        logits = torch.full((1, 11), -40.0, dtype=torch.float64)
        logits[0, 0] = 0.0
        logits[0, 1] = 0.0  # probability split evenly over two classes
        weights = LossWeights(empty_class_weight=0.0)
        loss = prediction_loss(logits, gts, match, weights)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-9)

    def test_uniform_scores_closed_form(self):
        rng = np.random.default_rng(2)
        gts = [random_annotation(rng)]
        match = MatchResult(sigma={0: 4}, n_slots=10)
        logits = torch.zeros((10, 11), dtype=torch.float64)
        loss = prediction_loss(logits, gts, match, W)
        expected = (math.log(11) + 9 * 0.1 * math.log(11)) / 10
        assert float(loss) == pytest.approx(expected, abs=1e-9)

    def test_monotone_in_true_logit(self):
        rng = np.random.default_rng(3)
        gts = [random_annotation(rng, cls=CellClass.MONOCYTE)]
        match = MatchResult(sigma={0: 0}, n_slots=2)
        prev = math.inf
        for bump in (0.0, 0.5, 1.0, 2.0, 4.0):
            logits = torch.zeros((2, 11), dtype=torch.float64)
            logits[0, CellClass.MONOCYTE.value] = bump
            cur = float(prediction_loss(logits, gts, match, W))
            assert cur <= prev + 1e-12
            prev = cur


class TestGiou:
    def test_identical(self):
        b = torch.tensor([0.5, 0.5, 0.4, 0.4], dtype=torch.float64)
        assert float(giou(b, b)) == pytest.approx(1.0, abs=1e-12)

    def test_adjacent_squares(self):
        a = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        b = torch.tensor([1.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        assert float(giou(a, b)) == pytest.approx(0.0, abs=1e-12)

    def test_corner_gap(self):
        a = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        b = torch.tensor([2.5, 2.5, 1.0, 1.0], dtype=torch.float64)
        assert float(giou(a, b)) == pytest.approx(-7 / 9, abs=1e-12)


class TestBoxLoss:
    def test_identical(self):
        b = torch.tensor([0.5, 0.5, 0.4, 0.4], dtype=torch.float64)
        assert float(box_loss(b, b, W)) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        a = torch.tensor([0.5, 0.5, 0.4, 0.4], dtype=torch.float64)
        b = torch.tensor([0.6, 0.5, 0.4, 0.4], dtype=torch.float64)
        weights = LossWeights(w_l1=1.0, w_giou=0.0)
        assert float(box_loss(a, b, weights)) == pytest.approx(0.1, abs=1e-12)

    def test_adjacent_squares_formula(self):
        a = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        b = torch.tensor([1.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        expected = 2.0 * (1.0 - 0.0) + 5.0 * 1.0  # GIoU 0, center-form L1 = |dx| = 1
        assert float(box_loss(a, b, W)) == pytest.approx(expected, abs=1e-12)


class TestDiceLoss:
    def test_perfect_overlap_large_mask(self):
        target = torch.ones((120, 120), dtype=torch.float64)
        assert float(dice_loss(target, target)) <= 1e-4

    def test_disjoint(self):
        soft = torch.zeros((10, 10), dtype=torch.float64)
        soft[:5] = 1.0
        target = torch.zeros((10, 10), dtype=torch.float64)
        target[5:] = 1.0
        x, y = 50.0, 50.0
        assert float(dice_loss(soft, target)) == pytest.approx(1 - 1 / (x + y + 1), abs=1e-12)

    def test_half_everywhere_closed_form(self):
        n = 128
        soft = torch.full((1, 2 * n), 0.5, dtype=torch.float64)
        target = torch.zeros((1, 2 * n), dtype=torch.float64)
        target[0, :n] = 1.0
        expected = 1 - (2 * 0.5 * n + 1) / (n + n + 1)
        got = float(dice_loss(soft, target))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.5, abs=0.01)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            dice_loss(torch.zeros((3, 3)), torch.zeros((4, 4)))

    def test_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            soft = torch.tensor(rng.uniform(0, 1, (6, 6)))
            target = torch.tensor((rng.random((6, 6)) > 0.5).astype(float))
            v = float(dice_loss(soft, target))
            assert 0.0 <= v <= 1.0


class TestFocalLoss:
    def test_perfect_prediction(self):
        target = torch.ones((8, 8), dtype=torch.float64)
        assert float(focal_loss(target, target)) <= 1e-5

    def test_gamma_zero_is_scaled_bce(self):
        rng = np.random.default_rng(5)
        soft = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)))
        target = torch.tensor((rng.random((8, 8)) > 0.5).astype(float))
        got = float(focal_loss(soft, target, gamma=0.0, alpha=0.5))
        bce = -(target * torch.log(soft) + (1 - target) * torch.log(1 - soft)).mean()
        assert got == pytest.approx(0.5 * float(bce), abs=1e-9)

    def test_single_pixel_hand_evaluation(self):
        soft = torch.tensor([[0.5]], dtype=torch.float64)
        target = torch.tensor([[1.0]], dtype=torch.float64)
        got = float(focal_loss(soft, target, gamma=2.0, alpha=0.25))
        assert got == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-9)
        assert got == pytest.approx(0.043322, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            focal_loss(torch.zeros((2, 2)), torch.zeros((2, 3)))


def _segmentation_oracle(pred, gt, w):
    """Independent reimplementation in numpy."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    total = 0.0
    for ch in range(2):
        p, t = pred[ch], gt[ch]
        inter = (p * t).sum()
        dice = 1 - (2 * inter + 1.0) / (p.sum() + t.sum() + 1.0)
        p_t = np.where(t > 0.5, p, 1 - p)
        p_t = np.clip(p_t, 1e-7, 1 - 1e-7)
        alpha_t = np.where(t > 0.5, w.focal_alpha, 1 - w.focal_alpha)
        focal = (-alpha_t * (1 - p_t) ** w.focal_gamma * np.log(p_t)).mean()
        total += w.w_dice * dice + w.w_fl * focal
    return total / 2.0


class TestSegmentationLoss:
    def test_perfect_masks(self):
        gt = torch.tensor(np.stack([np.ones((40, 40)), np.zeros((40, 40))]))
        assert float(segmentation_loss(gt.double(), gt.double(), W)) <= 1e-3

    def test_pure_focal_when_dice_zeroed(self):
        rng = np.random.default_rng(6)
        pred = torch.tensor(rng.uniform(0.05, 0.95, (2, 8, 8)))
        gt = torch.tensor((rng.random((2, 8, 8)) > 0.5).astype(float))
        weights = LossWeights(w_dice=0.0, w_fl=1.0)
        direct = 0.5 * (float(focal_loss(pred[0], gt[0])) + float(focal_loss(pred[1], gt[1])))
        assert float(segmentation_loss(pred, gt, weights)) == pytest.approx(direct, abs=1e-12)

    def test_duplicate_implementation_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            pred = rng.uniform(0.01, 0.99, (2, 8, 8))
            gt = (rng.random((2, 8, 8)) > 0.5).astype(float)
            got = float(segmentation_loss(torch.tensor(pred), torch.tensor(gt), W))
            assert got == pytest.approx(_segmentation_oracle(pred, gt, W), abs=1e-9)

    def test_accepts_mask_pair(self):
        rng = np.random.default_rng(8)
        cyto = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        nuc = ((rng.random((8, 8)) > 0.5) & ~cyto.astype(bool)).astype(np.uint8)
        mp = MaskPair(cytoplasm=cyto, nucleus=nuc)
        pred = torch.tensor(rng.uniform(0.05, 0.95, (2, 8, 8)))
        via_pair = float(segmentation_loss(pred, mp, W))
        via_stack = float(segmentation_loss(
            pred, torch.tensor(np.stack([cyto, nuc]).astype(float)), W))
        assert via_pair == pytest.approx(via_stack, abs=1e-12)


class TestExplanationLoss:
    def test_perfect(self):
        logits = [torch.tensor([60.0, -60.0]), torch.tensor([-60.0, 60.0]),
                  torch.tensor([60.0, -60.0, -60.0]), torch.tensor([-60.0, -60.0, 60.0])]
        loss = explanation_loss(logits, [0, 1, 0, 2], W)
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_scores_closed_form(self):
        logits = [torch.zeros(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64),
                  torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)]
        loss = explanation_loss(logits, [0, 0, 0, 0], W)
        expected = 2 * math.log(2) + 2 * math.log(3)
        assert float(loss) == pytest.approx(expected, abs=1e-9)
        assert float(loss) == pytest.approx(3.583519, abs=1e-6)

    def test_single_term_ln4(self):
        # granularity prob 0.25 on the true value, all other attribute weights zero
        logits = [torch.tensor([0.0, math.log(3.0)], dtype=torch.float64),
                  torch.zeros(2, dtype=torch.float64),
                  torch.zeros(3, dtype=torch.float64),
                  torch.zeros(3, dtype=torch.float64)]
        weights = LossWeights(w_attr=(1.0, 0.0, 0.0, 0.0))
        loss = explanation_loss(logits, [0, 0, 0, 0], weights)
        assert float(loss) == pytest.approx(math.log(4), abs=1e-9)


def _random_slots(rng, n, mask=6):
    return SlotTensors(
        class_logits=torch.tensor(rng.uniform(-2, 2, (n, 11))),
        boxes=torch.tensor(np.column_stack([rng.uniform(0.4, 0.6, (n, 2)),
                                            rng.uniform(0.25, 0.45, (n, 2))])),
        mask_probs=torch.tensor(rng.uniform(0.05, 0.95, (n, 2, mask, mask))),
        attr_logits=(torch.tensor(rng.uniform(-2, 2, (n, 2))),
                     torch.tensor(rng.uniform(-2, 2, (n, 2))),
                     torch.tensor(rng.uniform(-2, 2, (n, 3))),
                     torch.tensor(rng.uniform(-2, 2, (n, 3)))))


class TestCompositeLoss:
    def test_component_sum_oracle(self):
        rng = np.random.default_rng(9)
        gt = random_annotation(rng, mask_size=6)
        slots = _random_slots(rng, n=3)
        match = MatchResult(sigma={0: 1}, n_slots=3)
        breakdown = composite_loss(slots, [gt], match, W)
        pred = prediction_loss(slots.class_logits, [gt], match, W)
        box = box_loss(torch.tensor(gt.box.as_array()), slots.boxes[1], W)
        seg = segmentation_loss(slots.mask_probs[1], gt.masks, W)
        expl = explanation_loss([a[1] for a in slots.attr_logits],
                                gt.attributes.as_indices(), W)
        assert float(breakdown.prediction) == pytest.approx(float(pred), abs=1e-9)
        assert float(breakdown.box) == pytest.approx(float(box), abs=1e-9)
        assert float(breakdown.segmentation) == pytest.approx(float(seg), abs=1e-9)
        assert float(breakdown.explanation) == pytest.approx(float(expl), abs=1e-9)
        total = float(pred) + float(box) + float(seg) + float(expl)
        assert float(breakdown.total) == pytest.approx(total, abs=1e-9)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            gt = random_annotation(rng, mask_size=6)
            slots = _random_slots(rng, n=4)
            match = MatchResult(sigma={0: int(rng.integers(0, 4))}, n_slots=4)
            b = composite_loss(slots, [gt], match, W).as_floats()
            assert b.total == pytest.approx(
                b.prediction + b.box + b.segmentation + b.explanation, abs=1e-9)

    def test_zeroed_weight_group_removes_term(self):
        rng = np.random.default_rng(11)
        gt = random_annotation(rng, mask_size=6)
        slots = _random_slots(rng, n=3)
        match = MatchResult(sigma={0: 0}, n_slots=3)
        no_box = LossWeights(w_l1=0.0, w_giou=0.0)
        b = composite_loss(slots, [gt], match, no_box).as_floats()
        assert b.box == pytest.approx(0.0, abs=1e-12)
        no_seg = LossWeights(w_dice=0.0, w_fl=0.0)
        b = composite_loss(slots, [gt], match, no_seg).as_floats()
        assert b.segmentation == pytest.approx(0.0, abs=1e-12)
        no_expl = LossWeights(w_attr=(0.0, 0.0, 0.0, 0.0))
        b = composite_loss(slots, [gt], match, no_expl).as_floats()
        assert b.explanation == pytest.approx(0.0, abs=1e-12)

    def test_near_zero_for_perfect_predictions(self):
        rng = np.random.default_rng(12)
        gt = random_annotation(rng, mask_size=6)
        match = MatchResult(sigma={0: 0}, n_slots=2)
        logits = _one_hot_logits(2, {0: gt.cell_class.value, 1: CellClass.EMPTY.value})
        gt_masks = torch.tensor(np.stack([gt.masks.cytoplasm,
                                          gt.masks.nucleus]).astype(np.float64))
        idx = gt.attributes.as_indices()
        attr = []
        for k, card in enumerate((2, 2, 3, 3)):
            a = torch.full((2, card), -60.0, dtype=torch.float64)
            a[:, idx[k]] = 60.0
            attr.append(a)
        slots = SlotTensors(
            class_logits=logits,
            boxes=torch.tensor(np.tile(gt.box.as_array(), (2, 1))),
            mask_probs=torch.stack([gt_masks, gt_masks]),
            attr_logits=tuple(attr))
        b = composite_loss(slots, [gt], match, W).as_floats()
        assert b.total == pytest.approx(0.0, abs=0.02)  # dice smoothing leaks epsilon
