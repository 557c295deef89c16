"""Domain types and geometry: N:C ratio, IoU/GIoU arithmetic, box conversion,
mask binarization, and the shared dataclass invariants."""

import numpy as np
import pytest

from wbcx.core import (
    ATTRIBUTE_CARDINALITIES,
    BoundingBox,
    CellAnnotation,
    CellClass,
    ExplanationAttributes,
    Granularity,
    CytoplasmColor,
    NucleusShape,
    SizeWrtRbc,
    MaskPair,
    MatchResult,
    NUM_CLASSES,
    PredictionSet,
    REAL_CLASSES,
    binarize_mask,
    box_iou,
    center_to_corners,
    compute_nc_ratio,
    corner_giou,
    corner_iou,
    corners_to_center,
    softmax,
    tight_box_from_masks,
)
from wbcx.errors import EmptyCytoplasm, InvalidBox


def _mask_with_count(n, size=80):
    m = np.zeros((size, size), dtype=np.uint8)
    m.reshape(-1)[:n] = 1
    return m


class TestComputeNcRatio:
    def test_simple_ratio(self):
        masks = MaskPair(cytoplasm=_mask_with_count(400), nucleus=_mask_with_count(100))
        assert compute_nc_ratio(masks) == 0.25

    def test_zero_nucleus(self):
        masks = MaskPair(cytoplasm=_mask_with_count(400), nucleus=_mask_with_count(0))
        assert compute_nc_ratio(masks) == 0.0

    def test_pixel_count_oracle(self):
        # nucleus 3571 px, cytoplasm 2113 px -> 3571/2113 = 1.690014...
        masks = MaskPair(cytoplasm=_mask_with_count(2113), nucleus=_mask_with_count(3571))
        assert compute_nc_ratio(masks) == pytest.approx(3571 / 2113, abs=1e-12)
        assert compute_nc_ratio(masks) == pytest.approx(1.690014, abs=1e-6)

    def test_empty_cytoplasm_raises(self):
        masks = MaskPair(cytoplasm=_mask_with_count(0), nucleus=_mask_with_count(10))
        with pytest.raises(EmptyCytoplasm):
            compute_nc_ratio(masks)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        cyto = (rng.random((32, 32)) > 0.5).astype(np.uint8)
        nuc = ((rng.random((32, 32)) > 0.5) & ~cyto.astype(bool)).astype(np.uint8)
        base = compute_nc_ratio(MaskPair(cytoplasm=cyto, nucleus=nuc))
        flipped = compute_nc_ratio(MaskPair(cytoplasm=np.flip(cyto, 0).copy(),
                                            nucleus=np.flip(nuc, 0).copy()))
        assert base == flipped


class TestBoxIou:
    def test_identical(self):
        b = BoundingBox(0.5, 0.5, 0.4, 0.4)
        assert box_iou(b, b) == 1.0

    def test_disjoint(self):
        a = BoundingBox(0.2, 0.2, 0.2, 0.2)
        b = BoundingBox(0.8, 0.8, 0.2, 0.2)
        assert box_iou(a, b) == 0.0

    def test_area_oracle_one_third(self):
        # raw corner arithmetic, before unit-square clamping
        assert corner_iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a = BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.5, 2))
            b = BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.5, 2))
            assert box_iou(a, b) == pytest.approx(box_iou(b, a), abs=1e-15)

    def test_scale_invariance(self):
        a = (0.1, 0.1, 0.5, 0.6)
        b = (0.2, 0.3, 0.7, 0.8)
        scaled = lambda c, s: tuple(v * s for v in c)
        assert corner_iou(a, b) == pytest.approx(corner_iou(scaled(a, 3.0), scaled(b, 3.0)),
                                                 abs=1e-12)


class TestCornerGiou:
    def test_identical_is_one(self):
        assert corner_giou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0

    def test_adjacent_squares(self):
        # union 2, enclosing 2, IoU 0 -> GIoU 0
        assert corner_giou((0, 0, 1, 1), (1, 0, 2, 1)) == pytest.approx(0.0, abs=1e-12)

    def test_corner_gap(self):
        assert corner_giou((0, 0, 1, 1), (2, 2, 3, 3)) == pytest.approx(-7 / 9, abs=1e-12)


class TestBoxConvert:
    def test_unit_box(self):
        assert center_to_corners(0.5, 0.5, 1, 1) == (0, 0, 1, 1)

    def test_quarter_box(self):
        assert center_to_corners(0.25, 0.25, 0.5, 0.5) == (0, 0, 0.5, 0.5)

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            cx, cy = rng.uniform(0.3, 0.7, 2)
            w, h = rng.uniform(0.05, 0.5, 2)
            back = corners_to_center(*center_to_corners(cx, cy, w, h))
            assert np.allclose(back, (cx, cy, w, h), atol=1e-12)

    def test_degenerate_raises(self):
        with pytest.raises(InvalidBox):
            corners_to_center(0.5, 0.0, 0.5, 1.0)
        with pytest.raises(InvalidBox):
            corners_to_center(0.0, 0.8, 1.0, 0.2)


class TestBoundingBox:
    def test_clamped_to_unit_square(self):
        b = BoundingBox(0.1, 0.5, 0.4, 0.4)  # would extend to x0 = -0.1
        x0, y0, x1, y1 = b.corners()
        assert x0 == 0.0 and x1 == pytest.approx(0.3)

    def test_fully_outside_raises(self):
        with pytest.raises(InvalidBox):
            BoundingBox(2.0, 2.0, 0.1, 0.1)


class TestBinarizeMask:
    def test_all_above(self):
        assert binarize_mask(np.full((3, 3), 0.9)).all()

    def test_strict_inequality(self):
        assert not binarize_mask(np.full((3, 3), 0.5)).any()

    def test_elementwise(self):
        soft = np.array([[0.2, 0.7], [0.5, 0.51]])
        assert binarize_mask(soft).tolist() == [[0, 1], [0, 1]]

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            binarize_mask(np.zeros((2, 2)), threshold=0.0)


class TestTightBox:
    def test_contains_mask_union(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            cyto = np.zeros((32, 32), dtype=np.uint8)
            r0, c0 = rng.integers(4, 12, 2)
            r1, c1 = rng.integers(18, 28, 2)
            cyto[r0:r1, c0:c1] = 1
            masks = MaskPair(cytoplasm=cyto, nucleus=np.zeros_like(cyto))
            x0, y0, x1, y1 = tight_box_from_masks(masks).corners()
            assert x0 <= c0 / 32 and x1 >= c1 / 32
            assert y0 <= r0 / 32 and y1 >= r1 / 32


class TestEnumsAndAttributes:
    def test_class_layout(self):
        assert NUM_CLASSES == 11
        assert CellClass.EMPTY.value == 10
        assert len(REAL_CLASSES) == 10
        assert CellClass.EMPTY not in REAL_CLASSES

    def test_cardinalities(self):
        assert ATTRIBUTE_CARDINALITIES == (2, 2, 3, 3)

    def test_attribute_index_round_trip(self):
        attrs = ExplanationAttributes(Granularity.YES, CytoplasmColor.BASOPHILIC,
                                      NucleusShape.ROUND_OVAL, SizeWrtRbc.LARGER)
        assert ExplanationAttributes.from_indices(attrs.as_indices()) == attrs

    def test_empty_not_a_ground_truth(self):
        masks = MaskPair(cytoplasm=_mask_with_count(10), nucleus=_mask_with_count(0))
        attrs = ExplanationAttributes.from_indices((0, 0, 0, 0))
        with pytest.raises(ValueError):
            CellAnnotation(cell_class=CellClass.EMPTY,
                           box=BoundingBox(0.5, 0.5, 0.4, 0.4),
                           masks=masks, attributes=attrs)

    def test_annotation_derives_nc(self):
        masks = MaskPair(cytoplasm=_mask_with_count(200), nucleus=_mask_with_count(50))
        ann = CellAnnotation(cell_class=CellClass.NEUTROPHIL,
                             box=BoundingBox(0.5, 0.5, 0.4, 0.4),
                             masks=masks,
                             attributes=ExplanationAttributes.from_indices((0, 0, 1, 1)))
        assert ann.nc_ratio == 0.25


class TestPredictionSetAndMatch:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            PredictionSet(class_scores=np.zeros((3, 5)), boxes=np.zeros((3, 4)),
                          soft_masks=np.zeros((3, 2, 4, 4)),
                          attribute_scores=(np.zeros((3, 2)), np.zeros((3, 2)),
                                            np.zeros((3, 3)), np.zeros((3, 3))))

    def test_match_result_injective(self):
        with pytest.raises(ValueError):
            MatchResult(sigma={0: 1, 1: 1}, n_slots=4)

    def test_unmatched_slots(self):
        m = MatchResult(sigma={0: 2, 1: 0}, n_slots=4)
        assert m.unmatched_slots == (1, 3)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 11))
        assert np.allclose(softmax(x, axis=-1).sum(axis=-1), 1.0, atol=1e-12)
