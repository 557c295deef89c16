"""Domain types and geometry shared by every other module.

Boxes are stored in normalized center form (cx, cy, w, h), all in [0, 1].
Masks are binary uint8 rasters on the parent image grid; a ground-truth
mask pair keeps nucleus and cytoplasm disjoint, so the N:C ratio can
exceed 1 for high-nucleus cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Tuple

import numpy as np

from .errors import EmptyCytoplasm, InvalidBox


class CellClass(Enum):
    NEUTROPHIL = 0
    LYMPHOCYTE = 1
    EOSINOPHIL = 2
    MONOCYTE = 3
    BASOPHIL = 4
    BAND_CELL = 5
    METAMYELOCYTE = 6
    MYELOCYTE = 7
    PROMYELOCYTE = 8
    BLAST_CELL = 9
    # Target for unmatched prediction slots only; never a ground-truth label.
    EMPTY = 10


NUM_CLASSES = 11  # ten cell types + EMPTY
REAL_CLASSES: Tuple[CellClass, ...] = tuple(c for c in CellClass if c is not CellClass.EMPTY)


class Granularity(Enum):
    YES = 0
    NO = 1


class CytoplasmColor(Enum):
    EOSINOPHILIC = 0
    BASOPHILIC = 1


class NucleusShape(Enum):
    HORSESHOE_KIDNEY = 0
    BILOBED_MULTILOBED = 1
    ROUND_OVAL = 2


class SizeWrtRbc(Enum):
    LARGER = 0
    NEARLY_SIMILAR = 1
    SMALLER = 2


ATTRIBUTE_NAMES: Tuple[str, ...] = (
    "granularity",
    "cytoplasm_color",
    "nucleus_shape",
    "size_wrt_rbc",
)
ATTRIBUTE_ENUMS = (Granularity, CytoplasmColor, NucleusShape, SizeWrtRbc)
ATTRIBUTE_CARDINALITIES: Tuple[int, ...] = (2, 2, 3, 3)


@dataclass(frozen=True)
class ExplanationAttributes:
    """The four categorical explanations; the fifth (N:C) is derived from masks."""

    granularity: Granularity
    cytoplasm_color: CytoplasmColor
    nucleus_shape: NucleusShape
    size_wrt_rbc: SizeWrtRbc

    def as_indices(self) -> Tuple[int, int, int, int]:
        return (
            self.granularity.value,
            self.cytoplasm_color.value,
            self.nucleus_shape.value,
            self.size_wrt_rbc.value,
        )

    @staticmethod
    def from_indices(idx) -> "ExplanationAttributes":
        g, c, s, z = idx
        return ExplanationAttributes(
            Granularity(g), CytoplasmColor(c), NucleusShape(s), SizeWrtRbc(z)
        )


def center_to_corners(cx: float, cy: float, w: float, h: float):
    """(cx, cy, w, h) -> (x0, y0, x1, y1). Pure arithmetic, no clamping."""
    return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def corners_to_center(x0: float, y0: float, x1: float, y1: float):
    """(x0, y0, x1, y1) -> (cx, cy, w, h); raises InvalidBox on degenerate corners."""
    if x1 <= x0 or y1 <= y0:
        raise InvalidBox(f"degenerate corners ({x0}, {y0}, {x1}, {y1})")
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class BoundingBox:
    """Normalized center-form box, clamped to the unit square on construction."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        x0, y0, x1, y1 = center_to_corners(self.cx, self.cy, self.w, self.h)
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(1.0, x1), min(1.0, y1)
        cx, cy, w, h = corners_to_center(x0, y0, x1, y1)  # raises InvalidBox
        object.__setattr__(self, "cx", cx)
        object.__setattr__(self, "cy", cy)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)

    def corners(self):
        return center_to_corners(self.cx, self.cy, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def corner_iou(a, b) -> float:
    """IoU of two corner-form boxes (x0, y0, x1, y1)."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(0.0, iw) * max(0.0, ih)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    return corner_iou(a.corners(), b.corners())


def corner_giou(a, b) -> float:
    """Generalized IoU of two corner-form boxes: IoU minus the fraction of the
    smallest enclosing box not covered by the union. Range (-1, 1]."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(0.0, iw) * max(0.0, ih)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclosing = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    iou = inter / union if union > 0 else 0.0
    return iou - (enclosing - union) / enclosing if enclosing > 0 else iou


@dataclass(frozen=True)
class MaskPair:
    """Binary cytoplasm and nucleus rasters on the same grid, disjoint for ground truth."""

    cytoplasm: np.ndarray
    nucleus: np.ndarray

    def __post_init__(self):
        cyto = np.ascontiguousarray(self.cytoplasm, dtype=np.uint8)
        nuc = np.ascontiguousarray(self.nucleus, dtype=np.uint8)
        if cyto.shape != nuc.shape or cyto.ndim != 2:
            raise ValueError(f"mask shapes disagree: {cyto.shape} vs {nuc.shape}")
        if cyto.max(initial=0) > 1 or nuc.max(initial=0) > 1:
            raise ValueError("masks must be 0/1 valued")
        object.__setattr__(self, "cytoplasm", cyto)
        object.__setattr__(self, "nucleus", nuc)

    @property
    def shape(self):
        return self.cytoplasm.shape


def compute_nc_ratio(masks: MaskPair) -> float:
    """Nucleus pixel count over cytoplasm pixel count."""
    cyto = int(masks.cytoplasm.sum())
    if cyto == 0:
        raise EmptyCytoplasm("cytoplasm raster is all zero; N:C undefined")
    return float(masks.nucleus.sum()) / cyto


def binarize_mask(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict-inequality threshold; values equal to the threshold stay off."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(soft) > threshold).astype(np.uint8)


def tight_box_from_masks(masks: MaskPair, pad_px: int = 1) -> BoundingBox:
    """Smallest normalized box containing the union of both mask regions."""
    union = (masks.cytoplasm | masks.nucleus).astype(bool)
    if not union.any():
        raise EmptyCytoplasm("cannot derive a box from empty masks")
    h, w = union.shape
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    x0 = max(0, cols[0] - pad_px) / w
    x1 = min(w, cols[-1] + 1 + pad_px) / w
    y0 = max(0, rows[0] - pad_px) / h
    y1 = min(h, rows[-1] + 1 + pad_px) / h
    return BoundingBox(*corners_to_center(x0, y0, x1, y1))


@dataclass(frozen=True)
class CellAnnotation:
    """Ground truth for one cell; nc_ratio is derived from the masks and cached."""

    cell_class: CellClass
    box: BoundingBox
    masks: MaskPair
    attributes: ExplanationAttributes
    nc_ratio: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.cell_class is CellClass.EMPTY:
            raise ValueError("EMPTY is not a valid ground-truth class")
        if self.nc_ratio is None:
            object.__setattr__(self, "nc_ratio", compute_nc_ratio(self.masks))


@dataclass
class PredictionSet:
    """The model's N slots for one image. Scores are unnormalized logits."""

    class_scores: np.ndarray  # (N, 11)
    boxes: np.ndarray  # (N, 4) center form in [0, 1]
    soft_masks: np.ndarray  # (N, 2, H, W) in [0, 1]; channel 0 cytoplasm, 1 nucleus
    attribute_scores: Tuple[np.ndarray, ...]  # four arrays (N, 2), (N, 2), (N, 3), (N, 3)

    def __post_init__(self):
        n = self.class_scores.shape[0]
        if self.class_scores.shape != (n, NUM_CLASSES):
            raise ValueError(f"class_scores must be (N, {NUM_CLASSES})")
        if self.boxes.shape != (n, 4):
            raise ValueError("boxes must be (N, 4)")
        if self.soft_masks.ndim != 4 or self.soft_masks.shape[:2] != (n, 2):
            raise ValueError("soft_masks must be (N, 2, H, W)")
        if len(self.attribute_scores) != 4 or any(
            a.shape != (n, k) for a, k in zip(self.attribute_scores, ATTRIBUTE_CARDINALITIES)
        ):
            raise ValueError("attribute_scores must be four (N, k) arrays with k = 2, 2, 3, 3")

    @property
    def n_slots(self) -> int:
        return self.class_scores.shape[0]

    def class_probs(self) -> np.ndarray:
        return softmax(self.class_scores, axis=-1)

    def slot_box(self, j: int) -> BoundingBox:
        cx, cy, w, h = self.boxes[j]
        return BoundingBox(float(cx), float(cy), float(w), float(h))


@dataclass(frozen=True)
class MatchResult:
    """Injective assignment from ground-truth index to slot index."""

    sigma: Dict[int, int]
    n_slots: int

    def __post_init__(self):
        slots = list(self.sigma.values())
        if len(set(slots)) != len(slots):
            raise ValueError("sigma must be injective")
        if any(not 0 <= s < self.n_slots for s in slots):
            raise ValueError("slot index out of range")

    @property
    def unmatched_slots(self) -> Tuple[int, ...]:
        used = set(self.sigma.values())
        return tuple(j for j in range(self.n_slots) if j not in used)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
