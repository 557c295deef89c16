"""Procedural generator of labeled synthetic blood-smear images, plus the
standard augmentations (scale, rotate, translate, horizontal/vertical flip).

Every rendered cell follows a fixed class -> attribute rule table and a
per-class N:C band, so the ten classes are separable from rendered evidence.
The table is a synthetic-world convention chosen to match standard hematology
morphology; it is not a claim about real cells. Annotations are derived from
the render parameters and the rendered masks themselves, never re-estimated
from pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import (
    BoundingBox,
    CellAnnotation,
    CellClass,
    CytoplasmColor,
    ExplanationAttributes,
    Granularity,
    MaskPair,
    NucleusShape,
    SizeWrtRbc,
    tight_box_from_masks,
)
from .errors import DegenerateAugment

# Class -> (granularity, cytoplasm color, nucleus shape, size w.r.t. RBC).
RULE_TABLE: Dict[CellClass, ExplanationAttributes] = {
    CellClass.NEUTROPHIL: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.EOSINOPHILIC,
        NucleusShape.BILOBED_MULTILOBED, SizeWrtRbc.NEARLY_SIMILAR),
    CellClass.LYMPHOCYTE: ExplanationAttributes(
        Granularity.NO, CytoplasmColor.BASOPHILIC,
        NucleusShape.ROUND_OVAL, SizeWrtRbc.NEARLY_SIMILAR),
    CellClass.EOSINOPHIL: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.EOSINOPHILIC,
        NucleusShape.BILOBED_MULTILOBED, SizeWrtRbc.LARGER),
    CellClass.MONOCYTE: ExplanationAttributes(
        Granularity.NO, CytoplasmColor.BASOPHILIC,
        NucleusShape.HORSESHOE_KIDNEY, SizeWrtRbc.LARGER),
    CellClass.BASOPHIL: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.BASOPHILIC,
        NucleusShape.BILOBED_MULTILOBED, SizeWrtRbc.NEARLY_SIMILAR),
    CellClass.BAND_CELL: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.EOSINOPHILIC,
        NucleusShape.HORSESHOE_KIDNEY, SizeWrtRbc.LARGER),
    CellClass.METAMYELOCYTE: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.EOSINOPHILIC,
        NucleusShape.HORSESHOE_KIDNEY, SizeWrtRbc.NEARLY_SIMILAR),
    CellClass.MYELOCYTE: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.EOSINOPHILIC,
        NucleusShape.ROUND_OVAL, SizeWrtRbc.LARGER),
    CellClass.PROMYELOCYTE: ExplanationAttributes(
        Granularity.YES, CytoplasmColor.BASOPHILIC,
        NucleusShape.ROUND_OVAL, SizeWrtRbc.LARGER),
    CellClass.BLAST_CELL: ExplanationAttributes(
        Granularity.NO, CytoplasmColor.BASOPHILIC,
        NucleusShape.ROUND_OVAL, SizeWrtRbc.LARGER),
}

# Disjoint N:C target bands (nucleus px / cytoplasm px, masks disjoint).
# Blast cells sit highest, matching their characteristically high N:C.
NC_BANDS: Dict[CellClass, Tuple[float, float]] = {
    CellClass.NEUTROPHIL: (0.30, 0.40),
    CellClass.LYMPHOCYTE: (0.46, 0.56),
    CellClass.EOSINOPHIL: (0.62, 0.72),
    CellClass.MONOCYTE: (0.78, 0.88),
    CellClass.BASOPHIL: (0.94, 1.04),
    CellClass.BAND_CELL: (1.10, 1.20),
    CellClass.METAMYELOCYTE: (1.26, 1.36),
    CellClass.MYELOCYTE: (1.42, 1.52),
    CellClass.PROMYELOCYTE: (1.58, 1.68),
    CellClass.BLAST_CELL: (1.74, 1.84),
}

# Per-class base cytoplasm tint inside its stain family (eosinophilic =
# pink-orange shades, basophilic = blue-purple shades); distinct hues keep the
# toy classification task learnable from color alone.
# warm (eosinophilic-staining) tints keep R - B > 0.1, cool (basophilic) keep
# R <= 0.74, so the two stain families stay linearly separable while the five
# shades within each family sit far apart (and away from the RBC color)
CLASS_TINT: Dict[CellClass, Tuple[float, float, float]] = {
    CellClass.NEUTROPHIL: (0.97, 0.84, 0.58),
    CellClass.EOSINOPHIL: (0.96, 0.44, 0.30),
    CellClass.BAND_CELL: (0.86, 0.62, 0.36),
    CellClass.METAMYELOCYTE: (0.99, 0.70, 0.82),
    CellClass.MYELOCYTE: (0.88, 0.50, 0.58),
    CellClass.LYMPHOCYTE: (0.58, 0.68, 0.96),
    CellClass.MONOCYTE: (0.42, 0.82, 0.86),
    CellClass.BASOPHIL: (0.34, 0.40, 0.84),
    CellClass.PROMYELOCYTE: (0.74, 0.48, 0.92),
    CellClass.BLAST_CELL: (0.54, 0.80, 0.62),
}

NUCLEUS_COLOR = (0.32, 0.12, 0.42)
BACKGROUND_COLOR = (0.93, 0.90, 0.86)
RBC_COLOR = (0.93, 0.72, 0.68)
RBC_DIAMETER_FRAC = 0.25  # fixed reference diameter as a fraction of image size


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int = 64
    per_class_count: Dict[CellClass, int] = field(
        default_factory=lambda: {c: 10 for c in RULE_TABLE})
    rng_seed: int = 0
    noise_level: float = 0.03
    rbc_count_range: Tuple[int, int] = (4, 9)

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if any(v < 0 for v in self.per_class_count.values()):
            raise ValueError("per-class counts must be nonnegative")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    annotations: List[CellAnnotation]


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def _nucleus_shape(size: int, shape: NucleusShape, cx: float, cy: float,
                   scale: float, theta: float) -> np.ndarray:
    """Unit nucleus silhouette at the given scale; scale ~ semi-major axis px."""
    if shape is NucleusShape.ROUND_OVAL:
        return _ellipse_mask(size, cx, cy, scale, 0.82 * scale, theta)
    if shape is NucleusShape.BILOBED_MULTILOBED:
        off = 0.75 * scale
        lobe_a, lobe_b = 0.70 * scale, 0.58 * scale
        m1 = _ellipse_mask(size, cx + off * np.cos(theta), cy + off * np.sin(theta),
                           lobe_a, lobe_b, theta)
        m2 = _ellipse_mask(size, cx - off * np.cos(theta), cy - off * np.sin(theta),
                           lobe_a, lobe_b, theta)
        bridge = _ellipse_mask(size, cx, cy, 0.9 * off, 0.22 * scale, theta)
        return (m1 | m2 | bridge).astype(np.uint8)
    # horseshoe / kidney bean: ellipse with an offset bite removed; the bite
    # stays strictly outside the body center so growing the scale still grows
    # the nucleus (keeps high N:C targets reachable)
    body = _ellipse_mask(size, cx, cy, scale, 0.85 * scale, theta)
    bite_cx = cx + 0.72 * scale * np.cos(theta + np.pi / 2)
    bite_cy = cy + 0.72 * scale * np.sin(theta + np.pi / 2)
    bite = _ellipse_mask(size, bite_cx, bite_cy, 0.52 * scale, 0.42 * scale, theta)
    return (body & ~bite.astype(bool)).astype(np.uint8)


def _fit_nucleus(size: int, shape: NucleusShape, cx: float, cy: float, theta: float,
                 cyto_region: np.ndarray, target_nc: float) -> np.ndarray:
    """Bisect the nucleus scale so nucleus_px / (cell_px - nucleus_px) hits
    target_nc, with the nucleus clipped to the cell body."""
    cell_px = int(cyto_region.sum())
    lo, hi = 0.5, 0.9 * np.sqrt(cell_px)
    best, best_err = None, np.inf
    for _ in range(28):
        mid = 0.5 * (lo + hi)
        nuc = _nucleus_shape(size, shape, cx, cy, mid, theta) & cyto_region
        nuc_px = int(nuc.sum())
        cyto_px = cell_px - nuc_px
        if cyto_px <= 0:
            hi = mid
            continue
        nc = nuc_px / cyto_px
        if abs(nc - target_nc) < best_err:
            best, best_err = nuc, abs(nc - target_nc)
        if nc < target_nc:
            lo = mid
        else:
            hi = mid
    return best


def generate_cell(cell_class: CellClass, rng: np.random.Generator,
                  image_size: int = 64, noise_level: float = 0.03,
                  rbc_count_range: Tuple[int, int] = (4, 9)) -> LabeledImage:
    """Render one white blood cell over red-blood-cell background disks and
    emit the exactly consistent annotation."""
    if cell_class is CellClass.EMPTY:
        raise ValueError("EMPTY cannot be rendered")
    s = image_size
    attrs = RULE_TABLE[cell_class]
    img = np.empty((s, s, 3), dtype=np.float64)
    img[:] = BACKGROUND_COLOR
    img += rng.normal(0.0, 0.015, size=img.shape)

    rbc_r = RBC_DIAMETER_FRAC * s / 2.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    n_rbc = int(rng.integers(rbc_count_range[0], rbc_count_range[1] + 1))
    for _ in range(n_rbc):
        rcx, rcy = rng.uniform(0, s, size=2)
        d2 = (xx - rcx) ** 2 + (yy - rcy) ** 2
        disk = d2 <= rbc_r**2
        pale = d2 <= (0.45 * rbc_r) ** 2  # central pallor
        tint = np.array(RBC_COLOR) + rng.normal(0.0, 0.015, size=3)
        img[disk] = tint
        img[pale] = 0.55 * tint + 0.45 * np.array(BACKGROUND_COLOR)

    # WBC geometry; the cell sits near the center so augmentations have room.
    if attrs.size_wrt_rbc is SizeWrtRbc.LARGER:
        cell_r = rbc_r * rng.uniform(1.60, 1.85)
    elif attrs.size_wrt_rbc is SizeWrtRbc.NEARLY_SIMILAR:
        cell_r = rbc_r * rng.uniform(1.00, 1.15)
    else:
        cell_r = rbc_r * rng.uniform(0.65, 0.80)
    cx = s / 2.0 + rng.uniform(-0.06, 0.06) * s
    cy = s / 2.0 + rng.uniform(-0.06, 0.06) * s
    theta = rng.uniform(0, np.pi)
    ecc = rng.uniform(0.85, 1.0)
    cell = _ellipse_mask(s, cx, cy, cell_r, ecc * cell_r, theta)

    lo, hi = NC_BANDS[cell_class]
    for _ in range(20):
        nucleus = _fit_nucleus(s, attrs.nucleus_shape, cx, cy, rng.uniform(0, np.pi),
                               cell, rng.uniform(lo + 0.015, hi - 0.015))
        got = nucleus.sum() / max(cell.sum() - nucleus.sum(), 1)
        if lo < got < hi:
            break
    else:
        raise RuntimeError(f"could not fit nucleus for {cell_class.name}")
    cytoplasm = (cell & ~nucleus.astype(bool)).astype(np.uint8)

    tint = np.array(CLASS_TINT[cell_class]) + rng.normal(0.0, 0.02, size=3)
    img[cytoplasm.astype(bool)] = tint
    if attrs.granularity is Granularity.YES:
        speckle = rng.random((s, s)) < 0.25
        dots = speckle & cytoplasm.astype(bool)
        img[dots] = tint * 0.45
    nuc_tint = np.array(NUCLEUS_COLOR) + rng.normal(0.0, 0.015, size=3)
    img[nucleus.astype(bool)] = nuc_tint
    # chromatin texture
    grain = rng.normal(0.0, 0.04, size=(s, s))[..., None] * nucleus.astype(bool)[..., None]
    img += grain

    if noise_level > 0:
        img += rng.normal(0.0, 0.08 * noise_level, size=img.shape)
    pixels = np.clip(img * 255.0, 0, 255).round().astype(np.uint8)

    masks = MaskPair(cytoplasm=cytoplasm, nucleus=nucleus)
    ann = CellAnnotation(
        cell_class=cell_class,
        box=tight_box_from_masks(masks, pad_px=1),
        masks=masks,
        attributes=attrs,
    )
    return LabeledImage(pixels=pixels, annotations=[ann])


def generate_dataset(spec: GeneratorSpec) -> List[LabeledImage]:
    """Deterministic in (spec, seed); image k is seeded by (rng_seed, k)."""
    out: List[LabeledImage] = []
    index = 0
    for cell_class in CellClass:
        if cell_class is CellClass.EMPTY:
            continue
        for _ in range(spec.per_class_count.get(cell_class, 0)):
            rng = np.random.default_rng((spec.rng_seed, index))
            out.append(generate_cell(cell_class, rng, spec.image_size,
                                     spec.noise_level, spec.rbc_count_range))
            index += 1
    return out


AUGMENT_OPS = ("scale", "rotate", "translate", "hflip", "vflip")
_MAX_RETRIES = 10


def _transformed_ok(masks: MaskPair) -> bool:
    union = (masks.cytoplasm | masks.nucleus).astype(bool)
    if not union.any():
        return False
    # nothing may touch the frame border, so no part of the cell was clipped
    return not (union[0, :].any() or union[-1, :].any()
                or union[:, 0].any() or union[:, -1].any())


def _affine(img: LabeledImage, matrix: np.ndarray, offset: np.ndarray) -> LabeledImage:
    ann = img.annotations[0]
    pix = np.stack([
        ndimage.affine_transform(img.pixels[..., c].astype(np.float64), matrix, offset,
                                 order=1, mode="constant",
                                 cval=255.0 * BACKGROUND_COLOR[c])
        for c in range(3)
    ], axis=-1)
    pix = np.clip(pix, 0, 255).round().astype(np.uint8)
    # supersampled warp: estimate per-pixel area coverage on a 4x4 subpixel
    # grid, then threshold at half coverage; keeps masks binary while tracking
    # the subpixel boundary far better than nearest-neighbor (N:C drift on the
    # smallest cells would otherwise exceed a few percent)
    k = 4
    s = img.pixels.shape[0]
    sub = (np.arange(k * s) + 0.5) / k - 0.5
    oy, ox = np.meshgrid(sub, sub, indexing="ij")
    src = np.tensordot(matrix, np.stack([oy, ox]), axes=1) + offset[:, None, None]

    def _warp_mask(m: np.ndarray) -> np.ndarray:
        soft = ndimage.map_coordinates(m.astype(np.float64), src, order=1,
                                       mode="constant", cval=0.0)
        cover = soft.reshape(s, k, s, k).mean(axis=(1, 3))
        # area-preserving threshold: keep the n best-covered pixels, where n is
        # the true transformed area; a fixed 0.5 cut can coherently gain or
        # drop a whole boundary ring on near-circular cells
        n = int(round(cover.sum()))
        if n <= 0:
            return np.zeros_like(m, dtype=np.uint8)
        cut = np.partition(cover.ravel(), cover.size - n)[cover.size - n]
        return ((cover >= cut) & (cover > 0)).astype(np.uint8)

    nuc = _warp_mask(ann.masks.nucleus)
    cyto = _warp_mask(ann.masks.cytoplasm | ann.masks.nucleus) & ~nuc.astype(bool)
    cyto = cyto.astype(np.uint8)
    masks = MaskPair(cytoplasm=cyto, nucleus=nuc)
    if not _transformed_ok(masks):
        raise DegenerateAugment("cell left the frame")
    new_ann = CellAnnotation(cell_class=ann.cell_class,
                             box=tight_box_from_masks(masks, pad_px=1),
                             masks=masks, attributes=ann.attributes)
    return LabeledImage(pixels=pix, annotations=[new_ann])


def _flip(img: LabeledImage, axis: int) -> LabeledImage:
    ann = img.annotations[0]
    pix = np.flip(img.pixels, axis=axis).copy()
    masks = MaskPair(cytoplasm=np.flip(ann.masks.cytoplasm, axis=axis).copy(),
                     nucleus=np.flip(ann.masks.nucleus, axis=axis).copy())
    x0, y0, x1, y1 = ann.box.corners()
    if axis == 1:  # horizontal flip mirrors x
        box = BoundingBox((1 - x0 + 1 - x1) / 2, ann.box.cy, ann.box.w, ann.box.h)
    else:
        box = BoundingBox(ann.box.cx, (1 - y0 + 1 - y1) / 2, ann.box.w, ann.box.h)
    new_ann = CellAnnotation(cell_class=ann.cell_class, box=box, masks=masks,
                             attributes=ann.attributes)
    return LabeledImage(pixels=pix, annotations=[new_ann])


def _rot90(img: LabeledImage, k: int) -> LabeledImage:
    ann = img.annotations[0]
    pix = np.rot90(img.pixels, k=k, axes=(0, 1)).copy()
    masks = MaskPair(cytoplasm=np.rot90(ann.masks.cytoplasm, k=k).copy(),
                     nucleus=np.rot90(ann.masks.nucleus, k=k).copy())
    new_ann = CellAnnotation(cell_class=ann.cell_class,
                             box=tight_box_from_masks(masks, pad_px=1),
                             masks=masks, attributes=ann.attributes)
    return LabeledImage(pixels=pix, annotations=[new_ann])


def augment(img: LabeledImage, op: str, rng: np.random.Generator,
            angle: Optional[float] = None, factor: Optional[float] = None,
            shift: Optional[Tuple[float, float]] = None) -> LabeledImage:
    """Apply one augmentation. Pixels, masks, and box move together; the class
    and the four categorical attributes never change; N:C is recomputed from
    the transformed masks. Masks are resampled bilinearly and re-thresholded
    (stay binary), pixels use bilinear."""
    if op not in AUGMENT_OPS:
        raise ValueError(f"unknown augmentation {op!r}")
    if op == "hflip":
        return _flip(img, axis=1)
    if op == "vflip":
        return _flip(img, axis=0)

    s = img.pixels.shape[0]
    center = np.array([(s - 1) / 2.0, (s - 1) / 2.0])
    for attempt in range(_MAX_RETRIES):
        try:
            if op == "rotate":
                a = angle if angle is not None else float(rng.uniform(-45.0, 45.0))
                if a % 90 == 0:
                    return _rot90(img, k=int(a // 90) % 4)
                rad = np.deg2rad(a)
                ct, st = np.cos(rad), np.sin(rad)
                matrix = np.array([[ct, -st], [st, ct]])
                offset = center - matrix @ center
                return _affine(img, matrix, offset)
            if op == "scale":
                f = factor if factor is not None else float(rng.uniform(0.8, 1.2))
                matrix = np.array([[1 / f, 0.0], [0.0, 1 / f]])
                offset = center - matrix @ center
                return _affine(img, matrix, offset)
            # translate
            if shift is not None:
                dy, dx = shift
            else:
                dy, dx = rng.uniform(-0.15, 0.15, size=2) * s
            matrix = np.eye(2)
            return _affine(img, matrix, np.array([-dy, -dx]))
        except DegenerateAugment:
            if (op == "rotate" and angle is not None) or \
               (op == "scale" and factor is not None) or \
               (op == "translate" and shift is not None):
                raise  # fixed parameters cannot be resampled
            continue
    raise DegenerateAugment(f"{op} failed after {_MAX_RETRIES} attempts")
