"""On-disk dataset format, loading, stratified splitting, and k-fold plans.

Layout under a dataset root:

    manifest                  JSON: version, item list, split seed
    images/{id}.png           8-bit RGB, lossless
    masks/{id}_c{j}_cyto.png  0/255 single channel, one per cell
    masks/{id}_c{j}_nuc.png
    annotations/{id}.json     class, box (center form, 6 decimals),
                              attribute strings, nc_ratio per cell

nc_ratio is stored and revalidated against the masks on load; disagreement is
an error, never a silent fix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import (
    ATTRIBUTE_ENUMS,
    ATTRIBUTE_NAMES,
    BoundingBox,
    CellAnnotation,
    CellClass,
    ExplanationAttributes,
    MaskPair,
    compute_nc_ratio,
)
from .errors import ClassTooSmall, CorruptMask, MissingFile, SchemaMismatch
from .synthcell import LabeledImage

FORMAT_VERSION = "wbcx-dataset-1"


@dataclass
class DatasetManifest:
    version: str
    items: List[Dict[str, str]]
    split_seed: int = 0


@dataclass
class FoldPlan:
    k: int
    assignments: Dict[int, int]  # item index -> fold index

    def fold_indices(self, fold: int) -> List[int]:
        return [i for i, f in self.assignments.items() if f == fold]


def _attrs_to_strings(attrs: ExplanationAttributes) -> Dict[str, str]:
    return {name: getattr(attrs, name).name.lower()
            for name in ATTRIBUTE_NAMES}


def _attrs_from_strings(record: Dict[str, str]) -> ExplanationAttributes:
    values = []
    for name, enum_cls in zip(ATTRIBUTE_NAMES, ATTRIBUTE_ENUMS):
        try:
            values.append(enum_cls[record[name].upper()])
        except KeyError as exc:
            raise SchemaMismatch(f"unknown {name} value {record.get(name)!r}") from exc
    return ExplanationAttributes(*values)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def _load_mask(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    return (np.asarray(Image.open(path), dtype=np.uint8) > 127).astype(np.uint8)


def save_dataset(items: Sequence[LabeledImage], root_path, split_seed: int = 0) -> DatasetManifest:
    root = Path(root_path)
    for sub in ("images", "masks", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest_items = []
    for idx, item in enumerate(items):
        stem = f"{idx:06d}"
        image_rel = f"images/{stem}.png"
        ann_rel = f"annotations/{stem}.json"
        Image.fromarray(item.pixels, mode="RGB").save(root / image_rel)
        cells = []
        for j, ann in enumerate(item.annotations):
            cyto_rel = f"masks/{stem}_c{j}_cyto.png"
            nuc_rel = f"masks/{stem}_c{j}_nuc.png"
            _save_mask(root / cyto_rel, ann.masks.cytoplasm)
            _save_mask(root / nuc_rel, ann.masks.nucleus)
            cells.append({
                "cell_class": ann.cell_class.name.lower(),
                "box": [round(v, 6) for v in (ann.box.cx, ann.box.cy, ann.box.w, ann.box.h)],
                "attributes": _attrs_to_strings(ann.attributes),
                "nc_ratio": ann.nc_ratio,
                "cytoplasm_mask": cyto_rel,
                "nucleus_mask": nuc_rel,
            })
        with open(root / ann_rel, "w") as fh:
            json.dump({"cells": cells}, fh, indent=1)
        manifest_items.append({"image_path": image_rel, "annotation_path": ann_rel})
    manifest = DatasetManifest(version=FORMAT_VERSION, items=manifest_items,
                               split_seed=split_seed)
    with open(root / "manifest", "w") as fh:
        json.dump({"version": manifest.version, "items": manifest.items,
                   "split_seed": manifest.split_seed}, fh, indent=1)
    return manifest


def load_dataset(root_path) -> List[LabeledImage]:
    root = Path(root_path)
    manifest_path = root / "manifest"
    if not manifest_path.exists():
        raise MissingFile(str(manifest_path))
    with open(manifest_path) as fh:
        raw = json.load(fh)
    if raw.get("version") != FORMAT_VERSION:
        raise SchemaMismatch(f"unrecognized dataset version {raw.get('version')!r}")
    out: List[LabeledImage] = []
    for entry in raw["items"]:
        image_path = root / entry["image_path"]
        ann_path = root / entry["annotation_path"]
        if not image_path.exists():
            raise MissingFile(str(image_path))
        if not ann_path.exists():
            raise MissingFile(str(ann_path))
        pixels = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)
        with open(ann_path) as fh:
            record = json.load(fh)
        annotations = []
        for cell in record["cells"]:
            masks = MaskPair(cytoplasm=_load_mask(root / cell["cytoplasm_mask"]),
                             nucleus=_load_mask(root / cell["nucleus_mask"]))
            if masks.shape != pixels.shape[:2]:
                raise CorruptMask(
                    f"mask {masks.shape} disagrees with image {pixels.shape[:2]}")
            stored_nc = float(cell["nc_ratio"])
            if abs(stored_nc - compute_nc_ratio(masks)) > 1e-9:
                raise CorruptMask(f"stored nc_ratio {stored_nc} disagrees with masks")
            annotations.append(CellAnnotation(
                cell_class=CellClass[cell["cell_class"].upper()],
                box=BoundingBox(*cell["box"]),
                masks=masks,
                attributes=_attrs_from_strings(cell["attributes"]),
                nc_ratio=stored_nc,
            ))
        out.append(LabeledImage(pixels=pixels, annotations=annotations))
    return out


def _primary_class(item: LabeledImage) -> CellClass:
    return item.annotations[0].cell_class


def _class_groups(items: Sequence[LabeledImage]) -> Dict[CellClass, List[int]]:
    groups: Dict[CellClass, List[int]] = {}
    for i, item in enumerate(items):
        groups.setdefault(_primary_class(item), []).append(i)
    return groups


def split_train_test(items: Sequence[LabeledImage], fraction: float = 0.8,
                     seed: int = 0) -> Tuple[List[LabeledImage], List[LabeledImage]]:
    """Stratified random split; the global train count is round(fraction * N)
    with per-class counts allocated by largest remainder."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    groups = _class_groups(items)
    for cls, idxs in groups.items():
        if len(idxs) < 2:
            raise ClassTooSmall(f"{cls.name} has only {len(idxs)} item(s)")
    rng = np.random.default_rng(seed)
    target_train = round(fraction * len(items))
    classes = sorted(groups, key=lambda c: c.value)
    quotas = {c: fraction * len(groups[c]) for c in classes}
    take = {c: int(np.floor(quotas[c])) for c in classes}
    # never strip a class entirely from either side
    for c in classes:
        take[c] = min(max(take[c], 1), len(groups[c]) - 1)
    leftovers = sorted(classes, key=lambda c: quotas[c] - take[c], reverse=True)
    i = 0
    while sum(take.values()) < target_train and i < len(leftovers):
        c = leftovers[i]
        if take[c] < len(groups[c]) - 1:
            take[c] += 1
        i += 1
    train_idx, test_idx = [], []
    for c in classes:
        idxs = np.array(groups[c])
        rng.shuffle(idxs)
        train_idx.extend(idxs[: take[c]].tolist())
        test_idx.extend(idxs[take[c]:].tolist())
    return [items[i] for i in sorted(train_idx)], [items[i] for i in sorted(test_idx)]


def make_folds(items: Sequence[LabeledImage], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold partition; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    groups = _class_groups(items)
    for cls, idxs in groups.items():
        if len(idxs) < k:
            raise ClassTooSmall(f"{cls.name} has {len(idxs)} item(s), fewer than k={k}")
    rng = np.random.default_rng(seed)
    ordered: List[int] = []
    for cls in sorted(groups, key=lambda c: c.value):
        idxs = np.array(groups[cls])
        rng.shuffle(idxs)
        ordered.extend(idxs.tolist())
    assignments = {item_idx: pos % k for pos, item_idx in enumerate(ordered)}
    return FoldPlan(k=k, assignments=assignments)
