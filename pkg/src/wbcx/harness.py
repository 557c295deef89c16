"""Training loop, evaluation, cross-validation, the explanation-branch variant
study, and the finite-difference gradient verification suite."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import assignment, dataio, metrics, synthcell
from .core import (
    BoundingBox,
    CellClass,
    MaskPair,
    MatchResult,
    binarize_mask,
    center_to_corners,
    softmax,
)
from .errors import Diverged, EmptyInput
from .losses import (
    LossBreakdown,
    LossWeights,
    SlotTensors,
    box_loss,
    composite_loss,
    dice_loss,
    explanation_loss,
    focal_loss,
    giou,
    prediction_loss,
)
from .model import (
    ModelConfig,
    ModelState,
    batch_slots,
    build_model,
    forward,
    forward_tensors,
    images_to_tensor,
    save_checkpoint,
)
from .synthcell import AUGMENT_OPS, LabeledImage


@dataclass(frozen=True)
class TrainConfig:
    """Toy schedule by default; paper_preset() gives the reference recipe
    (200 epochs, batch 32, lr 1e-4 with backbone at 1e-5, weight decay 1e-4)."""

    epochs: int = 30
    batch_size: int = 16
    lr_main: float = 1.5e-3
    lr_backbone: float = 1.5e-3
    weight_decay: float = 1e-4
    optimizer: str = "adaptive_decoupled_decay"  # AdamW
    augment: bool = False
    augment_ops: Tuple[str, ...] = ("hflip", "vflip", "translate")
    validation_fraction: float = 0.15
    seed: int = 0
    grad_clip: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_main <= 0 or self.lr_backbone <= 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")
        if self.optimizer != "adaptive_decoupled_decay":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if any(op not in AUGMENT_OPS for op in self.augment_ops):
            raise ValueError("unknown augmentation op")

    @staticmethod
    def paper_preset(**overrides) -> "TrainConfig":
        base = TrainConfig(epochs=200, batch_size=32, lr_main=1e-4,
                           lr_backbone=1e-5, weight_decay=1e-4, augment=True)
        return replace(base, **overrides) if overrides else base


def _match_image(slots: SlotTensors, gts, weights: LossWeights) -> MatchResult:
    if not gts:
        return MatchResult(sigma={}, n_slots=slots.n_slots)
    gt_classes = np.array([g.cell_class.value for g in gts], dtype=np.int64)
    gt_boxes = np.stack([g.box.as_array() for g in gts])
    cost = assignment.cost_matrix_arrays(
        gt_classes, gt_boxes,
        slots.class_logits.detach().cpu().numpy().astype(np.float64),
        slots.boxes.detach().cpu().numpy().astype(np.float64),
        weights)
    return assignment.hungarian(cost)


def _batch_loss(state: ModelState, items: Sequence[LabeledImage],
                weights: LossWeights) -> LossBreakdown:
    """Mean composite loss over a batch of labeled images."""
    images = images_to_tensor([it.pixels for it in items])
    outputs = forward_tensors(state, images)
    parts = {k: [] for k in ("prediction", "box", "segmentation", "explanation", "total")}
    for b, item in enumerate(items):
        slots = batch_slots(outputs, b)
        match = _match_image(slots, item.annotations, weights)
        breakdown = composite_loss(slots, item.annotations, match, weights)
        for k in parts:
            parts[k].append(getattr(breakdown, k))
    mean = {k: torch.stack(v).mean() for k, v in parts.items()}
    return LossBreakdown(**mean)


def _augment_item(item: LabeledImage, ops: Tuple[str, ...],
                  rng: np.random.Generator) -> LabeledImage:
    if rng.random() < 0.5:
        return item
    op = ops[int(rng.integers(len(ops)))]
    try:
        return synthcell.augment(item, op, rng)
    except synthcell.DegenerateAugment:
        return item


def train(train_items: Sequence[LabeledImage], config: TrainConfig,
          run_dir: Optional[str] = None,
          log: Optional[Callable[[str], None]] = None) -> Tuple[ModelState, List[Dict]]:
    """Returns the checkpoint with minimum validation total loss and the
    per-epoch train/validation loss history."""
    if not train_items:
        raise EmptyInput("empty training set")
    torch.manual_seed(config.seed)
    fit_items, val_items = dataio.split_train_test(
        list(train_items), fraction=1.0 - config.validation_fraction, seed=config.seed)
    state = build_model(config.model)
    net = state.network
    backbone_params = list(net.backbone.parameters())
    backbone_ids = {id(p) for p in backbone_params}
    other_params = [p for p in net.parameters() if id(p) not in backbone_ids]
    opt = torch.optim.AdamW(
        [{"params": other_params, "lr": config.lr_main},
         {"params": backbone_params, "lr": config.lr_backbone}],
        weight_decay=config.weight_decay)

    history: List[Dict] = []
    best_val = math.inf
    best_weights = copy.deepcopy(net.state_dict())
    weights = config.loss_weights
    n = len(fit_items)
    for epoch in range(config.epochs):
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(n)
        net.train()
        train_parts = []
        for start in range(0, n, config.batch_size):
            batch = [fit_items[i] for i in order[start:start + config.batch_size]]
            if config.augment:
                batch = [_augment_item(it, config.augment_ops, rng) for it in batch]
            opt.zero_grad()
            breakdown = _batch_loss(state, batch, weights)
            if not torch.isfinite(breakdown.total):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            breakdown.total.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            opt.step()
            train_parts.append(breakdown.as_floats())
        net.eval()
        with torch.no_grad():
            val_parts = []
            for start in range(0, len(val_items), config.batch_size):
                val_parts.append(_batch_loss(
                    state, val_items[start:start + config.batch_size], weights).as_floats())
        entry = {
            "epoch": epoch,
            "train": _mean_breakdown(train_parts),
            "val": _mean_breakdown(val_parts),
        }
        history.append(entry)
        if log:
            log(f"epoch {epoch}: train {entry['train']['total']:.4f} "
                f"val {entry['val']['total']:.4f}")
        if entry["val"]["total"] < best_val:
            best_val = entry["val"]["total"]
            best_weights = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_weights)
    state.metadata.update({"best_val_total": best_val,
                           "train_config": _config_dict(config)})
    if run_dir is not None:
        _write_run(run_dir, state, config, history)
    return state, history


def _mean_breakdown(parts: List[LossBreakdown]) -> Dict[str, float]:
    keys = ("prediction", "box", "segmentation", "explanation", "total")
    return {k: float(np.mean([getattr(p, k) for p in parts])) for k in keys}


def _config_dict(config: TrainConfig) -> Dict:
    d = asdict(config)
    d["loss_weights"] = asdict(config.loss_weights)
    d["model"] = asdict(config.model)
    return d


def _write_run(run_dir, state: ModelState, config: TrainConfig, history) -> None:
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "config.json", "w") as fh:
        json.dump(_config_dict(config), fh, indent=1)
    with open(run / "history.json", "w") as fh:
        json.dump(history, fh, indent=1)
    save_checkpoint(state, run / "best.ckpt", extra_metadata={"epochs": config.epochs})


@dataclass
class EvalArtifacts:
    """Everything evaluate() extracted per test sample, for reuse by the
    faithfulness and independence analyses."""

    pred_classes: List[CellClass]
    gt_classes: List[CellClass]
    pred_boxes: List[BoundingBox]
    gt_boxes: List[BoundingBox]
    pred_masks: List[MaskPair]
    gt_masks: List[MaskPair]
    pred_attrs: List[Tuple[int, int, int, int]]
    gt_attrs: List[Tuple[int, int, int, int]]
    attr_probs: List[np.ndarray]  # four (n, k) softmax score arrays
    pred_nc: List[Optional[float]]
    gt_nc: List[float]


def collect_predictions(state: ModelState, test_items: Sequence[LabeledImage],
                        batch_size: int = 32, mask_threshold: float = 0.5) -> EvalArtifacts:
    """Single-cell pairing: the highest-confidence non-EMPTY slot of each image
    is evaluated against its single ground truth."""
    if not test_items:
        raise EmptyInput("empty test set")
    art = EvalArtifacts([], [], [], [], [], [], [], [], [], [], [])
    attr_probs = [[] for _ in range(4)]
    for start in range(0, len(test_items), batch_size):
        chunk = test_items[start:start + batch_size]
        preds = forward(state, [it.pixels for it in chunk])
        for item, p in zip(chunk, preds):
            gt = item.annotations[0]
            probs = softmax(p.class_scores, axis=-1)
            j = int(np.argmax(probs[:, :-1].max(axis=1)))
            art.pred_classes.append(CellClass(int(np.argmax(probs[j, :-1]))))
            art.gt_classes.append(gt.cell_class)
            art.pred_boxes.append(p.slot_box(j))
            art.gt_boxes.append(gt.box)
            masks = MaskPair(cytoplasm=binarize_mask(p.soft_masks[j, 0], mask_threshold),
                             nucleus=binarize_mask(p.soft_masks[j, 1], mask_threshold))
            art.pred_masks.append(masks)
            art.gt_masks.append(gt.masks)
            art.pred_attrs.append(tuple(int(np.argmax(a[j])) for a in p.attribute_scores))
            art.gt_attrs.append(gt.attributes.as_indices())
            for k in range(4):
                attr_probs[k].append(softmax(p.attribute_scores[k][j]))
            cyto = int(masks.cytoplasm.sum())
            art.pred_nc.append(float(masks.nucleus.sum()) / cyto if cyto > 0 else None)
            art.gt_nc.append(gt.nc_ratio)
    art.attr_probs = [np.stack(v) for v in attr_probs]
    return art


def evaluate(state: ModelState, test_items: Sequence[LabeledImage]) -> metrics.MetricsReport:
    art = collect_predictions(state, test_items)
    return report_from_artifacts(art)


def report_from_artifacts(art: EvalArtifacts) -> metrics.MetricsReport:
    from .faithfulness import independence_analysis

    accuracy, precision, f1, confusion = metrics.classification_metrics(
        art.pred_classes, art.gt_classes)
    # samples whose predicted cytoplasm came out empty have no N:C; skip them
    nc_pairs = [(p, g, c) for p, g, c in zip(art.pred_nc, art.gt_nc, art.gt_classes)
                if p is not None]
    if nc_pairs:
        pr, gr, gc = zip(*nc_pairs)
        mse = metrics.nc_mse(pr, gr)
        classwise = metrics.classwise_nc_mse(pr, gr, gc)
        var = float(np.var(gr))
        normalized = mse / var if var > 0 else None
    else:
        mse, classwise, normalized = float("nan"), {}, None
    auc_table = metrics.attribute_auc_table(art.attr_probs, art.gt_attrs, split="all")
    auc_table.update(independence_analysis(art.pred_classes, art.attr_probs,
                                           art.gt_classes, art.gt_attrs))
    return metrics.MetricsReport(
        accuracy=accuracy,
        macro_precision=precision,
        macro_f1=f1,
        mean_jaccard=metrics.mean_box_jaccard(art.pred_boxes, art.gt_boxes),
        mean_dice=metrics.mean_instance_dice(art.pred_masks, art.gt_masks),
        attribute_accuracy=metrics.attribute_accuracy(art.pred_attrs, art.gt_attrs),
        nc_mse=mse,
        nc_mse_normalized=normalized,
        classwise_nc_mse=classwise,
        auc_table=auc_table,
        confusion=confusion,
    )


def cross_validate(items: Sequence[LabeledImage], k: int, config: TrainConfig,
                   log: Optional[Callable[[str], None]] = None):
    """k disjoint train/eval runs; the summary aggregates each metric as mean
    and sample standard deviation."""
    plan = dataio.make_folds(list(items), k=k, seed=config.seed)
    reports = []
    for fold in range(k):
        test_idx = set(plan.fold_indices(fold))
        train_items = [it for i, it in enumerate(items) if i not in test_idx]
        test_items = [it for i, it in enumerate(items) if i in test_idx]
        state, _ = train(train_items, config, log=log)
        reports.append(evaluate(state, test_items))
        if log:
            log(f"fold {fold}: accuracy {reports[-1].accuracy:.4f}")
    return reports, summarize_reports(reports)


SUMMARY_KEYS = ("accuracy", "macro_precision", "macro_f1",
                "mean_jaccard", "mean_dice", "nc_mse")


def summarize_reports(reports: Sequence[metrics.MetricsReport]) -> Dict[str, Tuple[float, float]]:
    """Mean and sample standard deviation per metric (ddof=1; 0 for one report)."""
    summary = {}
    for key in SUMMARY_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        summary[key] = (float(vals.mean()), std)
    for i, name in enumerate(("granularity", "cytoplasm_color", "nucleus_shape",
                              "size_wrt_rbc")):
        vals = np.array([r.attribute_accuracy[i] for r in reports], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        summary[f"attribute_accuracy.{name}"] = (float(vals.mean()), std)
    return summary


VARIANT_ROWS = ("mean_dice", "mean_jaccard", "accuracy", "macro_precision", "macro_f1",
                "attribute_accuracy.granularity", "attribute_accuracy.cytoplasm_color",
                "attribute_accuracy.nucleus_shape", "attribute_accuracy.size_wrt_rbc",
                "nc_mse")


def _report_row(report: metrics.MetricsReport, row: str) -> float:
    if row.startswith("attribute_accuracy."):
        idx = ("granularity", "cytoplasm_color", "nucleus_shape",
               "size_wrt_rbc").index(row.split(".", 1)[1])
        return report.attribute_accuracy[idx]
    return getattr(report, row)


def variant_study(items: Sequence[LabeledImage], config: TrainConfig,
                  hidden_layer_options: Sequence[int] = (0, 2, 4),
                  log: Optional[Callable[[str], None]] = None) -> Dict:
    """Train one model per explanation-branch depth with a shared split and
    seed; the best variant is the one with the highest macro F1."""
    train_items, test_items = dataio.split_train_test(list(items), fraction=0.8,
                                                      seed=config.seed)
    columns: Dict[int, Dict[str, float]] = {}
    f1s: Dict[int, float] = {}
    for h in hidden_layer_options:
        cfg = replace(config, model=replace(config.model, explanation_hidden_layers=h))
        state, _ = train(train_items, cfg, log=log)
        report = evaluate(state, test_items)
        columns[h] = {row: _report_row(report, row) for row in VARIANT_ROWS}
        f1s[h] = report.macro_f1
        if log:
            log(f"variant {h} hidden layers: F1 {f1s[h]:.4f}")
    best = max(f1s, key=lambda h: (f1s[h], -h))
    return {"rows": list(VARIANT_ROWS), "columns": columns, "best_by_f1": best}


# ---------------------------------------------------------------------------
# Gradient verification


def finite_difference_gradient(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences, elementwise; x must be float64."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_gradient_error(f, x: torch.Tensor, eps: float = 1e-5) -> float:
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    analytic, = torch.autograd.grad(out, x)
    numeric = finite_difference_gradient(f, x.detach().clone(), eps=eps)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.tensor(1e-6, dtype=x.dtype))
    return float(((analytic - numeric).abs() / denom).max())


def _random_overlapping_boxes(rng: np.random.Generator):
    """Two center-form boxes with a positive overlap margin and L1 components
    bounded away from zero (so |.| stays differentiable)."""
    while True:
        a = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65),
                      rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.5)])
        b = a + rng.uniform(0.02, 0.08, size=4) * rng.choice([-1.0, 1.0], size=4)
        ax = np.array(np.clip(a, 0.05, 0.95))
        bx = np.array(np.clip(b, 0.05, 0.95))
        corners_a = np.array(center_to_corners(*ax))
        corners_b = np.array(center_to_corners(*bx))
        if np.all(np.abs(ax - bx) > 0.005) and np.all(np.abs(corners_a - corners_b) > 0.003):
            ca, cb = torch.tensor(ax), torch.tensor(bx)
            if float(giou(ca, cb)) > 0.05:
                return ca, cb


def gradient_check(n_points: int = 100, seed: int = 0,
                   tolerance: float = 1e-4) -> Dict[str, Dict]:
    """Finite-difference verification of every loss component and the full
    composite at random non-degenerate points. Failures are reported, not
    raised."""
    rng = np.random.default_rng(seed)
    weights = LossWeights()
    report: Dict[str, Dict] = {}

    def run(name, sampler):
        worst = 0.0
        for _ in range(n_points):
            f, x = sampler()
            worst = max(worst, max_relative_gradient_error(f, x))
        report[name] = {"max_rel_err": worst, "n_points": n_points,
                        "passed": worst <= tolerance}

    def sample_prediction():
        logits = torch.tensor(rng.uniform(-2, 2, size=(4, 11)))
        gts = [_dummy_gt(rng, cls=int(rng.integers(0, 10)))]
        match = MatchResult(sigma={0: int(rng.integers(0, 4))}, n_slots=4)
        return (lambda x: prediction_loss(x, gts, match, weights)), logits

    def sample_giou():
        a, b = _random_overlapping_boxes(rng)
        return (lambda x: giou(a, x)), b

    def sample_box():
        a, b = _random_overlapping_boxes(rng)
        return (lambda x: box_loss(a, x, weights)), b

    def sample_dice():
        soft = torch.tensor(rng.uniform(0.05, 0.95, size=(8, 8)))
        target = torch.tensor((rng.random((8, 8)) > 0.5).astype(np.float64))
        return (lambda x: dice_loss(x, target)), soft

    def sample_focal():
        soft = torch.tensor(rng.uniform(0.05, 0.95, size=(8, 8)))
        target = torch.tensor((rng.random((8, 8)) > 0.5).astype(np.float64))
        return (lambda x: focal_loss(x, target, weights.focal_gamma,
                                     weights.focal_alpha)), soft

    def sample_explanation():
        flat = torch.tensor(rng.uniform(-2, 2, size=10))
        targets = [int(rng.integers(0, k)) for k in (2, 2, 3, 3)]

        def f(x):
            parts = [x[0:2], x[2:4], x[4:7], x[7:10]]
            return explanation_loss(parts, targets, weights)

        return f, flat

    def sample_composite():
        ms = 4  # small masks keep the full elementwise sweep inside the time budget
        gt = _dummy_gt(rng, cls=int(rng.integers(0, 10)), mask_size=ms)
        n = 2
        base_logits = rng.uniform(-2, 2, size=(n, 11))
        base_attr = rng.uniform(-2, 2, size=(n, 10))
        # offsets bounded away from zero keep the L1 term differentiable
        offsets = rng.uniform(0.01, 0.05, size=(n, 4)) * rng.choice([-1.0, 1.0], size=(n, 4))
        base_boxes = np.clip(np.tile(gt.box.as_array(), (n, 1)) + offsets, 0.06, 0.94)
        base_masks = rng.uniform(0.05, 0.95, size=(n, 2, ms, ms))
        match = MatchResult(sigma={0: 1}, n_slots=n)
        x0 = torch.tensor(np.concatenate([
            base_logits.ravel(), base_boxes.ravel(), base_masks.ravel(),
            base_attr.ravel()]))

        def f(x):
            off = 0
            logits = x[off:off + n * 11].reshape(n, 11); off += n * 11
            boxes = x[off:off + n * 4].reshape(n, 4); off += n * 4
            masks = x[off:off + n * 2 * ms * ms].reshape(n, 2, ms, ms); off += n * 2 * ms * ms
            attr = x[off:].reshape(n, 10)
            slots = SlotTensors(
                class_logits=logits, boxes=boxes, mask_probs=masks,
                attr_logits=(attr[:, 0:2], attr[:, 2:4], attr[:, 4:7], attr[:, 7:10]))
            return composite_loss(slots, [gt], match, weights).total

        return f, x0

    run("prediction_loss", sample_prediction)
    run("giou", sample_giou)
    run("box_loss", sample_box)
    run("dice_loss", sample_dice)
    run("focal_loss", sample_focal)
    run("explanation_loss", sample_explanation)
    run("composite_loss", sample_composite)
    return report


def _dummy_gt(rng: np.random.Generator, cls: int, mask_size: int = 8):
    """Random non-degenerate ground-truth cell for gradient sampling."""
    from .core import CellAnnotation, ExplanationAttributes

    cyto = (rng.random((mask_size, mask_size)) > 0.5).astype(np.uint8)
    if cyto.sum() == 0:
        cyto[0, 0] = 1
    nuc = ((rng.random((mask_size, mask_size)) > 0.5) & ~cyto.astype(bool)).astype(np.uint8)
    attrs = ExplanationAttributes.from_indices(
        [int(rng.integers(0, k)) for k in (2, 2, 3, 3)])
    box = BoundingBox(rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6),
                      rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5))
    return CellAnnotation(cell_class=CellClass(cls), box=box,
                          masks=MaskPair(cytoplasm=cyto, nucleus=nuc), attributes=attrs)
