"""Command-line entry point.

Subcommands: gen, train, eval, faithfulness, variant-study, predict,
gradient-check. Exit codes: 0 success, 1 usage error, 2 runtime error.
Flags mirror config fields; --config may supply defaults from a JSON file,
with explicit flags taking precedence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, faithfulness, harness, metrics, synthcell
from .core import REAL_CLASSES
from .errors import WbcxError
from .model import load_checkpoint, predict_cells
from .synthcell import GeneratorSpec


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _dataset_args(p):
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", choices=("all", "train", "test"), default="test")
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=None,
                   help="defaults to the manifest's split seed")


def _train_args(p):
    p.add_argument("--config", help="JSON file supplying training defaults")
    p.add_argument("--paper-preset", action="store_true",
                   help="200 epochs, batch 32, lr 1e-4 / backbone 1e-5")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="lr_main")
    p.add_argument("--lr-backbone", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--hidden-layers", type=int, choices=(0, 2, 4))
    p.add_argument("--d-model", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--encoder-layers", type=int)
    p.add_argument("--decoder-layers", type=int)
    p.add_argument("--num-queries", type=int)
    p.add_argument("--backbone", choices=("toy_residual_stack", "deep_residual_50"))
    p.add_argument("--empty-class-weight", type=float)


def _build_train_config(args) -> harness.TrainConfig:
    if args.paper_preset:
        config = harness.TrainConfig.paper_preset()
    else:
        config = harness.TrainConfig()
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        model_raw = raw.pop("model", {})
        weights_raw = raw.pop("loss_weights", {})
        config = replace(config, **raw)
        config = replace(config, model=replace(config.model, **model_raw),
                         loss_weights=replace(config.loss_weights, **weights_raw))
    train_fields = ("epochs", "batch_size", "lr_main", "lr_backbone",
                    "weight_decay", "validation_fraction", "seed", "grad_clip")
    updates = {f: getattr(args, f) for f in train_fields if getattr(args, f) is not None}
    if args.augment is not None:
        updates["augment"] = args.augment
    if updates:
        config = replace(config, **updates)
    model_map = {"hidden_layers": "explanation_hidden_layers", "d_model": "d_model",
                 "num_heads": "num_heads", "encoder_layers": "encoder_layers",
                 "decoder_layers": "decoder_layers", "num_queries": "num_queries",
                 "backbone": "backbone"}
    model_updates = {dst: getattr(args, src) for src, dst in model_map.items()
                     if getattr(args, src) is not None}
    if args.seed is not None:
        model_updates["seed"] = args.seed
    if model_updates:
        config = replace(config, model=replace(config.model, **model_updates))
    if args.empty_class_weight is not None:
        config = replace(config, loss_weights=replace(
            config.loss_weights, empty_class_weight=args.empty_class_weight))
    return config


def _load_split(args):
    items = dataio.load_dataset(args.data)
    if args.split == "all":
        return items
    seed = args.split_seed
    if seed is None:
        with open(Path(args.data) / "manifest") as fh:
            seed = json.load(fh).get("split_seed", 0)
    train_items, test_items = dataio.split_train_test(
        items, fraction=args.split_fraction, seed=seed)
    return train_items if args.split == "train" else test_items


def cmd_gen(args) -> int:
    counts = {c: args.per_class for c in REAL_CLASSES}
    spec = GeneratorSpec(image_size=args.image_size, per_class_count=counts,
                         rng_seed=args.seed, noise_level=args.noise)
    items = synthcell.generate_dataset(spec)
    manifest = dataio.save_dataset(items, args.out, split_seed=args.seed)
    print(f"wrote {len(manifest.items)} images to {args.out} "
          f"({args.per_class} per class, seed {args.seed})")
    return 0


def cmd_train(args) -> int:
    config = _build_train_config(args)
    args.split = getattr(args, "split", "train")
    train_items = _load_split(args)
    print(f"training on {len(train_items)} images "
          f"({config.epochs} epochs, batch {config.batch_size})")
    harness.train(train_items, config, run_dir=args.out, log=print)
    print(f"run written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    items = _load_split(args)
    art = harness.collect_predictions(state, items)
    report = harness.report_from_artifacts(art)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.txt")
    metrics.save_roc_plots(art.attr_probs, art.gt_attrs, out / "roc")
    metrics.save_classwise_mse_plot(report.classwise_nc_mse, out / "classwise_nc_mse.png")
    print(f"accuracy {report.accuracy:.4f}  jaccard {report.mean_jaccard:.4f}  "
          f"dice {report.mean_dice:.4f}  nc_mse {report.nc_mse:.4f}")
    print(f"report written to {out / 'report.txt'}")
    return 0


def cmd_faithfulness(args) -> int:
    state = load_checkpoint(args.checkpoint)
    items = _load_split(args)
    art = harness.collect_predictions(state, items)
    gt_table = faithfulness.ground_truth_association(items)
    model_table = faithfulness.model_association(art.pred_classes, art.pred_attrs)
    report = faithfulness.compare_associations(model_table, gt_table, threshold=args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    faithfulness.save_divergence_report(report, out / "divergence.txt")
    faithfulness.save_association_charts(model_table, gt_table, out / "charts")
    verdict = "faithful" if report.faithful else "NOT faithful"
    print(f"{verdict} at TV threshold {report.threshold} "
          f"(worst divergence {report.worst():.4f})")
    return 0


def cmd_variant_study(args) -> int:
    config = _build_train_config(args)
    args.split = "all"
    items = _load_split(args)
    options = tuple(int(v) for v in args.options.split(","))
    table = harness.variant_study(items, config, hidden_layer_options=options, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "variant_study.json", "w") as fh:
        json.dump({"rows": table["rows"],
                   "columns": {str(k): v for k, v in table["columns"].items()},
                   "best_by_f1": table["best_by_f1"]}, fh, indent=1)
    header = "metric".ljust(40) + "".join(f"{h:>12}" for h in options)
    print(header)
    for row in table["rows"]:
        print(row.ljust(40) + "".join(f"{table['columns'][h][row]:>12.4f}" for h in options))
    print(f"best by F1: {table['best_by_f1']} hidden layers")
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    state = load_checkpoint(args.checkpoint)
    try:
        pixels = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        print(f"error: cannot read image {args.image}: {exc}", file=sys.stderr)
        return 2
    threshold = None if args.single_cell else args.threshold
    cells = predict_cells(state, pixels, confidence_threshold=threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    overlay = pixels.copy()
    for rank, (cell, conf) in enumerate(cells):
        lines.append(f"cell {rank}: class = {cell.cell_class.name.lower()} "
                     f"(confidence {conf:.3f})")
        lines.append(f"  granularity    = {cell.attributes.granularity.name.lower()}")
        lines.append(f"  cytoplasm_color = {cell.attributes.cytoplasm_color.name.lower()}")
        lines.append(f"  nucleus_shape  = {cell.attributes.nucleus_shape.name.lower()}")
        lines.append(f"  size_wrt_rbc   = {cell.attributes.size_wrt_rbc.name.lower()}")
        nc = "undefined" if cell.nc_ratio is None else f"{cell.nc_ratio:.4f}"
        lines.append(f"  nc_ratio       = {nc}")
        overlay = _draw_overlay(overlay, cell)
    report_path = out / "report.txt"
    report_path.write_text("\n".join(lines) + "\n")
    Image.fromarray(overlay).save(out / "overlay.png")
    print("\n".join(lines))
    print(f"overlay and report written to {out}")
    return 0


def _draw_overlay(pixels: np.ndarray, cell) -> np.ndarray:
    from scipy import ndimage

    out = pixels.copy()
    h, w = out.shape[:2]
    x0, y0, x1, y1 = cell.box.corners()
    c0, r0 = int(round(x0 * w)), int(round(y0 * h))
    c1, r1 = min(w - 1, int(round(x1 * w))), min(h - 1, int(round(y1 * h)))
    out[r0, c0:c1 + 1] = (0, 255, 0)
    out[r1, c0:c1 + 1] = (0, 255, 0)
    out[r0:r1 + 1, c0] = (0, 255, 0)
    out[r0:r1 + 1, c1] = (0, 255, 0)
    for mask, color in ((cell.masks.cytoplasm, (255, 255, 0)),
                        (cell.masks.nucleus, (255, 0, 255))):
        m = mask.astype(bool)
        contour = m & ~ndimage.binary_erosion(m)
        out[contour] = color
    return out


def cmd_gradient_check(args) -> int:
    report = harness.gradient_check(n_points=args.points, seed=args.seed)
    all_passed = True
    for name, entry in report.items():
        status = "PASS" if entry["passed"] else "FAIL"
        all_passed &= entry["passed"]
        print(f"{status}  {name:<20} max rel err {entry['max_rel_err']:.3e} "
              f"over {entry['n_points']} points")
    print("all gradients verified" if all_passed else "gradient check FAILED")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="wbcx",
                     description="Explainable white-blood-cell set prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="generate a synthetic dataset")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("all", "train"), default="train")
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=None)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _dataset_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("faithfulness", help="association divergence analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=faithfulness.DEFAULT_TV_THRESHOLD)
    _dataset_args(p)
    p.set_defaults(func=cmd_faithfulness)

    p = sub.add_parser("variant-study",
                       help="train explanation-branch variants and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--options", default="0,2,4")
    _train_args(p)
    p.set_defaults(func=cmd_variant_study)

    p = sub.add_parser("predict", help="per-image report and overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--single-cell", action="store_true",
                   help="emit the single best slot regardless of threshold")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradient-check", help="finite-difference loss verification")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradient_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WbcxError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
