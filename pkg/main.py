#!/usr/bin/env python3
"""
Main entry point for the pathogen detection engine.

Wires the pipeline into subcommands:
synth -> extract -> train -> quantize -> finetune -> detect / eval / bench,
plus infer and inspect. Every run that writes files also writes a manifest
next to its primary output.
"""

import argparse
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional

import numpy as np

from bench import bench_inference, print_bench_report
from config import VERSION, Config, load_config
from dataset import (
    AnnotatedImage,
    PatchSet,
    augment_positives,
    extract_patches,
    load_annotations,
    load_patches,
    load_truth_boxes,
    rebalance,
    save_patches,
    split,
)
from detect import (
    DetectionConfig,
    detect_images,
    mine_hard_negatives,
    render_detections,
    total_match,
    write_detections,
)
from errors import EngineError, ModelFormatError
from evaluate import confusion_at, evaluate, export_curves, print_eval_report, score_patches
from manifest import RunManifest, load_manifest, manifest_path
from model_io import FORMAT_VERSION, load_model, save_model
from network import (
    TrainingConfig,
    config_from_settings,
    dump_activations,
    frozen_parameter_names,
    init_model,
    predict_scores,
    train,
)
from quantize import (
    QuantizeConfig,
    QuantizedModel,
    as_model_state,
    compression_report,
    finetune,
    load_any_model,
    model_size,
    print_compression_report,
    quantize_model,
    save_quantized,
)
from raster import load_raster
from stats import format_table, print_training_summary
from synth import SynthConfig, generate_synthetic, write_synthetic
from utils import derive_seed, ensure_parent_dir, format_kb, format_number, write_json, write_json_lines

logger = logging.getLogger(__name__)

DEFAULTS = Config()


class UsageError(Exception):
    """Bad command-line usage (exit code 1)."""
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that exits with code 1 and lists the valid flags on usage errors."""

    def error(self, message: str):
        flags = sorted({opt for action in self._actions for opt in action.option_strings})
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        if flags:
            sys.stderr.write(f"valid flags: {' '.join(flags)}\n")
        sys.exit(1)


def _require_file(path: Optional[str], flag: str) -> str:
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.exists(path):
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _print_header(title: str, items: Dict[str, Any]) -> None:
    print(f"\n{'=' * 60}")
    print(title)
    print(f"{'=' * 60}")
    for key, value in items.items():
        print(f"{key + ':':<9} {value}")
    print(f"{'=' * 60}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, config: Config, run: RunManifest) -> str:
    cfg = SynthConfig.from_settings(config.synth, config.seed)
    _print_header("SYNTHETIC DATA", {"Output": args.out, "Images": args.images, "Seed": config.seed})

    print("Step 1: Generating images...")
    images = generate_synthetic(cfg, args.images)
    blobs = sum(len(image.boxes) for image in images)
    print(f"  Generated {len(images)} images with {blobs} annotated blobs")

    print("\nStep 2: Writing files...")
    annotations = write_synthetic(images, args.out)
    print(f"  Annotations written to: {annotations}")
    run.outputs.update({"directory": args.out, "annotations": annotations})
    return args.out


def _maybe_rebalance(patches: PatchSet, target: float, seed: int) -> PatchSet:
    if patches.positive_count == 0 or patches.negative_count == 0:
        print("  Rebalance skipped: one class is missing")
        return patches
    if patches.positive_fraction >= target:
        print(f"  Rebalance skipped: positive share {patches.positive_fraction:.3f} already >= {target}")
        return patches
    return rebalance(patches, target, seed)


def cmd_extract(args, config: Config, run: RunManifest) -> str:
    annotations = _require_file(args.annotations, "--annotations")
    ds = config.dataset
    _print_header("PATCH EXTRACTION", {"Input": annotations, "Output": args.out, "Patch": ds.patch_size})

    print("Step 1: Loading annotations...")
    images = load_annotations(annotations)
    print(f"  Loaded {len(images)} images, {sum(len(i.boxes) for i in images)} annotations")

    print("\nStep 2: Extracting patches...")
    patches = extract_patches(images, ds.patch_size, ds.neg_per_image, ds.max_neg_tries,
                              seed=config.seed, workers=config.workers)
    print(f"  {patches.summary()}")
    for warning in patches.warnings:
        print(f"  Warning: {warning}")

    if args.mine_model:
        model = load_any_model(_require_file(args.mine_model, "--mine-model"))
        cfg = DetectionConfig.from_settings(config.detect, workers=config.workers)
        if cfg.window != ds.patch_size:
            raise UsageError(f"detect window {cfg.window} does not match patch size {ds.patch_size}")
        hard = mine_hard_negatives(images, model, cfg, args.mine_limit)
        patches = PatchSet.concatenate([patches, hard])
        run.inputs["mine_model"] = args.mine_model
        print(f"  Mined {len(hard):,} hard negatives with {args.mine_model}")

    test_set = None
    if args.test_out:
        print("\nStep 3: Splitting by source image...")
        patches, test_set = split(patches, ds.test_fraction, derive_seed(config.seed, 1))
        print(f"  Train: {patches.summary()}")
        print(f"  Test:  {test_set.summary()}")

    print("\nStep 4: Augmenting and rebalancing...")
    patches = augment_positives(patches, ds.augment_multiplier, derive_seed(config.seed, 2))
    if not args.no_rebalance:
        patches = _maybe_rebalance(patches, ds.target_pos_fraction, derive_seed(config.seed, 3))
    print(f"  {patches.summary()}")

    size = save_patches(patches, args.out)
    print(f"\n  Patches written to: {args.out} ({format_kb(size)})")
    run.outputs["patches"] = args.out
    if test_set is not None:
        save_patches(test_set, args.test_out)
        print(f"  Test patches written to: {args.test_out}")
        run.outputs["test_patches"] = args.test_out
    return args.out


def cmd_train(args, config: Config, run: RunManifest) -> str:
    patches_path = _require_file(args.patches, "--patches")
    patches = load_patches(patches_path)
    net = config.network
    if args.input_size is not None and args.input_size != patches.patch_size:
        raise UsageError(f"--input-size {args.input_size} does not match the {patches.patch_size}px patches")
    net.input_size = patches.patch_size
    net.channels = patches.channels

    if args.init:
        model = load_model(_require_file(args.init, "--init"))
        run.inputs["init"] = args.init
    else:
        model = init_model(config_from_settings(net), seed=config.seed)
    frozen = frozen_parameter_names(model, args.freeze_until)

    tcfg = TrainingConfig(lr=config.train.lr, batch_size=config.train.batch_size, epochs=config.train.epochs,
                          seed=config.seed, shuffle=config.train.shuffle)
    _print_header("TRAINING", {"Patches": patches_path, "Output": args.out, "Epochs": tcfg.epochs,
                               "LR": tcfg.lr, "Batch": tcfg.batch_size, "Seed": tcfg.seed})
    print(f"  Data: {patches.summary()}")
    if frozen:
        print(f"  Frozen: {len(frozen)} parameters up to layer '{args.freeze_until}'")
    if config.very_verbose:
        for spec, shape in zip(model.config.layers, model.config.output_shapes()):
            print(f"    {spec.name:<10} {spec.kind:<10} -> {shape}")

    start = time.time()
    model, log = train(model, patches, tcfg, verbose=config.verbose, very_verbose=config.very_verbose,
                       frozen=frozen)
    print_training_summary(log, time.time() - start)

    size = save_model(model, args.out)
    print(f"  Model written to: {args.out} ({format_kb(size)})")
    run.outputs["model"] = args.out
    if args.log:
        write_json(args.log, log.to_dict())
        run.outputs["log"] = args.log
    return args.out


def cmd_quantize(args, config: Config, run: RunManifest) -> str:
    model = load_model(_require_file(args.model, "--model"))
    qcfg = QuantizeConfig(k=config.quantize.k, seed=config.seed)
    _print_header("QUANTIZATION", {"Model": args.model, "Output": args.out, "k": qcfg.k})

    qm = quantize_model(model, qcfg, workers=config.workers)
    for warning in qm.warnings:
        print(f"  Warning: {warning}")
    size = save_quantized(qm, args.out)
    report = compression_report(model, qm, reference_kb=args.reference_kb)
    print_compression_report(report)
    print(f"  Quantized model written to: {args.out} ({format_kb(size)})")
    run.outputs["model"] = args.out
    if args.report:
        write_json(args.report, report.to_dict())
        run.outputs["report"] = args.report
    return args.out


def cmd_finetune(args, config: Config, run: RunManifest) -> str:
    loaded = load_any_model(_require_file(args.model, "--model"))
    if not isinstance(loaded, QuantizedModel):
        raise ModelFormatError(f"{args.model}: finetune needs a quantized (MDQ1) model")
    patches = load_patches(_require_file(args.patches, "--patches"))
    q = config.quantize
    qcfg = QuantizeConfig(k=q.k, finetune_epochs=q.finetune_epochs, finetune_lr=q.finetune_lr,
                          batch_size=q.finetune_batch_size, seed=config.seed, shuffle=config.train.shuffle)
    _print_header("CENTROID FINE-TUNING", {"Model": args.model, "Output": args.out,
                                           "Epochs": qcfg.finetune_epochs, "LR": qcfg.finetune_lr})

    start = time.time()
    tuned, log = finetune(loaded, patches, qcfg, verbose=config.verbose)
    print_training_summary(log, time.time() - start)
    size = save_quantized(tuned, args.out)
    print(f"  Quantized model written to: {args.out} ({format_kb(size)})")
    run.outputs["model"] = args.out
    return args.out


def cmd_infer(args, config: Config, run: RunManifest) -> str:
    model = load_any_model(_require_file(args.model, "--model"))
    if bool(args.patches) == bool(args.image):
        raise UsageError("infer needs exactly one of --patches or --image")

    if args.patches:
        patches = load_patches(_require_file(args.patches, "--patches"))
        scored = score_patches(model, patches, config.detect.batch_size)
        records = [{"index": i, "label": int(label), "score": float(score)}
                   for i, (score, label) in enumerate(zip(scored.scores, scored.labels))]
        confusion = confusion_at(scored, 0.5)
        print(f"  Scored {len(records)} patches, accuracy@0.5 {format_number(confusion.accuracy)}")
    else:
        pixels = load_raster(_require_file(args.image, "--image"))
        score = float(predict_scores(as_model_state(model), pixels[None])[0])
        records = [{"image": args.image, "score": score}]
        print(f"  {args.image}: positive probability {format_number(score)}")

    ensure_parent_dir(args.out)
    write_json_lines(args.out, records)
    run.outputs["scores"] = args.out
    return args.out


def _detection_inputs(args) -> List[AnnotatedImage]:
    if args.annotations:
        return load_annotations(_require_file(args.annotations, "--annotations"))
    if not args.image:
        raise UsageError("detect needs --image or --annotations")
    truth = load_truth_boxes(_require_file(args.truth, "--truth")) if args.truth else {}
    images = []
    for path in args.image:
        pixels = load_raster(_require_file(path, "--image"))
        boxes = truth.get(path, truth.get(os.path.basename(path), []))
        images.append(AnnotatedImage(path=path, pixels=pixels, boxes=boxes))
    return images


def cmd_detect(args, config: Config, run: RunManifest) -> str:
    model = load_any_model(_require_file(args.model, "--model"))
    cfg = DetectionConfig.from_settings(config.detect, workers=config.workers)
    images = _detection_inputs(args)
    with_truth = bool(args.truth or args.annotations)
    _print_header("DETECTION", {"Model": args.model, "Images": len(images), "Output": args.out,
                                "Window": f"{cfg.window} stride {cfg.stride}",
                                "Thresh": f"{cfg.detection_threshold} / NMS {cfg.overlap_threshold}"})

    results = detect_images(images, model, cfg, with_truth=with_truth)
    for image, result in zip(images, results):
        line = f"  {result.image}: {len(result.detections)} detection(s)"
        if result.match is not None:
            line += f" (TP {result.match.true_positives}, FP {result.match.false_positives}, " \
                    f"FN {result.match.false_negatives})"
        print(line)
        if args.render_dir:
            stem = os.path.splitext(os.path.basename(result.image))[0]
            render_detections(image.pixels, result.detections, image.boxes,
                              os.path.join(args.render_dir, f"{stem}_detections.ppm"))

    count = write_detections(args.out, results)
    print(f"\n  {count} detections written to: {args.out}")
    if with_truth:
        total = total_match(results)
        print(f"  Precision {format_number(total.precision)}, recall {format_number(total.recall)} "
              f"(IoU >= {cfg.match_iou})")
    run.outputs["detections"] = args.out
    if args.render_dir:
        run.outputs["render_dir"] = args.render_dir
    return args.out


def cmd_eval(args, config: Config, run: RunManifest) -> str:
    patches = load_patches(_require_file(args.patches, "--patches"))
    threshold = args.threshold if args.threshold is not None else config.detect.detection_threshold
    if not args.out:
        args.out = os.path.join(os.path.dirname(os.path.abspath(args.patches)), "eval")
    os.makedirs(args.out, exist_ok=True)
    _print_header("EVALUATION", {"Patches": args.patches, "Models": len(args.model), "Output": args.out})

    rows, confusions, summary = [], [], {}
    for path in args.model:
        model = load_any_model(_require_file(path, "--model"))
        scored = score_patches(model, patches, config.detect.batch_size)
        curve = evaluate(scored)
        confusion = confusion_at(scored, threshold)
        stem = os.path.splitext(os.path.basename(path))[0]
        if stem in summary:
            stem = os.path.basename(path).replace(".", "_")
        csv_path, json_path = export_curves(curve, os.path.join(args.out, f"{stem}_curves.csv"))
        rows.append((stem, curve))
        confusions.append(confusion)
        summary[stem] = {"curve": curve.summary(), "confusion": confusion.to_dict(),
                         "csv": csv_path, "json": json_path}

        if args.annotations:
            cfg = DetectionConfig.from_settings(config.detect, workers=config.workers)
            images = load_annotations(_require_file(args.annotations, "--annotations"))
            total = total_match(detect_images(images, model, cfg))
            summary[stem]["detection"] = total.to_dict()
            print(f"  {stem}: detection precision {format_number(total.precision)}, "
                  f"recall {format_number(total.recall)} over {len(images)} images")

    print_eval_report(rows, threshold, confusions)
    summary_path = os.path.join(args.out, "summary.json")
    write_json(summary_path, summary)
    run.outputs.update({"directory": args.out, "summary": summary_path})
    return args.out


def cmd_bench(args, config: Config, run: RunManifest) -> Optional[str]:
    model = load_any_model(_require_file(args.model, "--model"))
    float_model = load_model(_require_file(args.float_model, "--float-model")) if args.float_model else None
    b = config.bench
    print(f"Benchmarking {args.model}: {b.warmup} warmup + {b.count} timed inferences...")
    report = bench_inference(model, count=b.count, warmup=b.warmup, seed=config.seed,
                             batch_size=b.batch_size, workers=config.workers, float_model=float_model)
    print_bench_report(report)
    if args.out:
        write_json(args.out, report.to_dict())
        run.outputs["report"] = args.out
        return args.out
    return None


def cmd_inspect(args, config: Config, run: RunManifest) -> Optional[str]:
    model = load_any_model(_require_file(args.model, "--model"))
    runnable = as_model_state(model)
    kind = "MDQ1 (quantized)" if isinstance(model, QuantizedModel) else "MDF1 (float)"
    print(f"File:     {args.model}")
    print(f"Format:   {kind}, version {FORMAT_VERSION}")
    print(f"Size:     {format_kb(model_size(model))} ({model_size(model):,} bytes)")
    print(f"Input:    {runnable.config.input_shape}")
    print(f"Metadata: {model.metadata}")

    param_shapes = runnable.config.param_shapes()
    rows = []
    for spec, shape in zip(runnable.config.layers, runnable.config.output_shapes()):
        owned = [n for n in param_shapes if n.split(".", 1)[0] == spec.name]
        count = sum(int(np.prod(param_shapes[n])) for n in owned)
        rows.append([spec.name, spec.kind, "x".join(map(str, shape)), f"{count:,}" if count else "-"])
    print()
    print("\n".join(format_table(["layer", "kind", "output", "params"], rows)))

    if isinstance(model, QuantizedModel):
        print()
        print("\n".join(format_table(
            ["tensor", "k", "bits", "weights", "centroids"],
            [[cb.name, cb.k, cb.bits, f"{cb.count:,}", "ascending" if cb.ascending else "unsorted"]
             for cb in model.codebooks.values()],
        )))
        unsorted = sum(1 for cb in model.codebooks.values() if not cb.ascending)
        if unsorted:
            print(f"\n  Note: {unsorted} codebook(s) left out of order by fine-tuning; indices are unchanged. "
                  f"Re-quantize the dequantized model to restore ascending centroids.")

    if args.activations:
        if not args.out:
            raise UsageError("--activations needs --out for the activation raster")
        if args.patches:
            sample = load_patches(_require_file(args.patches, "--patches")).patches[args.index]
        elif args.image:
            sample = load_raster(_require_file(args.image, "--image"))
        else:
            raise UsageError("--activations needs --patches or --image for the input sample")
        grid = dump_activations(runnable, sample, args.activations, args.out)
        print(f"\n  {grid.tiles} activation map(s) of '{grid.layer}' written to: {args.out}")
        run.outputs["activations"] = args.out
        return args.out
    return None


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    """Build the command-line parser."""
    common = CliParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file (flags override it)")
    common.add_argument("--seed", type=int, default=None, help=f"Random seed (default: {DEFAULTS.seed})")
    common.add_argument("--workers", type=int, default=None,
                        help=f"Worker threads for parallel stages (default: {DEFAULTS.workers})")
    common.add_argument(
        "-v", "--verbose",
        action="count",
        default=0,
        help="Per-epoch progress (-v), per-batch detail (-vv), per-iteration debug logging (-vvv)"
    )

    parser = CliParser(
        prog="main.py",
        description="Train, compress and run a small SqueezeNet-style pathogen detector",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py synth --out data --images 300
  python main.py extract --annotations data/annotations.jsonl --out train.pst --test-out test.pst
  python main.py train --patches train.pst --out model.mdf --epochs 20 --seed 7
  python main.py quantize --model model.mdf --out model.mdq --k 16
  python main.py finetune --model model.mdq --patches train.pst --out tuned.mdq
  python main.py detect --model tuned.mdq --image data/img_0000.ppm --out dets.jsonl
  python main.py eval --model model.mdf tuned.mdq --patches test.pst --out eval
  python main.py bench --model tuned.mdq --count 1000
  python main.py --from-manifest model.mdf.manifest.json
        """
    )
    parser.add_argument("--from-manifest", default=None, help="Re-run the command recorded in a manifest")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="Generate synthetic annotated images")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--images", type=int, default=300, help="Number of images (default: 300)")
    p.add_argument("--image-size", type=int, default=None,
                   help=f"Image height and width (default: {DEFAULTS.synth.image_height})")
    p.add_argument("--channels", type=int, choices=(1, 3), default=None,
                   help=f"1 = PGM, 3 = PPM (default: {DEFAULTS.synth.channels})")
    p.add_argument("--blobs-min", type=int, default=None,
                   help=f"Minimum blobs per image (default: {DEFAULTS.synth.blob_count_min})")
    p.add_argument("--blobs-max", type=int, default=None,
                   help=f"Maximum blobs per image (default: {DEFAULTS.synth.blob_count_max})")

    p = sub.add_parser("extract", parents=[common], help="Cut labeled patches from annotated images")
    p.add_argument("--annotations", required=True, help="JSON-lines annotation file")
    p.add_argument("--out", required=True, help="Output PST1 patch archive (training side)")
    p.add_argument("--test-out", default=None, help="Also split by source image and write the test side here")
    p.add_argument("--test-fraction", type=float, default=None,
                   help=f"Share of source images in the test side (default: {DEFAULTS.dataset.test_fraction})")
    p.add_argument("--patch-size", type=int, choices=(20, 30), default=None,
                   help=f"Patch extent (default: {DEFAULTS.dataset.patch_size})")
    p.add_argument("--neg-per-image", type=int, default=None,
                   help=f"Negatives per image (default: {DEFAULTS.dataset.neg_per_image})")
    p.add_argument("--augment", type=int, default=None,
                   help=f"Positive multiplier (default: {DEFAULTS.dataset.augment_multiplier})")
    p.add_argument("--target-pos-fraction", type=float, default=None,
                   help=f"Positive share after rebalancing (default: {DEFAULTS.dataset.target_pos_fraction})")
    p.add_argument("--no-rebalance", action="store_true", help="Keep every negative")
    p.add_argument("--mine-model", default=None,
                   help="Add windows this model wrongly accepts as extra negatives")
    p.add_argument("--mine-limit", type=int, default=None, help="Hard negatives kept per image (default: all)")

    p = sub.add_parser("train", parents=[common], help="Train the classifier")
    p.add_argument("--patches", required=True, help="Training PST1 archive")
    p.add_argument("--out", required=True, help="Output MDF1 model")
    p.add_argument("--epochs", type=int, default=None, help=f"Epochs (default: {DEFAULTS.train.epochs})")
    p.add_argument("--lr", type=float, default=None, help=f"Adam learning rate (default: {DEFAULTS.train.lr})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"Mini-batch size (default: {DEFAULTS.train.batch_size})")
    p.add_argument("--input-size", type=int, choices=(20, 30), default=None,
                   help="Network preset; must match the patch size (default: the patch size)")
    p.add_argument("--init", default=None, help="Start from the weights of this MDF1 model")
    p.add_argument("--freeze-until", default=None, help="Keep parameters of layers up to this one fixed")
    p.add_argument("--log", default=None, help="Write the per-epoch log as JSON")

    p = sub.add_parser("quantize", parents=[common], help="k-means weight sharing")
    p.add_argument("--model", required=True, help="Input MDF1 model")
    p.add_argument("--out", required=True, help="Output MDQ1 model")
    p.add_argument("--k", type=int, default=None, help=f"Clusters per tensor (default: {DEFAULTS.quantize.k})")
    p.add_argument("--report", default=None, help="Write the compression report as JSON")
    p.add_argument("--reference-kb", type=float, default=None, help="Compare the compressed size to this size")

    p = sub.add_parser("finetune", parents=[common], help="Retrain centroids of a quantized model")
    p.add_argument("--model", required=True, help="Input MDQ1 model")
    p.add_argument("--patches", required=True, help="Training PST1 archive")
    p.add_argument("--out", required=True, help="Output MDQ1 model")
    p.add_argument("--epochs", type=int, default=None,
                   help=f"Epochs (default: {DEFAULTS.quantize.finetune_epochs})")
    p.add_argument("--lr", type=float, default=None,
                   help=f"Adam learning rate (default: {DEFAULTS.quantize.finetune_lr})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"Mini-batch size (default: {DEFAULTS.quantize.finetune_batch_size})")

    p = sub.add_parser("infer", parents=[common], help="Score patches or one window-sized image")
    p.add_argument("--model", required=True, help="MDF1 or MDQ1 model")
    p.add_argument("--patches", default=None, help="PST1 archive to score")
    p.add_argument("--image", default=None, help="Single raster of the model input size")
    p.add_argument("--out", required=True, help="Output JSON-lines scores")

    p = sub.add_parser("detect", parents=[common], help="Sliding-window detection on full images")
    p.add_argument("--model", required=True, help="MDF1 or MDQ1 model")
    p.add_argument("--image", nargs="+", default=None, help="Raster(s) to scan")
    p.add_argument("--annotations", default=None, help="Scan every image of an annotation file and match")
    p.add_argument("--truth", default=None, help="Annotation file with truth boxes for --image")
    p.add_argument("--out", required=True, help="Output JSON-lines detections")
    p.add_argument("--render-dir", default=None, help="Write PPM overlays here")
    p.add_argument("--window", type=int, default=None, help=f"Window size (default: {DEFAULTS.detect.window})")
    p.add_argument("--stride", type=int, default=None, help="Window stride (default: window / 4)")
    p.add_argument("--threshold", type=float, default=None,
                   help=f"Detection threshold (default: {DEFAULTS.detect.detection_threshold})")
    p.add_argument("--overlap", type=float, default=None,
                   help=f"NMS IoU threshold (default: {DEFAULTS.detect.overlap_threshold})")

    p = sub.add_parser("eval", parents=[common], help="ROC/AUC and PR/AP on a patch set")
    p.add_argument("--model", nargs="+", required=True, help="One or more MDF1/MDQ1 models")
    p.add_argument("--patches", required=True, help="Test PST1 archive")
    p.add_argument("--out", default=None,
                   help="Output directory for curves and summary (default: eval/ next to --patches)")
    p.add_argument("--threshold", type=float, default=None,
                   help=f"Threshold for confusion counts (default: {DEFAULTS.detect.detection_threshold})")
    p.add_argument("--annotations", default=None, help="Also run detection over these annotated images")

    p = sub.add_parser("bench", parents=[common], help="Inference latency and footprint")
    p.add_argument("--model", required=True, help="MDF1 or MDQ1 model")
    p.add_argument("--float-model", default=None, help="Float counterpart of a quantized model")
    p.add_argument("--count", type=int, default=None, help=f"Timed inferences (default: {DEFAULTS.bench.count})")
    p.add_argument("--warmup", type=int, default=None,
                   help=f"Untimed inferences (default: {DEFAULTS.bench.warmup})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"Batch size of the throughput row (default: {DEFAULTS.bench.batch_size})")
    p.add_argument("--out", default=None, help="Write the report as JSON")

    p = sub.add_parser("inspect", parents=[common], help="Model header, layer shapes, activation maps")
    p.add_argument("--model", required=True, help="MDF1 or MDQ1 model")
    p.add_argument("--activations", default=None, help="Dump activation maps of this layer")
    p.add_argument("--patches", default=None, help="PST1 archive holding the input sample")
    p.add_argument("--index", type=int, default=0, help="Sample index in --patches (default: 0)")
    p.add_argument("--image", default=None, help="Raster used as the input sample")
    p.add_argument("--out", default=None, help="Output PGM for the activation maps")
    return parser


def _overrides(args) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)
    overrides = {
        "seed": get("seed"),
        "workers": get("workers"),
        "dataset.patch_size": get("patch_size"),
        "dataset.neg_per_image": get("neg_per_image"),
        "dataset.augment_multiplier": get("augment"),
        "dataset.target_pos_fraction": get("target_pos_fraction"),
        "dataset.test_fraction": get("test_fraction"),
        "synth.image_height": get("image_size"),
        "synth.image_width": get("image_size"),
        "synth.channels": get("channels"),
        "synth.blob_count_min": get("blobs_min"),
        "synth.blob_count_max": get("blobs_max"),
        "quantize.k": get("k"),
        "detect.window": get("window"),
        "detect.stride": get("stride"),
        "detect.overlap_threshold": get("overlap"),
        "bench.count": get("count"),
        "bench.warmup": get("warmup"),
    }
    if args.command == "train":
        overrides.update({"train.epochs": args.epochs, "train.lr": args.lr, "train.batch_size": args.batch_size})
    elif args.command == "finetune":
        overrides.update({"quantize.finetune_epochs": args.epochs, "quantize.finetune_lr": args.lr,
                          "quantize.finetune_batch_size": args.batch_size})
    elif args.command == "bench":
        overrides["bench.batch_size"] = args.batch_size
    elif args.command == "detect":
        overrides["detect.detection_threshold"] = args.threshold
    return overrides


def _inputs(args) -> Dict[str, Any]:
    keys = ("annotations", "patches", "model", "image", "truth", "init", "float_model", "config")
    return {key: getattr(args, key) for key in keys if getattr(args, key, None)}


def run(argv: List[str]) -> int:
    """
    Parse argv and run one subcommand.

    Returns:
        Exit code: 0 success, 1 usage error, 2 data/format or I/O error
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.from_manifest:
        if args.command:
            parser.error("--from-manifest cannot be combined with a subcommand")
        manifest = load_manifest(_require_file(args.from_manifest, "--from-manifest"))
        print(f"Replaying '{manifest.subcommand}' from {args.from_manifest}")
        return run(manifest.argv)
    if not args.command:
        parser.error("a subcommand is required")

    verbose_count = args.verbose or 0
    logging.basicConfig(
        level=logging.DEBUG if verbose_count >= 3 else (logging.INFO if verbose_count else logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    config = load_config(args.config, _overrides(args),
                         verbose=verbose_count >= 1, very_verbose=verbose_count >= 2)

    manifest = RunManifest(subcommand=args.command, argv=list(argv), config=config.to_dict(),
                           inputs=_inputs(args), seed=config.seed)
    primary = COMMANDS[args.command](args, config, manifest)
    if primary:
        path = manifest.finish(manifest_path(primary))
        logger.info("manifest written to %s", path)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return run(argv)
    except UsageError as e:
        print(f"Usage error: {e}", file=sys.stderr)
        return 1
    except (EngineError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
