"""Command-line harness: dataset synthesis, training, evaluation, the
ablation ladder, gradient checking, mask generation and reports.

Config files are line-based `key = value` text; `#` starts a comment.
Every command exits 0 on success and nonzero with a one-line diagnostic
on any rejection.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .dataset import DatasetSpec, load_annotations, synth_dataset
from .detector_net import BackboneSpec, Toggles, build_network, describe
from .eval_metrics import EvalConfig
from .gradcheck import run_suite
from .inference import collect_detections, evaluate_detector
from .mrf_block import BranchSpec, MRFBlockSpec, default_mrf_spec, format_rf_report
from .sws_masks import AreaThresholds, mask_to_pgm_bytes, rasterize_sws_mask
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _get(values, key, convert, default):
    if key not in values:
        return default
    return convert(values[key])


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_tuple(s):
    return tuple(int(v) for v in s.replace(",", " ").split())


def dataset_spec_from(values: dict) -> DatasetSpec:
    d = DatasetSpec()
    return DatasetSpec(
        image_size=_get(values, "image_size", int, d.image_size),
        num_images=_get(values, "num_images", int, d.num_images),
        num_classes=_get(values, "num_classes", int, d.num_classes),
        min_objects=_get(values, "min_objects", int, d.min_objects),
        max_objects=_get(values, "max_objects", int, d.max_objects),
        small_ratio=_get(values, "small_ratio", float, d.small_ratio),
        small_side=_get(values, "small_side", _int_tuple, d.small_side),
        large_side=_get(values, "large_side", _int_tuple, d.large_side),
        noise=_get(values, "noise", float, d.noise),
        seed=_get(values, "seed", int, d.seed),
    )


def train_config_from(values: dict) -> TrainConfig:
    t = TrainConfig()
    toggles = Toggles(
        mrf=_get(values, "mrf", _bool, t.toggles.mrf),
        extra_level=_get(values, "extra_level", _bool, t.toggles.extra_level),
        seg_mode=_get(values, "seg_mode", str, t.toggles.seg_mode),
    )
    return TrainConfig(
        epochs=_get(values, "epochs", int, t.epochs),
        batch_size=_get(values, "batch_size", int, t.batch_size),
        base_lr=_get(values, "base_lr", float, t.base_lr),
        warmup_start_lr=_get(values, "warmup_start_lr", float, t.warmup_start_lr),
        warmup_epochs=_get(values, "warmup_epochs", int, t.warmup_epochs),
        lr_drop_epochs=_get(values, "lr_drop_epochs", _int_tuple, t.lr_drop_epochs),
        momentum=_get(values, "momentum", float, t.momentum),
        weight_decay=_get(values, "weight_decay", float, t.weight_decay),
        seed=_get(values, "seed", int, t.seed),
        toggles=toggles,
        t1=_get(values, "t1", float, t.t1),
        t2=_get(values, "t2", float, t.t2),
        num_classes=_get(values, "num_classes", int, t.num_classes),
        image_size=_get(values, "image_size", int, t.image_size),
        stage_channels=_get(values, "stage_channels", _int_tuple, t.stage_channels),
    )


def mrf_spec_from(values: dict) -> MRFBlockSpec:
    in_c = _get(values, "in_channels", int, 256)
    out_c = _get(values, "out_channels", int, 256)
    if "branches" not in values:
        return default_mrf_spec(in_c, out_c)
    kds = []
    for item in values["branches"].split(","):
        k, d = item.strip().split(":")
        kds.append((int(k), int(d)))
    return default_mrf_spec(in_c, out_c, tuple(kds))


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------

def cmd_synth(args):
    values = parse_config_file(args.spec) if args.spec else {}
    synth_dataset(dataset_spec_from(values), args.out)
    print(f"dataset written to {args.out}")


def cmd_train(args):
    values = parse_config_file(args.config) if args.config else {}
    config = train_config_from(values)
    result = train(config, args.data, log_fn=print, ckpt_path=args.out)
    print(f"trained {result.steps} steps; checkpoint at {args.out}")


def cmd_eval(args):
    det, _ = load_checkpoint(args.ckpt)
    if args.coco_style:
        from .eval_metrics import coco_style_summary
        dets, gts = collect_detections(det, args.data)
        print(coco_style_summary(dets, gts))
    else:
        report = evaluate_detector(det, args.data)
        print(report.format_table())


ABLATION_LADDER = (
    ("baseline", Toggles(mrf=False, extra_level=False, seg_mode="off")),
    ("+MRF", Toggles(mrf=True, extra_level=False, seg_mode="off")),
    ("+MRF +extra level", Toggles(mrf=True, extra_level=True, seg_mode="off")),
    ("+MRF +extra level +AWS", Toggles(mrf=True, extra_level=True, seg_mode="aws")),
    ("+MRF +extra level +SWS", Toggles(mrf=True, extra_level=True, seg_mode="sws")),
)


def ablate(base_config: TrainConfig, train_dir, test_dir, log_fn=None):
    """Train and evaluate the five-row ablation ladder with shared budget/seed.

    Orderings are reported, not asserted; desk-scale runs are too small to
    guarantee the full-dataset progression.
    """
    rows = []
    for label, toggles in ABLATION_LADDER:
        config = replace(base_config, toggles=toggles)
        result = train(config, train_dir, log_fn=log_fn)
        report = evaluate_detector(result.detector, test_dir)
        rows.append((label, report.map, report.per_area_ap.get("S")))
    return rows


def format_ablation_table(rows) -> str:
    lines = [f"{'configuration':<26} {'mAP@0.5':>8} {'AP_S':>8}"]
    for label, m, ap_s in rows:
        lines.append(f"{label:<26} {m:>8.4f} "
                     f"{'n/a' if ap_s is None else f'{ap_s:>8.4f}'}")
    return "\n".join(lines)


def cmd_ablate(args):
    values = parse_config_file(args.config) if args.config else {}
    config = train_config_from(values)
    test_dir = args.test_data or args.data
    rows = ablate(config, args.data, test_dir)
    print(format_ablation_table(rows))


def cmd_gradcheck(args):
    modules = ("tensor", "mrf", "net", "loss") if args.module == "all" else (args.module,)
    results = run_suite(modules)
    failed = 0
    for name, err, tol in results:
        ok = err < tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<42} max_rel_err={err:.3e} tol={tol:g}")
    if failed:
        raise SystemExit(f"{failed} gradient checks failed")
    print(f"all {len(results)} gradient checks passed")


def cmd_mask_gen(args):
    thresholds = AreaThresholds(args.t1, args.t2)
    by_image = load_annotations(args.data)
    from .dataset import dataset_info
    size = int(dataset_info(args.data).get("image_size", 64))
    os.makedirs(args.out, exist_ok=True)
    for rel, boxes in sorted(by_image.items()):
        mask = rasterize_sws_mask(boxes, size, thresholds)
        name = os.path.splitext(os.path.basename(rel))[0] + ".pgm"
        with open(os.path.join(args.out, name), "wb") as f:
            f.write(mask_to_pgm_bytes(mask))
    print(f"masks written to {args.out}")


def cmd_rf_report(args):
    values = parse_config_file(args.spec) if args.spec else {}
    print(format_rf_report(mrf_spec_from(values)))


def cmd_describe(args):
    values = parse_config_file(args.config) if args.config else {}
    config = train_config_from(values)
    det = build_network(BackboneSpec(config.image_size, config.stage_channels),
                        config.num_classes, config.toggles, seed=config.seed)
    print(describe(det))


def build_parser():
    parser = argparse.ArgumentParser(prog="mrfdet",
                                     description="Desk-scale multi-receptive-field detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="dataset spec file (key = value)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="train config file (key = value)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--coco-style", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the five-row ablation ladder")
    p.add_argument("--config", help="train config file")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--test-data", help="held-out dataset (defaults to --data)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--module", choices=["all", "tensor", "mrf", "net", "loss"],
                   default="all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("mask-gen", help="write segmentation ground-truth masks as PGM")
    p.add_argument("--data", required=True)
    p.add_argument("--t1", type=float, default=1024.0)
    p.add_argument("--t2", type=float, default=9216.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mask_gen)

    p = sub.add_parser("rf-report", help="per-branch receptive-field table")
    p.add_argument("--spec", help="MRF spec file (key = value)")
    p.set_defaults(fn=cmd_rf_report)

    p = sub.add_parser("describe", help="summarize the network architecture")
    p.add_argument("--config", help="train config file")
    p.set_defaults(fn=cmd_describe)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except SystemExit:
        raise
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
