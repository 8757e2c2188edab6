#!/usr/bin/env python3
"""
Command-line entry point for training and inspecting boosted ViT classifiers.

    python booster_cli.py train runs/blobs.json --set train.lr=1e-4
    python booster_cli.py eval runs/blobs.json --checkpoint runs/blobs/ckpt_best.rlbk
    python booster_cli.py params runs/blobs.json
    python booster_cli.py gradcam runs/blobs.json --checkpoint ... --index 3
    python booster_cli.py gen-fixture --kind blobs2d --seed 0 --out fixtures
    python booster_cli.py sweep runs/blobs.json --variants baseline,r-llm,mlp-control

Results go to stdout as JSON (or a table for ``params``); logs go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

import os
import sys

from dotenv import load_dotenv

# Determine project root (directory containing this script)
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
DOTENV_PATH = os.path.join(PROJECT_ROOT, '.env')
load_dotenv(DOTENV_PATH)

# BLAS pools stay single-threaded so results do not depend on FB_THREADS
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from booster import BoosterVariant, ModelSpec, build_model_params, layout_accounting, load_pretrained
from checkpoint_storage import load_checkpoint
from data_io import SPLITS, DatasetBundle, gen_synthetic, load_array_dir, load_npz, prepare_bundle, write_fixture
from gradcam import grad_cam, write_heatmap_pgm, write_overlay_ppm
from llm_block import llm_layout
from nn_core import ConfigError
from report_format import compact_report, format_param_table
from run_config import ResolvedConfig, RunConfigError, load_run_config, worker_count
from train_eval import evaluate, train

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RESOLVED_CONFIG_FILE = "resolved_config.json"
RUN_LOG_FILE = "run.log"
HEATMAP_DIR = "heatmaps"
SUMMARY_FILE = "summary.json"
EVAL_FILE = "eval_{split}_metrics.json"

logger = logging.getLogger('booster_cli')


def setup_logging() -> None:
    """stderr always; FB_LOG_FILE as an extra file when set."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_file = os.getenv("FB_LOG_FILE")
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    level = os.getenv("FB_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def _attach_run_log(run_dir: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(run_dir, RUN_LOG_FILE))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def _detach(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def _print_json(payload: Any) -> None:
    print(json.dumps(payload, indent=2))


def _write_json(path: str, payload: Any) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(payload, indent=2) + "\n")
    return path


# ---- shared plumbing ----

def load_data(resolved: ResolvedConfig) -> DatasetBundle:
    data = resolved.data
    volumetric = resolved.model.backbone.kind != "vit2d"
    if data.kind == "synthetic":
        bundle = gen_synthetic(data.generator, data.n_per_class, data.n_classes, data.seed)
    elif data.kind == "npz":
        bundle = load_npz(data.path, volumetric)
    else:
        bundle = load_array_dir(data.path, volumetric)
    return prepare_bundle(bundle, data.channels, data.resize)


def prepare_run(resolved: ResolvedConfig) -> Tuple[ModelSpec, DatasetBundle, Dict[str, Any]]:
    """Load the data and size the model for it; returns the echo with the actual class count."""
    bundle = load_data(resolved)
    spec = resolved.model_for(bundle.n_classes, bundle.image_shape)
    echo = resolved.to_dict()
    echo["model"]["backbone"]["n_classes"] = bundle.n_classes
    return spec, bundle, echo


def load_model_checkpoint(spec: ModelSpec, path: str) -> Any:
    store = load_checkpoint(path)
    layout = list(spec.param_layout())
    if spec.variant.uses_llm:
        layout += llm_layout(spec.llm)
    missing = [p.name for p in layout if p.name not in store]
    if missing:
        raise ConfigError(f"Checkpoint {path} lacks {len(missing)} tensors the model needs, "
                          f"e.g. '{missing[0]}'")
    return store


def _save_heatmap(spec: ModelSpec, store: Any, image: np.ndarray, out_dir: str, stem: str,
                  target: Optional[int] = None, layer: Optional[str] = None) -> Dict[str, Any]:
    heatmap = grad_cam(spec, store, image, target, layer)
    files = {
        "heatmap": write_heatmap_pgm(heatmap, os.path.join(out_dir, f"{stem}.pgm")),
        "overlay": write_overlay_ppm(heatmap, image, os.path.join(out_dir, f"{stem}_overlay.ppm")),
    }
    return {"target_class": heatmap.target_class, "layer": heatmap.layer, "files": files}


def run_training(resolved: ResolvedConfig, workers: int) -> Dict[str, Any]:
    """Train one resolved config into its output_dir; returns the metrics report as a dict."""
    spec, bundle, echo = prepare_run(resolved)
    run_dir = resolved.output_dir
    os.makedirs(os.path.join(run_dir, HEATMAP_DIR), exist_ok=True)
    handler = _attach_run_log(run_dir)
    try:
        _write_json(os.path.join(run_dir, RESOLVED_CONFIG_FILE), echo)
        cfg = resolved.train
        store = build_model_params(spec, cfg.seed, cfg.precision)
        if resolved.init_from:
            load_pretrained(store, load_checkpoint(resolved.init_from))
        result = train(spec, bundle, cfg, run_dir=run_dir, store=store, workers=workers, config_echo=echo)
        if spec.backbone.kind == "vit2d" and len(bundle.test):
            _save_heatmap(spec, result.best_store, bundle.test.images[0],
                          os.path.join(run_dir, HEATMAP_DIR), "test_0")
        return result.report.to_dict()
    finally:
        _detach(handler)


# ---- commands ----

def cmd_train(args) -> int:
    resolved = load_run_config(args.config, args.set or [])
    report = run_training(resolved, worker_count())
    _print_json(compact_report(report))
    return 0


def cmd_eval(args) -> int:
    resolved = load_run_config(args.config, args.set or [])
    spec, bundle, _ = prepare_run(resolved)
    store = load_model_checkpoint(spec, args.checkpoint)
    metrics = evaluate(spec, store, bundle.splits[args.split], resolved.train.eval_batch_size, worker_count())
    payload = {"checkpoint": args.checkpoint, "split": args.split, **metrics}
    # next to the training metrics, never over them
    output = args.output or os.path.join(resolved.output_dir, EVAL_FILE.format(split=args.split))
    _write_json(output, payload)
    logger.info(f"Wrote {output}")
    _print_json(payload)
    return 0


def cmd_params(args) -> int:
    resolved = load_run_config(args.config, args.set or [])
    accounting = layout_accounting(resolved.model)
    if args.json:
        _print_json(accounting)
    else:
        print(format_param_table(accounting))
    return 0


def cmd_gradcam(args) -> int:
    resolved = load_run_config(args.config, args.set or [])
    spec, bundle, _ = prepare_run(resolved)
    store = load_model_checkpoint(spec, args.checkpoint)
    split = bundle.splits[args.split]
    if not 0 <= args.index < len(split):
        raise IndexError(f"--index {args.index} outside the {args.split} split of {len(split)} images")
    out_dir = args.out or os.path.join(resolved.output_dir, HEATMAP_DIR)
    result = _save_heatmap(spec, store, split.images[args.index], out_dir, f"{args.split}_{args.index}",
                           args.target, args.layer)
    result.update({"split": args.split, "index": args.index, "label": int(split.labels[args.index])})
    _print_json(result)
    return 0


def cmd_gen_fixture(args) -> int:
    bundle = gen_synthetic(args.kind, args.n_per_class, args.n_classes, args.seed)
    name = args.name or f"{args.kind}_seed{args.seed}"
    paths = write_fixture(bundle, args.out, name, compress=not args.stored)
    _print_json({**paths, **bundle.summary()})
    return 0


def _parse_variants(text: str) -> List[str]:
    variants = []
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            variants.append(BoosterVariant.parse(item).value)
        except ConfigError as e:
            raise RunConfigError("--variants", str(e))
    if not variants:
        raise RunConfigError("--variants", "no variants given")
    return variants


def cmd_sweep(args) -> int:
    base = load_run_config(args.config, args.set or [])
    variants = _parse_variants(args.variants)
    workers = worker_count()
    summary: Dict[str, Any] = {}
    for variant in variants:
        resolved = base.with_variant(variant, os.path.join(base.output_dir, variant))
        logger.info(f"Sweep: training {variant} into {resolved.output_dir}")
        report = run_training(resolved, workers)
        summary[variant] = {**report["param_counts"], "best_epoch": report["best_epoch"],
                            "test_acc": report["test"]["acc"], "test_auc": report["test"]["auc"]}
    _write_json(os.path.join(base.output_dir, SUMMARY_FILE), summary)
    _print_json(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Train and inspect ViT classifiers boosted by a frozen LLM block")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("config", help="Path to a JSON run config")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="Override a config value, e.g. train.lr=1e-5 (repeatable)")
        return p

    p = with_config(sub.add_parser("train", help="Train a model and write the run directory"))
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="Evaluate a checkpoint on one split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--output", help="Metrics JSON path (default: <output_dir>/eval_<split>_metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("params", help="Print the parameter accounting without loading data"))
    p.add_argument("--json", action="store_true", help="Print JSON instead of a table")
    p.set_defaults(func=cmd_params)

    p = with_config(sub.add_parser("gradcam", help="Write a Grad-CAM heatmap for one image"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--target", type=int, help="Target class (default: predicted class)")
    p.add_argument("--layer", help="Backbone block, e.g. backbone.blocks.3 (default: last block)")
    p.add_argument("--out", help="Output directory (default: <output_dir>/heatmaps)")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("gen-fixture", help="Write a synthetic dataset as NPZ and as an NPY directory")
    p.add_argument("--kind", choices=("blobs2d", "blobs3d"), default="blobs2d")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--name", help="Base name of the written files (default: <kind>_seed<seed>)")
    p.add_argument("--stored", action="store_true", help="Write the NPZ without compression")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_fixture)

    p = with_config(sub.add_parser("sweep", help="Train several booster variants on the same data and seed"))
    p.add_argument("--variants", required=True, help="Comma-separated variants, e.g. baseline,r-llm")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.func(args)
    except RunConfigError as e:
        logger.error(f"Invalid run config: {e}")
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
