"""Command-line entry points.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import load_config
from .data_io import (
    AnnotationError,
    audit_counts,
    classify_complexity,
    load_annotations,
    load_text_block_index,
    read_jsonl,
    write_jsonl,
)
from .metrics import (
    TedsResult,
    corpus_report,
    evaluate_pair,
    format_report,
    report_to_csv,
    report_to_json,
)
from .pipeline import ModelMergeStage, ModelSplitStage, Recognizer
from .preprocess import UnusableRecordError
from .synthgen import SynthSpec, generate_corpus
from .training import TableDataset, load_image, load_model, train_merge, train_split

logger = logging.getLogger("splitmerge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _image_paths(inputs: Sequence[str]) -> List[Path]:
    paths: List[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            found = sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
            images = p / "images"
            if not found and images.is_dir():
                found = sorted(q for q in images.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
            paths.extend(found)
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(p)
    if not paths:
        raise FileNotFoundError("no input images found")
    return paths


def _recognizer(args) -> Recognizer:
    kwargs = {"image_size": args.image_size, "max_cells": args.max_cells}
    try:
        split = load_model(args.split_ckpt, args.device, **kwargs)
        merge = load_model(args.merge_ckpt, args.device, **kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    size = split.cfg.image_size
    if merge.cfg.image_size != size:
        raise UsageError(f"split model runs at {size}px but merge model at {merge.cfg.image_size}px")
    return Recognizer(ModelSplitStage(split, args.device), ModelMergeStage(merge, args.device),
                      image_size=size, threshold=args.threshold, max_cells=args.max_cells)


def _text_blocks(path: Optional[str]) -> Optional[Dict[str, list]]:
    if path is None:
        return None
    return load_text_block_index(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed, image_size=args.image_size)
    if args.spec:
        import yaml

        spec = SynthSpec.from_dict({**spec.__dict__, **(yaml.safe_load(Path(args.spec).read_text()) or {})})
    manifest = generate_corpus(spec, args.n, args.out, split=args.split, offset=args.offset)
    print(json.dumps({"out": str(args.out), "n": manifest["n"], "counts": manifest["counts"]}))
    return EXIT_OK


def _train(args, kind: str) -> int:
    run = load_config(args.config, args.preset)
    model_cfg, optim_cfg = run.model, run.optim
    if args.image_size is not None:
        model_cfg = replace(model_cfg, image_size=args.image_size)
    overrides = {k: v for k, v in (("batch_size", args.batch_size), ("seed", args.seed),
                                   ("lr", args.lr)) if v is not None}
    if overrides:
        optim_cfg = replace(optim_cfg, **overrides)
    dataset = TableDataset(args.data, model_cfg.image_size, lenient=args.lenient_io, limit=args.limit)
    logger.info("%d usable records, %d skipped", len(dataset), len(dataset.skipped))
    fn = train_split if kind == "split" else train_merge
    state = fn(dataset, model_cfg, optim_cfg, args.out, epochs=args.epochs, resume=args.resume,
               device=args.device, max_steps=args.max_steps)
    print(json.dumps({"out": str(args.out), "epochs": state.epoch, "steps": state.step,
                      "checkpoint": state.checkpoint, "history": state.history}))
    return EXIT_OK


def cmd_train_split(args) -> int:
    return _train(args, "split")


def cmd_train_merge(args) -> int:
    return _train(args, "merge")


def cmd_infer(args) -> int:
    recognizer = _recognizer(args)
    paths = _image_paths(args.inputs)
    blocks = _text_blocks(args.text_blocks)
    if blocks is None:
        logger.warning("no text-block file given; emitting structure-only HTML")

    def run(path: Path) -> dict:
        image_id = path.stem
        image_blocks = blocks.get(image_id) if blocks is not None else None
        if blocks is not None and image_blocks is None:
            logger.warning("%s: no text blocks listed", image_id)
        return recognizer.recognize(load_image(path), image_blocks, image_id).to_json()

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            rows = list(pool.map(run, paths))
    else:
        rows = [run(p) for p in paths]
    if args.out:
        write_jsonl(args.out, rows)
    else:
        for row in rows:
            sys.stdout.write(json.dumps(row, ensure_ascii=False) + "\n")
    return EXIT_OK


def evaluate_files(pred_path, gt_path, lenient: bool = False):
    """Score a predictions JSONL against an annotations JSONL.

    Returns (report, per-table rows, ids missing a prediction, ids without ground truth).
    Missing predictions score zero.
    """
    preds = {row["image_id"]: row.get("html") or "" for row in read_jsonl(pred_path)}
    results: List[TedsResult] = []
    tags, rows, missing = [], [], []
    gt_ids = set()
    for record in load_annotations(gt_path, lenient=lenient):
        gt_ids.add(record.image_id)
        if record.image_id not in preds:
            missing.append(record.image_id)
            result = TedsResult(0.0, 0.0, False, "missing prediction")
        else:
            result = evaluate_pair(preds[record.image_id], record.to_html())
        results.append(result)
        tags.append(classify_complexity(record))
        rows.append({"image_id": record.image_id, "complexity": tags[-1], **result.__dict__})
    extra = sorted(set(preds) - gt_ids)
    return corpus_report(results, tags), rows, sorted(missing), extra


def cmd_eval(args) -> int:
    report, rows, missing, extra = evaluate_files(args.pred, args.gt, args.lenient_io)
    for image_id in missing:
        print(f"unmatched ground truth (no prediction): {image_id}", file=sys.stderr)
    for image_id in extra:
        print(f"unmatched prediction (no ground truth): {image_id}", file=sys.stderr)
    if args.per_table:
        write_jsonl(args.per_table, rows)
    if args.format == "csv":
        _emit(report_to_csv(report), args.out)
    elif args.format == "json":
        _emit(report_to_json(report), args.out)
    else:
        _emit(format_report(report), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.batch != 1:
        raise UsageError("only single-stream benchmarking (--batch 1) is implemented")
    recognizer = _recognizer(args)
    corpus = Path(args.corpus)
    paths = _image_paths([str(corpus)])
    if args.limit:
        paths = paths[: args.limit]
    blocks_file = corpus / "text_blocks.jsonl"
    blocks = load_text_block_index(blocks_file) if blocks_file.exists() else {}
    images = [(p.stem, load_image(p)) for p in paths]
    for i in range(args.warmup):
        image_id, image = images[i % len(images)]
        recognizer.recognize(image, blocks.get(image_id), image_id)
    latencies, stages = [], {}
    started = time.perf_counter()
    for _ in range(args.reps):
        for image_id, image in images:
            t = time.perf_counter()
            result = recognizer.recognize(image, blocks.get(image_id), image_id)
            latencies.append(time.perf_counter() - t)
            for key, value in result.timings.items():
                stages.setdefault(key, []).append(value)
    total = time.perf_counter() - started
    lat = np.asarray(latencies)
    report = {
        "images": len(lat),
        "warmup": args.warmup,
        "reps": args.reps,
        "image_size": recognizer.image_size,
        "device": args.device,
        "fps": len(lat) / total,
        "latency_mean_s": float(lat.mean()),
        "latency_p50_s": float(np.percentile(lat, 50)),
        "latency_p95_s": float(np.percentile(lat, 95)),
        "stage_mean_s": {k: float(np.mean(v)) for k, v in stages.items()},
    }
    _emit(json.dumps(report, indent=2), args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    records = list(load_annotations(args.annotations, lenient=args.lenient_io,
                                    image_root=args.image_root))
    stats = audit_counts(records)
    report = {"simple": stats.n_simple, "complex": stats.n_complex, "total": stats.n_total}
    if args.check_labels:
        root = Path(args.image_root) if args.image_root else Path(args.annotations).parent
        dataset = TableDataset(root, args.image_size, annotations=Path(args.annotations).name,
                               lenient=args.lenient_io)
        report["usable"] = len(dataset)
        report["unusable"] = dataset.skipped
    print(json.dumps(report, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split-ckpt", required=True, help="split checkpoint file or run directory")
    p.add_argument("--merge-ckpt", required=True, help="merge checkpoint file or run directory")
    p.add_argument("--image-size", type=int, default=None,
                   help="canonical input size; must match the checkpoints (default: theirs)")
    p.add_argument("--threshold", type=float, default=0.5, help="split probability threshold")
    p.add_argument("--max-cells", type=int, default=640, help="grid cells accepted by the merge model")


def _add_global_flags(p: argparse.ArgumentParser, suppress: bool = False) -> None:
    def default(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("-v", "--verbose", action="store_true", default=default(False))
    p.add_argument("--device", default=default("cpu"))
    p.add_argument("--lenient-io", action="store_true", default=default(False),
                   help="skip malformed annotation lines")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splitmerge", description="Split-and-merge table structure recognition.")
    parser.add_argument("--version", action="version", version=__version__)
    _add_global_flags(parser)
    # the same flags are accepted after the subcommand; suppressed defaults keep the top-level values
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic table corpus", parents=[common])
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--split", default="train")
    p.add_argument("--offset", type=int, default=0, help="first sample index")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=320, help="longest side of rendered images")
    p.add_argument("--spec", help="YAML file overriding generator settings")
    p.set_defaults(func=cmd_synth)

    for name, func in (("train-split", cmd_train_split), ("train-merge", cmd_train_merge)):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]} model", parents=[common])
        p.add_argument("--data", required=True, help="corpus directory with annotations.jsonl")
        p.add_argument("--out", required=True, help="run directory for checkpoints")
        p.add_argument("--config", help="YAML file with model/optim sections")
        p.add_argument("--preset", choices=("full", "tiny"), default="full")
        p.add_argument("--image-size", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resume", help="checkpoint file or run directory to continue from")
        p.add_argument("--limit", type=int, default=None, help="use only the first N usable records")
        p.add_argument("--max-steps", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="recognize tables in images", parents=[common])
    p.add_argument("inputs", nargs="+", help="image files or directories")
    _add_model_flags(p)
    p.add_argument("--text-blocks", help="JSONL of OCR text blocks keyed by image_id")
    p.add_argument("--out", help="output JSONL (default: stdout)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth", parents=[common])
    p.add_argument("--pred", required=True, help="JSONL with image_id and html")
    p.add_argument("--gt", required=True, help="annotations JSONL")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--out")
    p.add_argument("--per-table", help="write per-table scores to this JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="end-to-end throughput", parents=[common])
    p.add_argument("corpus", help="corpus directory (images/ and optional text_blocks.jsonl)")
    _add_model_flags(p)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("audit", help="count simple/complex tables and check label derivation", parents=[common])
    p.add_argument("annotations")
    p.add_argument("--image-root")
    p.add_argument("--check-labels", action="store_true")
    p.add_argument("--image-size", type=int, default=960)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AnnotationError, UnusableRecordError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
