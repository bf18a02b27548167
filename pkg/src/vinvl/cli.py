"""Command-line entry point: ``vinvl <subcommand> --out RUN_DIR [options]``.

Exit codes: 0 success, 2 missing input or bad usage, 3 data invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from . import pipeline
from .config import ConfigError, load_config
from .finetune import TASK_NAMES

EXIT_OK, EXIT_MISSING, EXIT_DATA = 0, 2, 3

log = logging.getLogger("vinvl")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", required=True, help="run directory for all outputs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set model.heads=2 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinvl", description="Desk-scale region-feature vision-language pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic world, images, detections and OD datasets")
    _common(p)
    p.add_argument("--images", type=int, help="number of synthetic images")

    p = sub.add_parser("merge-vocab", help="merge detection-dataset class vocabularies into the base one")
    _common(p)
    p.add_argument("--od", required=True, help="directory of <dataset>.aliases / <dataset>.jsonl pairs")
    p.add_argument("--min-instances", type=int, help="drop base classes with fewer annotations")

    p = sub.add_parser("sample-epoch", help="build one shuffled OD training epoch (class-aware or full copies)")
    _common(p)
    p.add_argument("--od", required=True, help="directory of <dataset>.aliases / <dataset>.jsonl pairs")
    p.add_argument("--min-per-class", type=int, help="class-aware quota per class")

    p = sub.add_parser("extract-regions", help="class-agnostic NMS, top-K and position encoding of detections")
    _common(p)
    p.add_argument("--detections", required=True, help="raw detection feature file")
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--max-regions", type=int)
    p.add_argument("--score-floor", type=float)
    p.add_argument("--no-normalize-positions", action="store_true", help="keep pixel coordinates")

    p = sub.add_parser("build-corpus", help="build pre-training triples, task files and the token vocabulary")
    _common(p)
    p.add_argument("--data", required=True, help="gen-synthetic run directory (images.jsonl)")
    p.add_argument("--regions", required=True, help="extract-regions run directory (regions.bin)")

    p = sub.add_parser("pretrain", help="pre-train with masked-token plus 3-way contrastive loss")
    _common(p)
    p.add_argument("--corpus", required=True, help="build-corpus run directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--mtl-on-polluted", action="store_true", help="also score masked tokens of polluted triples")

    for name, helptext in (("finetune", "train a task head (and the encoder) on a downstream task"),
                           ("evaluate", "evaluate a fine-tuned checkpoint on a downstream task")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("task", choices=TASK_NAMES)
        _common(p)
        p.add_argument("--corpus", required=True, help="build-corpus run directory")
        p.add_argument("--checkpoint", required=name == "evaluate",
                       help="starting checkpoint" + (" (random init when omitted)" if name == "finetune" else ""))
        if name == "finetune":
            p.add_argument("--steps", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float)

    p = sub.add_parser("caption", help="generate captions with a caption-fine-tuned checkpoint")
    _common(p)
    p.add_argument("--corpus", required=True, help="build-corpus run directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--images", type=int, help="number of held-out images to caption")

    p = sub.add_parser("bench-nms", help="time class-agnostic against class-aware NMS")
    _common(p)
    p.add_argument("--boxes", type=int, default=2000)
    p.add_argument("--classes", type=int, default=1848)
    p.add_argument("--trials", type=int, default=3)
    return parser


# flag name -> config key
_FLAG_KEYS = {
    "seed": "seed", "images": None, "min_instances": "vocab.min_instances",
    "min_per_class": "sampling.min_per_class", "iou_threshold": "regions.iou_threshold",
    "max_regions": "regions.max_regions", "score_floor": "regions.score_floor", "beam_size": "caption.beam_size",
    "max_len": "caption.max_len",
}


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None and key is not None:
            out[key] = value
    if getattr(args, "images", None) is not None:
        out["caption.n_images" if args.command == "caption" else "world.n_images"] = args.images
    if getattr(args, "no_normalize_positions", False):
        out["regions.normalize_positions"] = False
    section = "pretrain" if args.command == "pretrain" else "finetune"
    for flag in ("steps", "batch_size", "lr"):
        if getattr(args, flag, None) is not None:
            out[f"{section}.{flag}"] = getattr(args, flag)
    if getattr(args, "mtl_on_polluted", False):
        out["pretrain.mtl_on_polluted"] = True
    return out


def _progress(step: int, row: dict) -> None:
    if step % 100 == 0:
        log.info("step %d loss %.4f mtl %.4f cl3 %.4f acc %.3f", step, row["loss"], row.get("mtl", 0.0),
                 row.get("cl3", 0.0), row.get("cl3_acc", 0.0))


def run(args: argparse.Namespace) -> pipeline.RunDir:
    cfg = load_config(args.config, _overrides(args))
    c = args.command
    if c == "gen-synthetic":
        return pipeline.gen_synthetic(cfg, args.out)
    if c == "merge-vocab":
        return pipeline.merge_vocab(cfg, args.od, args.out)
    if c == "sample-epoch":
        return pipeline.sample_epoch(cfg, args.od, args.out)
    if c == "extract-regions":
        return pipeline.extract_regions(cfg, args.detections, args.out)
    if c == "build-corpus":
        return pipeline.build_corpus(cfg, args.data, args.regions, args.out)
    if c == "pretrain":
        return pipeline.pretrain(cfg, args.corpus, args.out, args.resume, on_step=_progress)
    if c == "finetune":
        return pipeline.finetune(cfg, args.task, args.corpus, args.out, args.checkpoint)
    if c == "evaluate":
        return pipeline.evaluate(cfg, args.task, args.corpus, args.checkpoint, args.out)
    if c == "caption":
        return pipeline.caption(cfg, args.corpus, args.checkpoint, args.out)
    if c == "bench-nms":
        return pipeline.bench_nms_run(cfg, args.out, args.boxes, args.classes, args.trials)
    raise AssertionError(f"unhandled subcommand {c}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        result = run(args)
    except (pipeline.MissingInputError, FileNotFoundError) as exc:
        print(f"vinvl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"vinvl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (pipeline.DataInvariantError, *pipeline.DATA_ERRORS) as exc:
        print(f"vinvl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(result.path / pipeline.MANIFEST_NAME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
