"""Command line interface.

Subcommands cover the full workflow: ``generate`` a synthetic dataset,
``train`` a detector, ``eval`` a checkpoint on a split, ``detect`` on a
single pair (optionally writing an overlay image), ``bench`` inference
throughput and ``ablate`` the pooling variants. Every command reads the
same key=value config file; command line flags override it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    CLASS_NAMES,
    ImagePair,
    binarize,
    load_deeppcb,
    read_image,
)
from .evaluation import fps_benchmark, read_detections, evaluate, write_detections
from .generator import generate_pairs
from .model import DefectDetector, load_checkpoint
from .trainer import detect_all, evaluate_model, load_samples, run_ablation, train

logger = logging.getLogger(__name__)

_OVERLAY_COLORS = {
    1: (230, 60, 60),
    2: (60, 120, 230),
    3: (230, 160, 40),
    4: (60, 200, 90),
    5: (200, 60, 200),
    6: (60, 210, 210),
}


def _load_config(args: argparse.Namespace) -> RunConfig:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("data_root", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return run.with_overrides(**overrides) if overrides else run


def _cmd_generate(args: argparse.Namespace) -> int:
    run = _load_config(args)
    index = generate_pairs(
        run.data_root,
        num_train=run.num_train,
        num_test=run.num_test,
        seed=run.data_seed,
        config=run.to_generator_config(),
    )
    print(
        f"wrote {len(index.train)} train and {len(index.test)} test pairs "
        f"under {index.root}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    run = _load_config(args)
    index = load_deeppcb(run.data_root)
    samples = load_samples(index, "train", allow_lossy=args.allow_lossy)
    result = train(run, samples, out_dir=args.out, resume_from=args.resume)
    if result.checkpoint_path is not None:
        print(f"final checkpoint: {result.checkpoint_path}")
    print(f"final training loss: {result.history[-1]:.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    run = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    index = load_deeppcb(run.data_root)
    samples = load_samples(index, args.split, allow_lossy=args.allow_lossy)

    if args.detections and Path(args.detections).exists() and not args.overwrite:
        detections = read_detections(args.detections)
        truths = {s.pair.source_id: list(s.annotations) for s in samples}
        report = evaluate(
            detections, truths,
            iou_threshold=run.eval_iou_threshold,
            score_threshold=run.f_score_threshold,
        )
    else:
        detections = detect_all(model, samples, run)
        if args.detections:
            write_detections(args.detections, detections)
        report = evaluate_model(model, samples, run)

    print(report.as_text())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    return 0


def _cmd_detect(args: argparse.Namespace) -> int:
    run = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    pair = ImagePair(
        template=binarize(read_image(args.template, allow_lossy=args.allow_lossy)),
        tested=binarize(read_image(args.tested, allow_lossy=args.allow_lossy)),
        source_id=Path(args.tested).stem,
    )
    detections = model.detect(pair, run.to_nms_params())
    h, w = pair.shape
    for d in detections:
        x1, y1, x2, y2 = d.box.corners()
        print(
            f"{CLASS_NAMES[d.class_id]:<16} score {d.score:.3f}  "
            f"[{x1 * w:.0f}, {y1 * h:.0f}, {x2 * w:.0f}, {y2 * h:.0f}]"
        )
    if not detections:
        print("no defects found")
    if args.out:
        write_detections(args.out, {pair.source_id: detections})
        print(f"detections written to {args.out}")
    if args.overlay:
        _write_overlay(args.overlay, pair.tested, detections)
        print(f"overlay written to {args.overlay}")
    return 0


def _write_overlay(path: str, tested: np.ndarray, detections) -> None:
    from PIL import Image, ImageDraw

    h, w = tested.shape
    img = Image.fromarray((tested * 255).astype(np.uint8), mode="L").convert("RGB")
    draw = ImageDraw.Draw(img)
    for d in detections:
        x1, y1, x2, y2 = d.box.corners()
        draw.rectangle(
            (x1 * w, y1 * h, x2 * w - 1, y2 * h - 1),
            outline=_OVERLAY_COLORS[d.class_id],
            width=max(1, w // 320),
        )
    img.save(path)


def _cmd_bench(args: argparse.Namespace) -> int:
    run = _load_config(args)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = DefectDetector(run.to_model_config())
    model.eval()

    rng = np.random.default_rng(0)
    size = args.size or run.image_size
    pair = ImagePair(
        template=(rng.random((size, size)) < 0.2).astype(np.uint8),
        tested=(rng.random((size, size)) < 0.2).astype(np.uint8),
        source_id="bench",
    )
    params = run.to_nms_params()
    result = fps_benchmark(
        lambda: model.detect(pair, params),
        iterations=args.iterations,
        warmup=args.warmup,
    )
    print(f"{size}x{size} pairs: {result.as_text()}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    run = _load_config(args)
    index = load_deeppcb(run.data_root)
    train_samples = load_samples(index, "train", allow_lossy=args.allow_lossy)
    test_samples = load_samples(index, "test", allow_lossy=args.allow_lossy)
    result = run_ablation(
        run,
        train_samples,
        test_samples,
        variants=tuple(args.variants),
        seeds=tuple(args.seeds),
        out_dir=args.out,
    )
    print(result.as_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcbdet",
        description="Pairwise PCB defect detection: synthesize, train, evaluate.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, func) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--data-root", dest="data_root", help="dataset directory override")
        p.set_defaults(func=func)
        return p

    add("generate", "write a synthetic dataset", _cmd_generate).add_argument(
        "--seed", type=int, help="training seed override (data_seed comes from the config)"
    )

    p = add("train", "train a detector", _cmd_train)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--allow-lossy", action="store_true", help="accept lossy-compressed images")

    p = add("eval", "evaluate a checkpoint on a split", _cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--detections", help="detections file to write, or reuse if it exists")
    p.add_argument("--overwrite", action="store_true", help="recompute an existing detections file")
    p.add_argument("--report", help="write the report as JSON here")
    p.add_argument("--allow-lossy", action="store_true")

    p = add("detect", "detect defects on one pair", _cmd_detect)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--tested", required=True)
    p.add_argument("--out", help="write a detections file here")
    p.add_argument("--overlay", help="write the tested image with boxes drawn")
    p.add_argument("--allow-lossy", action="store_true")

    p = add("bench", "measure detection throughput", _cmd_bench)
    p.add_argument("--checkpoint", help="checkpoint to load (default: fresh model)")
    p.add_argument("--size", type=int, help="square input size (default: config image_size)")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)

    p = add("ablate", "train and compare pooling variants", _cmd_ablate)
    p.add_argument("--out", help="checkpoint directory root")
    p.add_argument("--variants", nargs="+", default=["ours-mp", "non-gpp"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--allow-lossy", action="store_true")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
