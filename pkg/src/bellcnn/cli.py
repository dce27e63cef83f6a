"""Command-line surface tying the engine together.

Subcommands: wrangle (metadata + images -> split manifest), train
(manifest -> frozen model + summaries), retrain-head (frozen trunk ->
retrained final layer), infer (model + image -> confidence scores),
eval (model + manifest -> accuracy and P/T table), summarize (summary
CSV -> smoothed per-metric series).

Exit status: 0 on success, 2 on usage errors, 1 on runtime failures,
each with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import data as dw
from .errors import EngineError
from .freeze import freeze, thaw
from .model import BellConfig, build_bellcnn
from .optim import AdamHyper
from .training import (
    CsvSummarySink,
    TrainConfig,
    evaluate,
    fit_model,
    format_eval_row,
    read_summary,
    smooth_series,
)
from .transfer import (
    BottleneckStore,
    cache_bottlenecks,
    format_scores,
    graph_from_head,
    infer_scores,
    scores_from_graph,
    train_head,
    trunk_from_graph,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bellcnn",
        description="From-scratch CNN engine: wrangle, train, freeze, infer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("wrangle", help="build a train/test split manifest")
    p.add_argument("--csv", required=True, help="study metadata CSV")
    p.add_argument("--images", required=True, help="directory of PGM images")
    p.add_argument("--out", required=True, help="manifest path to write")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--test-frac", type=float, required=True)

    p = sub.add_parser("train", help="train a BellCNN and freeze it")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="frozen model path")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batches", type=int, default=7)
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--summary", required=True, help="summary CSV path")
    p.add_argument("--snapshot-every", type=int, default=100)
    p.add_argument("--snapshot-dir", default=None,
                   help="write snap_<step>.bcnn files here (off when omitted)")
    p.add_argument("--input-size", type=int, default=None,
                   help="square input extent; default: first train image's size")
    p.add_argument("--alpha", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--wallclock", action="store_true",
                   help="record real elapsed ms in summaries (off by default "
                        "so reruns are byte-identical)")

    p = sub.add_parser("retrain-head", help="retrain only the final layer "
                                            "on a frozen trunk")
    p.add_argument("--manifest", required=True)
    p.add_argument("--trunk", required=True, help="frozen model to reuse")
    p.add_argument("--cache", required=True, help="bottleneck cache directory")
    p.add_argument("--out", required=True, help="frozen head path")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.001)

    p = sub.add_parser("infer", help="print confidence scores for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("eval", help="accuracy and per-image P/T table")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("summarize", help="emit smoothed per-metric series")
    p.add_argument("--summary", required=True)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_wrangle(args) -> int:
    records = dw.parse_metadata_csv(args.csv)
    labels = {rec.id: dw.label_from_cdr(rec) for rec in records}
    image_paths = sorted(Path(args.images).glob("*.pgm"))
    pairs = dw.match_images_to_subjects(image_paths, records)
    entries = [dw.ManifestEntry(sid, str(path), labels[sid], "train")
               for sid, path in pairs]
    if not entries:
        print("error: no images matched any subject id", file=sys.stderr)
        return 1
    split = dw.shuffle_split(entries, args.seed, args.test_frac)
    for e in split.test:
        e.split = "test"
    ordered = split.train + split.test
    dw.write_manifest(ordered, args.out)
    print(f"wrote {len(ordered)} entries "
          f"({len(split.train)} train, {len(split.test)} test) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    entries = dw.read_manifest(args.manifest)
    train_entries = [e for e in entries if e.split == "train"]
    if not train_entries:
        print("error: manifest has no train entries", file=sys.stderr)
        return 1
    if args.input_size is not None:
        size = args.input_size
    else:
        size = _native_size(train_entries[0].image_path)
    examples = dw.load_examples(entries, size, size, split="train")
    test_examples = dw.load_examples(entries, size, size, split="test")
    split = dw.DatasetSplit(examples, test_examples, args.seed,
                            len(test_examples) / len(entries))

    cfg = BellConfig(input_w=size, input_h=size, seed=args.seed)
    graph = build_bellcnn(cfg)
    train_cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                            batches_per_epoch=args.batches,
                            snapshot_interval=args.snapshot_every,
                            seed=args.seed, adam=AdamHyper(alpha=args.alpha),
                            snapshot_dir=args.snapshot_dir)
    clock = time.monotonic if args.wallclock else None
    with CsvSummarySink(args.summary, clock=clock) as sink:
        fit_model(graph, split, train_cfg, sink)
    checksum = freeze(graph, args.out)
    print(f"trained {train_cfg.total_steps} steps; froze model to {args.out} "
          f"(crc32 {checksum:08x})")
    return 0


def _native_size(image_path: str) -> int:
    from .data import _read_pgm_tokens
    header = Path(image_path).read_bytes()[:256]
    (width, height, _), _ = _read_pgm_tokens(header[2:], 3)
    return min(width, height)


def _cmd_retrain_head(args) -> int:
    trunk_graph = thaw(args.trunk)
    h, w = trunk_graph.input_shape[0], trunk_graph.input_shape[1]
    entries = dw.read_manifest(args.manifest)
    examples = dw.load_examples(entries, w, h, split="train")
    if not examples:
        print("error: manifest has no train entries", file=sys.stderr)
        return 1
    trunk = trunk_from_graph(trunk_graph, f"bcnn-{Path(args.trunk).stem}")
    store = BottleneckStore(args.cache)
    vectors = cache_bottlenecks([ex.image for ex in examples], trunk, store)
    labeled = list(zip(vectors, (ex.label for ex in examples)))
    head = train_head(labeled, AdamHyper(alpha=args.alpha), args.steps)
    checksum = freeze(graph_from_head(head), args.out)
    print(f"retrained head for {args.steps} steps on {len(labeled)} bottlenecks; "
          f"froze to {args.out} (crc32 {checksum:08x})")
    return 0


def _cmd_infer(args) -> int:
    graph = thaw(args.model)
    h, w = graph.input_shape[0], graph.input_shape[1]
    image = dw.load_image(args.image, w, h)
    scores = scores_from_graph(graph, image)
    sys.stdout.write(format_scores(scores))
    return 0


def _cmd_eval(args) -> int:
    graph = thaw(args.model)
    h, w = graph.input_shape[0], graph.input_shape[1]
    entries = dw.read_manifest(args.manifest)
    examples = dw.load_examples(entries, w, h, split=args.split)
    if not examples:
        print(f"error: manifest has no {args.split} entries", file=sys.stderr)
        return 1
    accuracy, rows = evaluate(graph, examples)
    for row in rows:
        print(format_eval_row(row))
    print(f"accuracy {accuracy:.6g}")
    return 0


def _cmd_summarize(args) -> int:
    rows = read_summary(args.summary)
    if not rows:
        print("error: summary file holds no rows", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = [r.step for r in rows]
    for metric in ("loss", "accuracy"):
        raw = [getattr(r, metric) for r in rows]
        smoothed = smooth_series(raw, factor=0.9)
        with open(out_dir / f"{metric}.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("step,smoothed,raw\n")
            for s, sm, x in zip(steps, smoothed, raw):
                fh.write(f"{s},{sm!r},{x!r}\n")
    print(f"wrote loss.csv and accuracy.csv to {out_dir}")
    return 0


_COMMANDS = {
    "wrangle": _cmd_wrangle,
    "train": _cmd_train,
    "retrain-head": _cmd_retrain_head,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "summarize": _cmd_summarize,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
