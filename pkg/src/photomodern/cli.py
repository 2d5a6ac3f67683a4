"""Command-line interface.

Subcommands: gen-data, train, modernize, evaluate, attention-study, and
toy-corpus (a convenience for offline smoke runs).  Exit codes: 0 success,
1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from . import datagen, metrics, toydata, training
from .backbone import split_input
from .imageops import load_image, save_heatmap, save_image, to_tensor
from .merger import modernize
from .seeds import derive_seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photomodern",
                                     description="multi-reference old photo modernization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic samples from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-refs", type=int, default=2)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("train", "eval"), default="train")
    p.add_argument("--size", type=int, default=None,
                   help="resize corpus items to SIZE x SIZE first")

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--config", required=True)
    p.add_argument("--prev", default=None, help="previous stage's checkpoint (stages 2/3)")
    p.add_argument("--resume", default=None, help="same-stage checkpoint to continue from")

    p = sub.add_parser("modernize", help="modernize one photo with N references")
    p.add_argument("--input", required=True)
    p.add_argument("--ref", action="append", required=True,
                   help="reference image (repeat for multiple)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention", default=None, metavar="DIR")
    p.add_argument("--save-merged", default=None, metavar="PATH")

    p = sub.add_parser("evaluate", help="score a checkpoint on evaluation pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default="psnr,ssim")

    p = sub.add_parser("attention-study", help="thresholded-attention mIoU on synthetic samples")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--n-refs", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", default=None, help="directory for per-sample heatmaps")

    p = sub.add_parser("toy-corpus", help="write a procedural segmentation corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_gen_data(args) -> int:
    paths = datagen.generate_dataset(args.corpus, args.out, count=args.count,
                                     n_refs=args.n_refs, seed=args.seed,
                                     kind=args.kind, size=args.size)
    print(f"wrote {len(paths)} {args.kind} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = training.parse_config(args.config)
    cfg.stage = args.stage
    ckpt = training.train(cfg, prev_ckpt=args.prev, resume=args.resume)
    print(f"stage {args.stage} checkpoint: {ckpt}")
    return 0


def _cmd_modernize(args) -> int:
    net = training.load_modernizer(args.ckpt)
    content = load_image(args.input)
    refs = [load_image(r) for r in args.ref]
    result = modernize(net, content, refs)
    save_image(args.out, result["image"])
    if args.save_merged:
        save_image(args.save_merged, result["merged"])
    if args.dump_attention:
        os.makedirs(args.dump_attention, exist_ok=True)
        stem = os.path.splitext(os.path.basename(args.out))[0]
        for i, weight in enumerate(result["weights"]):
            save_heatmap(os.path.join(args.dump_attention, f"{stem}_attn_{i}.png"), weight)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    net = training.load_modernizer(args.ckpt)
    model = lambda content, refs: modernize(net, content, refs)["image"]
    names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    report = metrics.evaluate(args.pairs, model, metrics=names, out_dir=args.out)
    means = "  ".join(f"{k}={v:.4f}" for k, v in report.means.items())
    print(f"{report.count} pairs  {means}")
    return 0


def _cmd_attention_study(args) -> int:
    net = training.load_modernizer(args.ckpt)
    corpus = datagen.Corpus(args.corpus, size=args.size)
    per_sample = []
    for i in range(args.count):
        seed = derive_seed(args.seed, i)
        sample, _ = datagen.draw_sample_from_corpus(corpus, args.n_refs, seed, kind="train")
        c_t, c_high = split_input(sample.content)
        with torch.no_grad():
            result = net.modernize_t(c_t, c_high, [to_tensor(r) for r in sample.refs])
        weights = result.weights[:, 0].numpy()
        _, miou = metrics.attention_miou(weights, sample.masks, threshold=args.threshold)
        per_sample.append(miou)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            for r, w in enumerate(weights):
                save_heatmap(os.path.join(args.out, f"sample{i:04d}_attn_{r}.png"), w)
    mean = float(np.mean(per_sample))
    print(f"attention mIoU over {len(per_sample)} samples: {mean:.4f}")
    return 0


def _cmd_toy_corpus(args) -> int:
    toydata.make_toy_corpus(args.out, count=args.count, size=args.size, seed=args.seed)
    print(f"wrote {args.count} toy scenes under {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "modernize": _cmd_modernize,
    "evaluate": _cmd_evaluate,
    "attention-study": _cmd_attention_study,
    "toy-corpus": _cmd_toy_corpus,
}


def cli(argv=None) -> int:
    """Parse and run; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
