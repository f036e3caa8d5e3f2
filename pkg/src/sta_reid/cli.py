"""Command-line entry point.

Subcommands: train, eval, extract, dump-attention, synth.  Configs are
flat key=value files; reports land next to their delimited outputs as
matplotlib figures.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness, report
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, parse_synth_config
from .data import load_dataset, load_tracklet, save_dataset, synth_generate
from .errors import ConfigurationError
from .metrics import RetrievalSet, evaluate_retrieval, load_embeddings


def _load_run_config(args):
    cfg = load_config(args.config)
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _cmd_train(args):
    cfg = _load_run_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = harness.train(cfg, resume=resume)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.stac"
    save_checkpoint(ckpt_path, result.checkpoint)
    paths = report.write_loss_history(result.history, out_dir)
    last = result.history[-1] if result.history else None
    print(f"checkpoint={ckpt_path}")
    for p in paths:
        print(f"wrote={p}")
    if last is not None:
        print(f"final_total={last.total!r}")
    return 0


def _eval_from_embedding_files(args):
    q_emb, q_ids, q_cams, _ = load_embeddings(args.query_stae)
    g_emb, g_ids, g_cams, g_dist = load_embeddings(args.gallery_stae)
    meta = RetrievalSet(q_emb, q_ids, q_cams, g_emb, g_ids, g_cams, g_dist)
    return evaluate_retrieval(meta)


def _cmd_eval(args):
    cfg = _load_run_config(args)
    if bool(args.query_stae) != bool(args.gallery_stae):
        raise ConfigurationError("eval: --query-stae and --gallery-stae must be given together")
    if args.query_stae:
        metrics = _eval_from_embedding_files(args)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        metrics = harness.evaluate(cfg, ckpt, split=args.split, test_n=args.test_n)
    for line in metrics.lines():
        print(line)
    out_dir = Path(cfg.out_dir)
    stem = "metrics" if not args.test_n else f"metrics_n{args.test_n}"
    for p in report.write_metrics(metrics, out_dir, stem=stem):
        print(f"wrote={p}")
    return 0


def _split_tracklets(dataset, name):
    if name == "all":
        pairs = [(t, False) for t in dataset.train + dataset.query + dataset.gallery]
        pairs += [(t, True) for t in dataset.distractor]
        return pairs
    flagged = name == "distractor"
    return [(t, flagged) for t in dataset.split(name)]


def _cmd_extract(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.cfg
    dataset = load_dataset(args.data)
    pairs = _split_tracklets(dataset, args.split)
    tracklets = [t for t, _ in pairs]
    flags = np.array([f for _, f in pairs], dtype=bool)
    harness.extract(cfg, ckpt, tracklets, args.out, distractor_flags=flags, test_n=args.test_n)
    print(f"wrote={args.out}")
    print(f"count={len(tracklets)}")
    return 0


def _cmd_dump_attention(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.cfg
    tracklet = load_tracklet(args.tracklet)
    scores = harness.dump_attention(cfg, ckpt, tracklet, test_n=args.test_n)
    for p in report.write_attention(scores, args.out):
        print(f"wrote={p}")
    return 0


def _cmd_synth(args):
    cfg_path = Path(args.config)
    with open(cfg_path, encoding="utf-8") as fh:
        synth_cfg = parse_synth_config(fh.read())
    dataset = synth_generate(synth_cfg)
    save_dataset(args.out, dataset)
    print(f"wrote={args.out}")
    for split in ("train", "query", "gallery", "distractor"):
        print(f"{split}={len(dataset.split(split))}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sta",
        description="Spatial-temporal attention video re-identification harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p_train.add_argument("--out", help="output directory (overrides config out_dir)")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--test-n", type=int, default=0, help="clip length at test time")
    p_eval.add_argument("--split", default="test", choices=("test", "train"))
    p_eval.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p_eval.add_argument("--out", help="output directory (overrides config out_dir)")
    p_eval.add_argument("--query-stae", help="evaluate from an embeddings file instead of a model")
    p_eval.add_argument("--gallery-stae", help="gallery embeddings file")
    p_eval.set_defaults(func=_cmd_eval)

    p_ext = sub.add_parser("extract", help="export embeddings to a STAE file")
    p_ext.add_argument("--checkpoint", required=True)
    p_ext.add_argument("--data", required=True)
    p_ext.add_argument("--out", required=True)
    p_ext.add_argument("--split", default="all",
                       choices=("all", "train", "query", "gallery", "distractor"))
    p_ext.add_argument("--test-n", type=int, default=0)
    p_ext.set_defaults(func=_cmd_extract)

    p_dump = sub.add_parser("dump-attention", help="export a tracklet's score matrix as CSV")
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--tracklet", required=True, help="tracklet directory")
    p_dump.add_argument("--out", required=True, help="output CSV path")
    p_dump.add_argument("--test-n", type=int, default=0)
    p_dump.set_defaults(func=_cmd_dump_attention)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.checkpoint and not args.query_stae:
        parser.error("eval needs --checkpoint or --query-stae/--gallery-stae")
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
