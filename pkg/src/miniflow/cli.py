"""Command-line driver: train, sample, sweep, eval, inspect-teacher."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from miniflow.binio import FormatError
from miniflow.checkpoint import load_checkpoint
from miniflow.config import ConfigError, RunConfig, load_config, with_overrides
from miniflow.harness import build_world, evaluate_state, run_sample, run_sweep, run_train
from miniflow.supervision import load_teacher_file


def _base_config(args, lam=None, depth_n=None) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return with_overrides(
        cfg,
        seed=args.seed,
        steps=getattr(args, "steps", None),
        out_dir=args.out,
        lam=lam,
        depth_n=depth_n,
        teacher=getattr(args, "teacher", None),
    )


def cmd_train(args) -> int:
    cfg = _base_config(args,
                       lam=float(args.lam) if args.lam else None,
                       depth_n=int(args.depth) if args.depth else None)
    result = run_train(cfg, resume_from=args.resume)
    final = result.state
    print(f"trained {final.step} steps -> {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_sample(args) -> int:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"samples_caption{args.caption_id}.lats")
    latents = run_sample(args.checkpoint, args.caption_id, steps=args.steps or 20,
                         count=args.count, seed=args.seed if args.seed is not None else 0,
                         out_path=path)
    print(f"wrote {len(latents)} latents for caption {args.caption_id} -> {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _base_config(args)
    # grid defaults: the published ablation shape (six weights, three stages)
    lams = [float(x) for x in args.lam.split(",")] if args.lam else [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    if args.depth:
        depths = [int(x) for x in args.depth.split(",")]
    else:
        d = cfg.model.depth
        depths = sorted({max(1, d // 3), max(1, (2 * d) // 3), d})
    result = run_sweep(cfg, lams, depths)
    with open(result.report_text_path, "r", encoding="utf-8") as f:
        print(f.read(), end="")
    print(f"pareto report: {result.report_text_path} / {result.report_csv_path}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    world = build_world(state.config)
    result = evaluate_state(state, world, seed=args.seed)
    print(f"frechet_gap = {result.frechet_gap!r}")
    print(f"alignment_score = {result.align_score!r}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("frechet_gap,alignment_score\n")
            f.write(result.row() + "\n")
        print(f"wrote {path}")
    return 0


def cmd_inspect_teacher(args) -> int:
    try:
        teacher_map = load_teacher_file(args.path)
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    widths = {emb.vectors.shape for emb in teacher_map.values()}
    k, e = next(iter(widths))
    norms = np.concatenate([np.linalg.norm(emb.vectors, axis=1)
                            for emb in teacher_map.values()])
    print(f"magic: TEMB  version: 1  records: {len(teacher_map)}  tokens: {k}  width: {e}")
    print(f"caption ids: {sorted(teacher_map)[:16]}{' ...' if len(teacher_map) > 16 else ''}")
    print(f"row norms: min {norms.min():.6f}  mean {norms.mean():.6f}  max {norms.max():.6f}")
    zero = int(np.count_nonzero(norms == 0.0))
    if zero:
        print(f"note: {zero} zero-norm rows (padding tokens pool to nothing)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miniflow",
        description="Desk-scale flow-matching transformer with vision-aligned "
                    "text feature supervision")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=True):
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        if steps:
            p.add_argument("--steps", type=int, help="training step count override")
        p.add_argument("--lambda", dest="lam",
                       help="supervision weight override (comma list for sweep)")
        p.add_argument("--depth",
                       help="injection depth override (comma list for sweep)")
        p.add_argument("--teacher", help="teacher source: 'synthetic' or a TEMB path")

    p_train = sub.add_parser("train", help="train a model per the config")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(fn=cmd_train)

    p_sample = sub.add_parser("sample", help="generate latents from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--caption-id", dest="caption_id", type=int, required=True)
    p_sample.add_argument("--count", type=int, default=1)
    p_sample.add_argument("--steps", type=int, help="Euler steps (default 20)")
    p_sample.add_argument("--seed", type=int)
    p_sample.add_argument("--out")
    p_sample.set_defaults(fn=cmd_sample)

    p_sweep = sub.add_parser("sweep", help="train a lambda x depth grid and report the Pareto frontier")
    common(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--out")
    p_eval.set_defaults(fn=cmd_eval)

    p_inspect = sub.add_parser("inspect-teacher", help="validate and summarize a TEMB file")
    p_inspect.add_argument("path")
    p_inspect.set_defaults(fn=cmd_inspect_teacher)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, KeyError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
