"""Command-line entry point: ``npft <subcommand> --config cfg.json``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure at run time.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .autodiff import NonFiniteError
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
    common.add_argument("--threads", type=int, default=None, help="BLAS / kernel thread count")
    common.add_argument("--deterministic", action="store_true", help="force a single thread")

    p = argparse.ArgumentParser(prog="npft", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train-base", parents=[common], help="pre-train the base model")
    t.add_argument("--resume", type=Path, help="continue from a base checkpoint")
    t.add_argument("--until", type=int, help="stop after this many total steps")
    n = sub.add_parser("npft", parents=[common], help="noise-perturbed LoRA fine-tuning")
    n.add_argument("--base", type=Path, help="base checkpoint (default: <out>/base.ckpt)")
    n.add_argument("--control", action="store_true", help="run the no-noise LoRA control arm")
    q = sub.add_parser("quantize", parents=[common], help="quantize checkpoints with every configured arm")
    q.add_argument("checkpoints", nargs="+", type=Path)
    e = sub.add_parser("eval", parents=[common], help="perplexity table over checkpoints")
    e.add_argument("checkpoints", nargs="+", type=Path)
    s = sub.add_parser("sweep", parents=[common], help="ablation grid along one axis")
    s.add_argument("--axis", required=True, choices=("gamma", "beta", "layers", "noise"))
    s.add_argument("--base", type=Path, help="base checkpoint (default: <out>/base.ckpt)")
    b = sub.add_parser("bench", parents=[common], help="generation latency benchmark")
    b.add_argument("--checkpoint", type=Path, help="model to benchmark (default: fresh init)")
    r = sub.add_parser("report", parents=[common], help="per-channel sensitivity before/after fine-tuning")
    r.add_argument("run_dir", type=Path, nargs="?", help="run directory (default: <out>)")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    threads = 1 if args.deterministic else args.threads
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = dataclasses.replace(cfg, bench=dataclasses.replace(cfg.bench, threads=threads))
    return cfg


def _run(args, cfg: ExperimentConfig) -> None:
    from . import pipeline as pl

    out = Path(cfg.out_dir)
    if args.command == "train-base":
        pl.stage_train_base(cfg, out, resume=args.resume, until=args.until)
    elif args.command == "npft":
        pl.stage_npft(cfg, out, args.base or out / "base.ckpt", control=args.control)
    elif args.command == "quantize":
        pl.stage_quantize(cfg, out / "quant", args.checkpoints)
    elif args.command == "eval":
        pl.stage_eval(cfg, out, args.checkpoints)
    elif args.command == "sweep":
        pl.stage_sweep(cfg, out, args.base or out / "base.ckpt", args.axis)
    elif args.command == "bench":
        pl.stage_bench(cfg, out, args.checkpoint)
    elif args.command == "report":
        pl.stage_report(cfg, args.run_dir or out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        from threadpoolctl import threadpool_limits

        threads = cfg.bench.threads if (args.threads or args.deterministic) else None
        with threadpool_limits(limits=threads):
            _run(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
