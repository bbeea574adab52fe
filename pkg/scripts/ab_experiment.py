"""Multi-seed NPFT vs no-noise control on one base checkpoint.

Prints, per seed, the perplexity of each arm at full precision and after RTN
quantization, plus the Fisher mass on the epoch-0 outlier positions before
and after fine-tuning.  Rows are also written to ``<out>/ab.csv``.

    python scripts/ab_experiment.py runs/desk/base.ckpt --config configs/desk.json --seeds 5
"""
import argparse
import csv
import dataclasses
import time
from pathlib import Path

from npft.checkpoint import load_checkpoint
from npft.config import ExperimentConfig, load_config
from npft.finetune import npft_finetune
from npft.model import WeightId, perplexity
from npft.pipeline import calibration, eval_sets, load_data
from npft.quant import QuantConfig, quantize_model
from npft.sensitivity import fisher_diag


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("base", type=Path)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--bits", type=int, nargs="+", default=[4, 3])
    ap.add_argument("--out", type=Path, default=Path("."))
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = load_data(cfg)
    toks = eval_sets(cfg, data)["valid"]
    base = load_checkpoint(args.base).model
    rows = []
    for seed in range(args.seeds):
        calib = calibration(cfg, data, seed)
        for arm, gamma in (("npft", cfg.npft.gamma), ("control", 0.0)):
            t0 = time.perf_counter()
            ncfg = dataclasses.replace(cfg.npft, seed=seed, gamma=gamma)
            merged, log = npft_finetune(base, data.train, calib, ncfg)
            row = {"seed": seed, "arm": arm, "fp": perplexity(merged, toks)}
            for b in args.bits:
                row[f"rtn{b}"] = perplexity(quantize_model(merged, QuantConfig(bits=b)).model, toks)
            if log.masks:
                mask = log.masks[0]
                ids = [WeightId.parse(k) for k in mask.keys()]
                row["mass_before"] = fisher_diag(base, calib, ids).mass(mask)
                row["mass_after"] = fisher_diag(merged, calib, ids).mass(mask)
            row["seconds"] = time.perf_counter() - t0
            rows.append(row)
            print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)

    b = args.bits[0]
    by = {(r["seed"], r["arm"]): r for r in rows}
    wins = sum(by[(s, "npft")][f"rtn{b}"] <= by[(s, "control")][f"rtn{b}"] for s in range(args.seeds))
    drops = sum(by[(s, "npft")]["mass_after"] < by[(s, "npft")]["mass_before"] for s in range(args.seeds))
    print(f"npft <= control at {b} bits: {wins}/{args.seeds}; Fisher mass decreased: {drops}/{args.seeds}")
    args.out.mkdir(parents=True, exist_ok=True)
    fields = sorted({k for r in rows for k in r}, key=lambda k: list(rows[0]).index(k) if k in rows[0] else 99)
    with (args.out / "ab.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
