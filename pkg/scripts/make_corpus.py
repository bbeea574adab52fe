"""Regenerate the packaged default corpus (deterministic)."""
import argparse

from npft.data import default_corpus_path, synthetic_text

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--bytes", type=int, default=600_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    out = args.out or default_corpus_path()
    with open(out, "w", encoding="utf-8") as f:
        f.write(synthetic_text(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {out}")
