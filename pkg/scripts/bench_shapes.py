"""Per-matvec latency of the full, packed and mixed paths over square shapes."""
import argparse

from threadpoolctl import threadpool_limits

from npft.bench import bench_matvec

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", type=int, nargs="+", default=[128, 512, 1024, 2048])
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--outlier-ratio", type=float, default=0.005)
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    print(f"{'dim':>6} {'full us':>10} {'uniform us':>11} {'mixed us':>10}")
    with threadpool_limits(limits=args.threads):
        for d in args.dims:
            t = bench_matvec(d, d, args.bits, args.outlier_ratio, args.repeats)
            print(f"{d:>6} {t['full'] * 1e6:>10.1f} {t['uniform'] * 1e6:>11.1f} {t['mixed'] * 1e6:>10.1f}")
