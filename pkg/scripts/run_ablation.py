"""Variant grid on the held-out phantom benchmark, averaged over seeds.

    python3 scripts/run_ablation.py --out-dir runs/ablation --seeds 0 1 2
"""
import argparse

from segstitch.ablation import VARIANTS, comparison_table
from segstitch.benchmarks import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=None, help="defaults to the benchmark budget")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    args = ap.parse_args()
    kw = {} if args.epochs is None else {"epochs": args.epochs}
    out = run_ablation(args.out_dir, args.seeds, variants=args.variants, verbose=True, **kw)
    print(comparison_table(out.summary))
    print("val-loss delta roughness:", {k: round(v, 5) for k, v in out.roughness.items()})
    print(f"{out.seconds:.0f} s")


if __name__ == "__main__":
    main()
