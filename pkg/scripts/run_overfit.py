"""Train the tiny network on four phantoms and report train loss / mDSC.

    python3 scripts/run_overfit.py --out-dir runs/overfit --epochs 300
"""
import argparse

from segstitch.benchmarks import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = run_overfit(args.out_dir, args.epochs, args.seed, verbose=True)
    print(f"final train loss {res.final_train_loss:.4f}  train mDSC {res.train_mdsc:.4f}  "
          f"{res.epochs} epochs in {res.seconds:.0f} s")


if __name__ == "__main__":
    main()
