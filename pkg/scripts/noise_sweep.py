"""Test X error against accelerometer noise level on small synthetic corpora."""
import argparse

from deepgait.experiments import noise_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    errs = noise_sweep(args.sigmas, tuple(args.seeds))
    print("sigma(m/s^2)  " + "  ".join(f"seed{s:<4}" for s in args.seeds) + "  mean")
    for sigma, row in zip(args.sigmas, errs):
        print(f"{sigma:<13.3f} " + "  ".join(f"{v:8.2f}" for v in row) + f"  {row.mean():6.2f}")


if __name__ == "__main__":
    main()
