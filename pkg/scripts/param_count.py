"""Per-layer parameter breakdown of the full-width networks against the reference totals."""
import argparse
from fractions import Fraction

from deepgait.model import REFERENCE_PARAMS, ModelConfig, count_parameters, format_breakdown


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scale", type=Fraction, default=Fraction(1))
    ap.add_argument("--variant", choices=("fused", "independent"), default="fused")
    args = ap.parse_args()
    for depth in ("conv9", "conv5"):
        cfg = ModelConfig(depth=depth, variant=args.variant, channel_scale=args.scale)
        total, rows = count_parameters(cfg)
        ref = REFERENCE_PARAMS[depth] if args.scale == 1 and args.variant == "fused" else None
        print(f"== {args.variant} {depth} at scale {args.scale}")
        print(format_breakdown(total, rows, ref))
        print()


if __name__ == "__main__":
    main()
