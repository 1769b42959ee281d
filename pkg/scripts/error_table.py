"""Per-axis error table on a synthetic corpus.

Rows: fused conv9 under each augmentation, raw (non-differential) input, and
the subject-disjoint cross-validation. Defaults take about 80 minutes on one core.

    python scripts/error_table.py --subjects 10 --steps 50 --out results/table.txt
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from deepgait.experiments import DESK_MODEL, DESK_TRAIN, mixed_step
from deepgait.gaitsim import generate_corpus
from deepgait.pipeline import AugmentSpec
from deepgait.training import cross_validate
from deepgait.trajectory import format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=DESK_TRAIN.epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-crossval", action="store_true")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    steps = generate_corpus(args.subjects, args.steps, seed=args.seed)
    tcfg = replace(DESK_TRAIN, epochs=args.epochs)
    rows, stride = [], None
    for label, aug in [("fused conv9 / combined", AugmentSpec(mode="combined")),
                       ("fused conv9 / sliding", AugmentSpec(mode="sliding")),
                       ("fused conv9 / random", AugmentSpec(mode="random")),
                       ("fused conv9 / none", AugmentSpec(mode="none")),
                       ("fused conv9 / raw sliding", AugmentSpec(mode="sliding", differential=False))]:
        t0 = time.time()
        res = mixed_step(steps, aug, DESK_MODEL, tcfg, seed=args.seed)
        stride = res.stride
        rows.append((label, res.report))
        print(res.report.row(label), f"  [{time.time() - t0:.0f}s]", flush=True)
    if not args.no_crossval:
        reports, summary = cross_validate(steps, DESK_MODEL, tcfg, AugmentSpec(), k=6, seed=args.seed)
        best = summary["best"]
        rows.append(("fused conv9 / walker-disjoint best", best))
        print(best.row("fused conv9 / walker-disjoint best"), flush=True)
        print("cross-validation mean X/Y/Z:", " ".join(f"{v:.2f}" for v in summary["mean"]))
    text = format_table(rows) + f"\n\nmean test stride {stride:.1f} cm\n"
    print(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


if __name__ == "__main__":
    main()
