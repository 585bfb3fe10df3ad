#!/usr/bin/env python3
"""Run the full normalization comparison on the synthetic benchmark.

Trains one model per normalization kind under leave-one-subject-out and
prints a combined mean-metric table, plus the inference-method comparison
for the banked variants. Expect a few minutes of runtime with the default
desk-scale settings.
"""

import argparse
import sys

from dsnorm.aggregation import AGGREGATE_METHODS
from dsnorm.data import SyntheticConfig
from dsnorm.harness import ExperimentConfig, METRIC_COLUMNS, run_loso


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--norms", default="bn,in,ibn,dsbn,dsin,dson")
    parser.add_argument("--widths", default="8,16,32",
                        help="comma-separated residual block widths")
    parser.add_argument("--out", default=None, help="also persist reports here")
    args = parser.parse_args()

    synth = SyntheticConfig(seed=args.seed)
    widths = tuple(int(w) for w in args.widths.split(","))

    rows = {}
    method_rows = {}
    for norm in args.norms.split(","):
        banked = norm.startswith("ds")
        methods = AGGREGATE_METHODS if banked else ("avg_prob",)
        config = ExperimentConfig(
            norm=norm,
            methods=methods,
            epochs=args.epochs,
            block_channels=widths,
            synthetic=synth,
            seed=args.seed,
            out_dir=f"{args.out}/{norm}" if args.out else None,
        )
        report = run_loso(config)
        rows[norm] = report.means["avg_prob"]
        if banked:
            method_rows[norm] = report.means
        print(f"finished {norm}", file=sys.stderr)

    header = f"{'norm':<8}" + "".join(f"{c:>11}" for c in METRIC_COLUMNS)
    print("\nmean LOSO performance by normalization (%), avg_prob inference:")
    print(header)
    for norm, values in rows.items():
        print(f"{norm:<8}" + "".join(f"{100 * values[c]:>11.2f}" for c in METRIC_COLUMNS))

    for norm, means in method_rows.items():
        print(f"\ninference methods for {norm} (%):")
        print(f"{'method':<12}" + "".join(f"{c:>11}" for c in METRIC_COLUMNS))
        for method, values in means.items():
            print(f"{method:<12}" + "".join(
                f"{100 * values[c]:>11.2f}" for c in METRIC_COLUMNS
            ))
    return 0


if __name__ == "__main__":
    sys.exit(main())
