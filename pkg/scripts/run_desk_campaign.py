#!/usr/bin/env python3
"""End-to-end desk-net campaign: complete analysis, exhaustive weight FI on
a 15% channel sample, and the MAE comparison between them.

Writes all reports under results/ (JSON + CSV) and prints the headline
numbers.  Expects the committed artifacts in data/.

    python3 scripts/run_desk_campaign.py [--workers N] [--quick]

--quick swaps the exhaustive FI for a 10% stratified analysis run, which
finishes in under a minute and still exercises every report surface.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vfscan.cli import CliConfig, cmd_analyze, cmd_compare, cmd_fi

ROOT = os.path.join(os.path.dirname(__file__), "..")
MODEL = os.path.join(ROOT, "data", "desk_net.vglm")
BATCH = os.path.join(ROOT, "data", "desk_batch.vglb")
RESULTS = os.path.join(ROOT, "results")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    os.makedirs(RESULTS, exist_ok=True)

    analysis_out = os.path.join(RESULTS, "analysis_complete.json")
    print("== complete analysis (activations + filters) ==")
    cmd_analyze(CliConfig(command="analyze", model=MODEL, batch=BATCH,
                          mode="both", sampling="complete", seed=args.seed,
                          workers=args.workers, out=analysis_out))
    cmd_analyze(CliConfig(command="analyze", model=MODEL, batch=BATCH,
                          mode="both", sampling="complete", seed=args.seed,
                          workers=args.workers, format="csv",
                          out=analysis_out.replace(".json", ".csv")))

    if args.quick:
        print("\n== stratified 10% analysis ==")
        cmd_analyze(CliConfig(command="analyze", model=MODEL, batch=BATCH,
                              mode="both", sampling="ratio", ratio=0.10,
                              seed=args.seed, workers=args.workers,
                              out=os.path.join(RESULTS, "analysis_sampled.json")))
        return

    fi_out = os.path.join(RESULTS, "fi_weights_15pct.json")
    print("\n== exhaustive weight FI on 15% of channels ==")
    cmd_fi(CliConfig(command="fi", model=MODEL, batch=BATCH, mode="filters",
                     fi_mode="exhaustive", sampling="ratio", ratio=0.15,
                     seed=args.seed, workers=args.workers, out=fi_out))

    print("\n== analysis vs FI comparison ==")
    cmd_compare(CliConfig(command="compare", seed=args.seed,
                          workers=args.workers,
                          out=os.path.join(RESULTS, "mae_analysis_vs_fi.json")),
                analysis_out, fi_out, "filters", "fi", "intersect")


if __name__ == "__main__":
    main()
