"""Paired benchmark: baseline detector vs the fully regularized detector over several seeds.

Prints one line per seed and the number of seeds on which counting MAE and
mAP are not worse than the baseline. Optionally writes the comparison as JSON.
"""
import argparse
import json
import time
from pathlib import Path

from cellpr.config import RunConfig
from cellpr.pipeline import ABLATION_ROWS, paired_comparison, run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    ap.add_argument("--n-seeds", type=int, help="seeds 0..n-1 (default from the configuration)")
    ap.add_argument("--out", help="write comparison.json here")
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    n_seeds = args.n_seeds or cfg.n_seeds
    rows = (ABLATION_ROWS[0], ABLATION_ROWS[-1])
    t0 = time.perf_counter()
    outcomes = {}
    for s in range(n_seeds):
        outcomes[s] = run_seed(cfg.with_seed(s), s, rows)
        b, o = outcomes[s][0].summary, outcomes[s][1].summary
        print(f"seed {s}: MAE {b.counts.mean_mae:.3f} -> {o.counts.mean_mae:.3f}  "
              f"mAP {b.detection.map:.3f} -> {o.detection.map:.3f}", flush=True)
    cmp = paired_comparison(outcomes, rows[0][0], rows[-1][0])
    seconds = time.perf_counter() - t0
    print(f"MAE not worse {cmp['mae_not_worse']}/{cmp['n']}, mAP not worse {cmp['map_not_worse']}/{cmp['n']}, "
          f"{seconds:.0f} s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps({**cmp, "seconds": seconds}, indent=2))


if __name__ == "__main__":
    main()
