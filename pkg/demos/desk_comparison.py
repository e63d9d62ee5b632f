"""Desk-scale comparison of CsiNet-LSTM, CsiNet and LASSO over three seeds.

Each seed generates its own 2000/400/400-group dataset (N_c = 64, N_t = 8,
N_c' = 8, T = 4), trains CsiNet at CR 1/4 (the first-frame encoder) and at
CR 1/16, 1/32, 1/64, then trains CsiNet-LSTM at each low CR starting from the
two standalone CsiNets. LASSO (FISTA, 2000 iterations, λ picked on
validation) runs on the same test groups.

Results are cached per seed under results/desk/, keyed by the plan and a
fingerprint of the code, so rerunning is cheap until something changes.

    python3 demos/desk_comparison.py [seeds...]
"""
import logging
import sys
import time
from pathlib import Path

from csifb.experiment import DeskPlan, average_results, run_seed_cached
from csifb.metrics import make_report, report_json, report_text

CACHE = Path(__file__).resolve().parent.parent / "results" / "desk"


def main(seeds):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    plan = DeskPlan()
    runs, timings = [], []
    for seed in seeds:
        t0 = time.perf_counter()
        results, t = run_seed_cached(plan, seed, CACHE)
        print(f"seed {seed}: {time.perf_counter() - t0:.0f} s here, {t['total_s']:.0f} s when computed")
        print(report_text(results))
        runs.append(results)
        timings.append(t)

    mean = average_results(runs)
    print(f"mean over seeds {list(seeds)}")
    print(report_text(mean))
    total = sum(t["total_s"] for t in timings)
    print(f"compute time for all seeds: {total / 60:.1f} min")
    print(f"DL per-frame inference {timings[0]['dl_frame_s'] * 1e3:.2f} ms, "
          f"2000-iteration LASSO {timings[0]['lasso2000_frame_s'] * 1e3:.1f} ms")
    (CACHE / "summary.json").write_text(report_json(make_report(
        mean, {"seeds": list(seeds), "compute_s": total})))


if __name__ == "__main__":
    main([int(s) for s in sys.argv[1:]] or [0, 1, 2])
