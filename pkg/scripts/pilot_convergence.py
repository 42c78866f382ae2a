"""Pilot runs that calibrate the convergence thresholds used by the test suite.

Writes results/pilot_convergence.json with steps-to-target for several seeds.
"""

import argparse
import json
import statistics
from pathlib import Path

from unislp import pilots


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="results/pilot_convergence.json")
    args = ap.parse_args()

    out = {"overfit_base": {}, "adapter_classification": {}, "loss_decrease": {}}
    for seed in args.seeds:
        r = pilots.overfit_base(seed=seed)
        out["overfit_base"][seed] = {"reached": r.reached, "steps": r.steps, "seconds": round(r.seconds, 1)}
        r = pilots.adapter_classification(seed=seed)
        out["adapter_classification"][seed] = {"reached": r.reached, "steps": r.steps,
                                               "seconds": round(r.seconds, 1)}
        first, last = pilots.loss_decrease(seed)
        out["loss_decrease"][seed] = {"first10": first, "last10": last}
        print(seed, out["overfit_base"][seed], out["adapter_classification"][seed], out["loss_decrease"][seed])
    drops = [v["first10"] - v["last10"] for v in out["loss_decrease"].values()]
    out["loss_decrease_median_drop"] = statistics.median(drops)
    out["max_steps"] = {k: max(v["steps"] for v in out[k].values())
                        for k in ("overfit_base", "adapter_classification")}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out["max_steps"]), out["loss_decrease_median_drop"])


if __name__ == "__main__":
    main()
