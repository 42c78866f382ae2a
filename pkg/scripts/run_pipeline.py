"""Full desk pipeline: data, base model, single/stack/fusion adapters, evaluation, parameter table.

Equivalent to running the CLI subcommands in order; reports land in <out>/reports.
"""

import argparse
import sys

from unislp.cli import main as cli

STAGES = [
    ["train-base", "--config", "presets/base.json"],
    ["train-adapter", "--config", "presets/single_asr.json"],
    ["train-adapter", "--config", "presets/single_sf.json"],
    ["train-adapter", "--config", "presets/single_ic.json"],
    ["train-adapter", "--config", "presets/single_er.json"],
    ["train-adapter", "--config", "presets/stack_asr_er.json"],
    ["train-adapter", "--config", "presets/fusion_sf_ic.json", "--lambda-preset", "one"],
]
EVALS = ["base", "single_asr", "single_sf", "single_ic", "single_er", "stack_asr_er", "fusion_sf_ic"]


def run(argv):
    print("$ unislp " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, help="override every stage's step count")
    ap.add_argument("--limit", type=int, help="evaluate only the first N test examples")
    args = ap.parse_args()
    common = ["--out-dir", args.out_dir, "--seed", str(args.seed)]
    steps = ["--steps", str(args.steps)] if args.steps else []
    run(["gen-data", *common])
    for stage in STAGES:
        run([*stage, *common, *steps])
    limit = ["--limit", str(args.limit)] if args.limit else []
    for name in EVALS:
        run(["eval", "--config", f"presets/{name}.json", *common, *limit])
    run(["count-params", *common])


if __name__ == "__main__":
    main()
