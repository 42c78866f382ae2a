"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(non-finite loss, failed gradient check, freeze violation), 3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import gradcheck, harness
from .checkpoint import CheckpointError
from .harness import ExperimentConfig, FreezeViolation, MissingArtifact, NumericFailure, Workspace
from .taskspace import parse_output

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _globals(defaults: bool) -> argparse.ArgumentParser:
    # shared so global flags work before or after the subcommand
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = _Parser(add_help=False)
    p.add_argument("--config", default=d(None), help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--out-dir", default=d("runs/default"), help="artifact root")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unislp", description=__doc__.splitlines()[0], parents=[_globals(True)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    g = [_globals(False)]

    p = sub.add_parser("gen-data", parents=g, help="write toy corpora and the vocabulary")
    p.add_argument("--n-asr", type=int, default=500)
    p.add_argument("--n-er", type=int, default=500)
    p.add_argument("--n-sf", type=int, default=300)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("train-base", parents=g, help="train the backbone on transduction data")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train-adapter", parents=g, help="train a single, stack or fusion module")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda-preset", help="named lambda_task preset from the config")

    p = sub.add_parser("eval", parents=g, help="decode a split and write metric reports")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--beam", type=int)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("decode", parents=g, help="decode one example and print the parse")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--beam", type=int)

    p = sub.add_parser("count-params", parents=g, help="additional-parameter table for 6 and 9 tasks")
    p.add_argument("--json", action="store_true")

    sub.add_parser("gradcheck", parents=g, help="finite-difference gradient suite")
    return parser


def load_config(args) -> ExperimentConfig:
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp.seed = args.seed
        exp.model.seed = args.seed
    if getattr(args, "lambda_preset", None):
        exp = exp.with_lambda_preset(args.lambda_preset)
    return exp


def cmd_gen_data(args) -> int:
    ws = Workspace(args.out_dir)
    seed = args.seed if args.seed is not None else 0
    spec = harness.DataSpec(args.n_asr, args.n_er, args.n_sf, args.noise)
    for name, path in harness.generate_data(ws, seed, spec).items():
        print(f"{name}\t{path}")
    return EXIT_OK


def _print_history(result) -> None:
    for rec in result.history:
        print(json.dumps(rec, sort_keys=True))


def cmd_train_base(args) -> int:
    exp = load_config(args)
    if args.steps:
        exp.steps = args.steps
    path, result = harness.train_base(exp, Workspace(args.out_dir))
    _print_history(result)
    print(f"checkpoint\t{path}")
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    exp = load_config(args)
    path, result, _, module = harness.train_adapter(exp, Workspace(args.out_dir), steps=args.steps)
    _print_history(result)
    print(f"trainable\t{len(module.trainable_set)} tensors")
    print(f"checkpoint\t{path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = load_config(args)
    report = harness.evaluate(exp, Workspace(args.out_dir), args.split, beam_size=args.beam, limit=args.limit)
    print("\n".join(harness.report_lines(report)))
    return EXIT_OK


def cmd_decode(args) -> int:
    exp = load_config(args)
    ws = Workspace(args.out_dir)
    vocab = harness.load_vocab(ws)
    model, module = harness.load_for_module(exp, ws, vocab, include_owner=True)
    examples = harness.load_split(ws, exp, args.split)
    if not 0 <= args.index < len(examples):
        raise UsageError(f"--index must lie in [0, {len(examples)})")
    ex = examples[args.index]
    decode = harness.decode_config_for(exp, **({"beam_size": args.beam} if args.beam else {}))
    best, _ = harness.decode_example(model, module, ex.features, exp, vocab, decode)
    parsed = parse_output(best.tokens, vocab, exp.module.tasks)
    print(json.dumps({
        "reference": ex.transcript,
        "hypothesis": vocab.render(best.output),
        "score": best.joint,
        "payloads": parsed.payloads,
        "flags": {"absent": sorted(parsed.absent), "empty": sorted(parsed.empty),
                  "malformed": sorted(parsed.malformed), "surplus": parsed.surplus,
                  "truncated": parsed.truncated},
    }, indent=2))
    return EXIT_OK


def cmd_count_params(args) -> int:
    exp = load_config(args)
    tables = {n: harness.report_params(exp.model, tasks)
              for n, tasks in ((6, harness.TABLE_TASKS_6), (9, harness.TABLE_TASKS_9))}
    if args.json:
        print(json.dumps(tables, indent=2))
        return EXIT_OK
    print("tasks\ttask\tkind\tmarginal\tours\tdedicated\tratio")
    for r in tables[9]:
        print(f"{r['tasks']}\t{r['task']}\t{r['kind']}\t{r['marginal']}\t{r['ours']}\t{r['dedicated']}\t{r['ratio']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed or 0)
    worst = max(r.max_rel_err for r in results)
    for r in results:
        print(f"{r.name}\t{r.max_rel_err:.3e}\t{r.n_coords}")
    print(f"max_rel_err\t{worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data, "train-base": cmd_train_base, "train-adapter": cmd_train_adapter,
    "eval": cmd_eval, "decode": cmd_decode, "count-params": cmd_count_params, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, FreezeViolation, FloatingPointError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
