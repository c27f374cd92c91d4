"""Command-line entry point: ``mtcvr <command> [flags]``.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 undefined
metric, 1 anything else.  Failures print a one-line JSON record to stderr.
"""

import argparse
import json
import logging
import sys

from . import experiments as ex
from .errors import ConfigError, DivergenceError, InputError, UndefinedMetricError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_METRIC = 0, 1, 2, 3, 4


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--grid must be comma-separated numbers, got {text!r}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="mtcvr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("generate", "write a synthetic dataset and its ground truth")
    add("train", "train the configured estimator; writes checkpoint.bin and trace.csv")
    sp = add("evaluate", "metric report of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--ground-truth")
    sp = add("bias-audit", "bias of every estimator at frozen predictions")
    sp.add_argument("--dataset")
    sp.add_argument("--ground-truth")
    sp.add_argument("--checkpoint")
    sp.add_argument("--draws", type=int)
    sp = add("sweep", "metric-vs-hyperparameter curves")
    sp.add_argument("--param", required=True, choices=sorted(ex.SWEEP_TARGETS))
    sp.add_argument("--grid", type=_floats)
    sp.add_argument("--repeats", type=int)
    sp = add("compare", "mean and std of every metric per estimator")
    sp.add_argument("--estimator", action="append",
                    help="estimator kind; repeat or comma-separate for several")
    sp.add_argument("--repeats", type=int)
    return p


def _overrides(args):
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "repeats", None) is not None:
        over["repeats"] = args.repeats
    return over


def run(args):
    cfg = ex.load_config(args.config, _overrides(args))
    cmd = args.command
    if cmd == "generate":
        out = ex.cmd_generate(cfg, args.out)
    elif cmd == "train":
        out = {k: v for k, v in ex.cmd_train(cfg, args.out).items() if k != "result"}
    elif cmd == "evaluate":
        out = ex.cmd_evaluate(args.checkpoint, args.dataset, args.ground_truth, args.out).to_dict()
    elif cmd == "bias-audit":
        dataset = truth = None
        if args.dataset:
            from .data import ingest_csv, read_ground_truth
            dataset = ingest_csv(args.dataset)
            truth = read_ground_truth(args.ground_truth) if args.ground_truth else None
        reports = ex.cmd_bias_audit(cfg, dataset, truth, args.draws, args.checkpoint, args.out)
        out = [r.to_dict() for r in reports]
    elif cmd == "sweep":
        out = {"rows": len(ex.cmd_sweep(cfg, args.param, args.grid, None, args.out))}
    else:
        names = None
        if args.estimator:
            names = [n.strip() for item in args.estimator for n in item.split(",") if n.strip()]
        table, _ = ex.cmd_compare(cfg, names, None, args.out)
        out = {"rows": len(table)}
    print(json.dumps(out, sort_keys=True, default=str))
    return EXIT_OK


def _fail(code, exc):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, InputError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, exc)
    except UndefinedMetricError as exc:
        return _fail(EXIT_METRIC, exc)
    except Exception as exc:  # noqa: BLE001 - every failure gets a record
        return _fail(EXIT_OTHER, exc)


if __name__ == "__main__":
    sys.exit(main())
