"""``evmamba`` command line: gen, train, eval, inspect.

Errors are reported as a single ``error: <Kind>: <message>`` line on stderr
with exit status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config, apply_overrides
from .harness import (
    category_names, evaluate, generate_dataset, inspect_sample, load_model, load_split,
    train,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # keep bad invocations on the one-line error path
    def error(self, message):
        raise UsageError(message)


def _parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for the data generator or model init")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    p = _Parser(prog="evmamba")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("dataset")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint", help="run directory or model.ckpt")
    e.add_argument("dataset")
    i = sub.add_parser("inspect", parents=[common], help="stream and trajectory diagnostics")
    i.add_argument("sample")
    return p


def _config(args, seed_key):
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        apply_overrides(cfg, [f"{seed_key}={args.seed}"])
    return apply_overrides(cfg, args.set)


def _need_out(args):
    if not args.out:
        raise ValueError("--out is required")
    return Path(args.out)


def run(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "gen":
        cfg = _config(args, "data.seed")
        n = generate_dataset(cfg.data, _need_out(args))
        print(json.dumps({"written": n, "out": str(args.out)}))
    elif args.command == "train":
        cfg = _config(args, "model.seed")
        history, _ = train(cfg, args.dataset, _need_out(args),
                           on_epoch=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    elif args.command == "eval":
        model, cfg = load_model(args.checkpoint)
        names = category_names(args.dataset)
        if len(names) != cfg.model.categories:
            raise ValueError(f"dataset has {len(names)} categories, checkpoint expects "
                             f"{cfg.model.categories}")
        items, labels = load_split(args.dataset, "test", cfg.model)
        report = evaluate(model, items, labels, names=names)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.json").write_text(report.to_json() + "\n")
            (out / "confusion.csv").write_text(report.confusion_csv())
        print(report.to_json())
    elif args.command == "inspect":
        cfg = _config(args, "model.seed")
        print(json.dumps(inspect_sample(args.sample, cfg.model), sort_keys=True))
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        return run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # one line, machine-parseable
        msg = " ".join(str(exc).split()) or repr(exc)
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
