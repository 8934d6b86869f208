"""Command-line entry point.

Exit codes: 0 success, 1 training failure (divergence), 2 bad config or
arguments, 3 missing prerequisite stage, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .fusion import VARIANTS
from .numerics import NonFiniteError
from .pipeline import CorpusMismatchError, MissingStageError, Workspace, table_csv
from .tasks import TASKS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_IO = 0, 1, 2, 3, 4


def _load(args) -> tuple[ExperimentConfig, str]:
    text = ""
    if args.config:
        _, text = load_config(args.config)
    for assignment in args.set or []:
        text += ("" if not text or text.endswith("\n") else "\n") + assignment + "\n"
    if args.output_dir:
        text += f"output_dir = {json.dumps(args.output_dir)}\n"
    cfg = parse_config(text)
    if not cfg.output_dir:
        cfg.output_dir = "runs/default"
    return cfg, text or dump_config(cfg)


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_corpus(ws: Workspace, args):
    _print({"corpus_dir": str(ws.corpus_dir()), **ws.gen_corpus()})


def cmd_train_lm(ws: Workspace, args):
    _print(ws.train_lm())


def cmd_train_bridge(ws: Workspace, args):
    _print(ws.train_bridge())


def cmd_finetune(ws: Workspace, args):
    _print(ws.finetune(args.variant, args.task, args.seed))


def cmd_eval(ws: Workspace, args):
    _print(ws.evaluate(args.variant, args.task, args.seed, args.split))


def cmd_ablate(ws: Workspace, args):
    table = ws.ablate(args.variants, args.seeds, args.task)
    if args.format == "csv":
        sys.stdout.write(table_csv(table))
    else:
        _print(table)


def cmd_decode(ws: Workspace, args):
    _print(ws.decode_report(args.split, args.oracle))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechsem",
                                description="Run the synthetic speech-to-semantics pipeline stage by stage.",
                                epilog="exit codes: 0 ok, 1 divergence, 2 bad config, 3 missing stage, 4 I/O error")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config line (repeatable)")
        sp.add_argument("--output-dir", help="overrides output_dir")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus")
    add("train-lm", cmd_train_lm, "pretrain the denoising LM on unpaired text")
    add("train-bridge", cmd_train_bridge, "train the unsupervised phoneme generator")
    for name, fn, help_ in (("finetune", cmd_finetune, "fine-tune one variant on one task"),
                            ("eval", cmd_eval, "evaluate a fine-tuned variant on a split")):
        sp = add(name, fn, help_)
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--seed", type=int)
        if name == "eval":
            sp.add_argument("--split", default="test", choices=("dev", "test"))
    sp = add("ablate", cmd_ablate, "fine-tune every variant over several seeds and tabulate")
    sp.add_argument("--variants", nargs="+", choices=VARIANTS)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--format", choices=("json", "csv"), default="json")
    sp = add("decode", cmd_decode, "decode a split through the bridge and lexicon; print PER and WER")
    sp.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    sp.add_argument("--oracle", action="store_true", help="use gold one-hot phoneme lattices")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg, text = _load(args)
        ws = Workspace(cfg, text)
        args.fn(ws, args)
    except (ConfigError, CorpusMismatchError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingStageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
