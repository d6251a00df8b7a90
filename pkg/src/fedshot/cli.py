"""Command-line runner: ``fedshot <synth|prep|e1|e2|pca|report> [flags]``.

Flags given on the command line override the config file. Each stage prints
a JSON summary on stdout; ``report`` prints a text table. Exit status is 0 on
success, 2 for configuration errors, 3 for data errors, 4 for numeric
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import FedshotError

log = logging.getLogger("fedshot")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--alpha", type=float, help="local weight in the local-global blend")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedshot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write seeded synthetic datasets")
    prep = sub.add_parser("prep", parents=[common], help="FSEG segments -> FEMB embeddings")
    prep.add_argument("--input", help="FSEG file (default: E2 segments in out dir)")
    prep.add_argument("--output", help="FEMB file (default: out_dir/embeddings.femb)")
    prep.add_argument("--encoder", help="FPRM checkpoint holding encoder tensors")
    e1 = sub.add_parser("e1", parents=[common], help="federated fine-tuning")
    e1.add_argument("--data", help="FSEG or FEMB training data")
    e2 = sub.add_parser("e2", parents=[common], help="federated few-shot personalization")
    e2.add_argument("--data", help="FSEG or FEMB data")
    e2.add_argument("--encoder", help="FPRM checkpoint from e1")
    pca = sub.add_parser("pca", parents=[common], help="per-client 2-d PCA projections")
    pca.add_argument("--embeddings", help="FEMB file (default: E2 embeddings in out dir)")
    pca.add_argument("--tasks", help="task manifest (default: E2 tasks in out dir)")
    sub.add_parser("report", parents=[common], help="print a summary of finished stages")
    return p


def _run(args) -> object:
    overrides = {"seed": args.seed, "alpha": args.alpha, "out_dir": args.out_dir}
    if args.command == "e1":
        overrides["e1_data"] = args.data
    elif args.command == "e2":
        overrides["e2_data"] = args.data
        overrides["encoder_checkpoint"] = args.encoder
    cfg = load_config(args.config, **overrides)
    if args.command == "synth":
        return pipeline.cmd_synth(cfg)
    if args.command == "prep":
        return pipeline.cmd_prep(cfg, args.input, args.output, args.encoder)
    if args.command == "e1":
        return pipeline.cmd_e1(cfg)
    if args.command == "e2":
        return pipeline.cmd_e2(cfg)
    if args.command == "pca":
        return pipeline.cmd_pca(cfg, args.embeddings, args.tasks)
    return pipeline.cmd_report(cfg)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        result = _run(args)
    except FedshotError as exc:
        kind = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}
        print(f"{kind.get(exc.exit_code, 'fedshot')} error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(result, str):
        print(result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
