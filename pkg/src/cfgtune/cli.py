"""Command line: ``cfgtune run`` and ``cfgtune replay``."""

from __future__ import annotations

import argparse
import logging
import sys

from jsonschema import ValidationError as SchemaError

from .costs import ConfigurationError
from .pipeline import EXIT_CONFIG, PROVIDERS, load_config, run_pipeline, summary_lines
from .runlog import read_runlog


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfgtune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="optimize guidance scales for one edit")
    r.add_argument("--config", help="JSON file whose keys mirror these flags")
    r.add_argument("--image")
    r.add_argument("--instruction")
    r.add_argument("--backend-url")
    r.add_argument("--mock", action="store_true", default=None, help="use the built-in mock backend")
    r.add_argument("--llm-provider", choices=PROVIDERS)
    r.add_argument("--llm-fixture", help="scripted transcript for the mock provider")
    r.add_argument("--llm-model")
    r.add_argument("--max-iters", type=int)
    r.add_argument("--n-init", type=int)
    r.add_argument("--bounds", help="i_min,i_max,t_min,t_max")
    r.add_argument("--seed", type=int)
    r.add_argument("--xi", type=float)
    r.add_argument("--out-dir")
    r.add_argument("--rates", help="JSON rates file for cost accounting")
    r.add_argument("--refine-rounds", type=int)
    r.add_argument("--score-threshold", type=float)
    r.add_argument("--patience", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--mock-target", help="s_image,s_text peak for the mock judge")

    p = sub.add_parser("replay", help="print the summary of an existing runlog")
    p.add_argument("runlog", help="runlog.json or the run directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "replay":
        try:
            record = read_runlog(args.runlog)
        except (OSError, ValueError, SchemaError) as exc:
            print(f"error: cannot read runlog: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print("\n".join(summary_lines(record)))
        return 0

    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = load_config(args.config, overrides)
        result = run_pipeline(settings, progress=print)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("\n".join(summary_lines(result.record)))
    print(f"runlog: {result.runlog_path}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
