"""``attnhess`` command line: verify | scaling | spectrum | histogram | depth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import COMMANDS, ConfigError, ExperimentConfig
from .oracle import OracleError
from .tensor_kit import SizeLimitError

log = logging.getLogger("attnhess")

HELP = {
    "verify": "compare every analytic Hessian block with finite differences (exit 1 on failure)",
    "scaling": "sweep the input scale and fit log-log slopes of block norms",
    "spectrum": "eigenvalues of the T-outer, T-functional and full Hessians",
    "histogram": "log-binned absolute entries of the query and value blocks",
    "depth": "value-block growth for stacked linear attention vs a linear chain",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnhess", description="Exact Hessians of self-attention.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        s = sub.add_parser(name, help=text, description=text)
        s.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
        s.add_argument("--out", type=Path, help="output directory (default: config output_path)")
        s.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads for independent cells")
        s.add_argument("--svg", action="store_true", help="also write SVG charts")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
        if args.seed_offset:
            cfg = cfg.shifted(args.seed_offset)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = args.out if args.out is not None else Path(cfg.output_path)
        result = COMMANDS[args.command](cfg, out, threads=args.threads, make_svg=args.svg)
    except (ConfigError, SizeLimitError, OracleError, ValueError, OSError) as exc:
        print(f"attnhess {args.command}: error: {exc}", file=sys.stderr)
        return 2
    log.info("wrote %s results to %s", args.command, out)
    if args.command == "verify" and not result:
        print("attnhess verify: some checks failed; see verify.json", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
