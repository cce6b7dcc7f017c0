#!/usr/bin/env python3
"""Run the bundled desk-scale pipeline end to end.

Thin wrapper over `levelkgp pipeline` so the reference experiment is one
command from a checkout.  Everything lands in the output directory:
q-tables, per-state models, synthetic trajectories, fit reports, and the
summary files.
"""

import argparse
import sys
from pathlib import Path

from levelkgp.cli import main as cli_main

REPO = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config",
        default=str(REPO / "configs" / "desk.json"),
        help="master config (default: the bundled desk config)",
    )
    parser.add_argument("--out-dir", default=None, help="override output directory")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument(
        "--no-train", action="store_true", help="reuse q-tables and models if present"
    )
    args = parser.parse_args()

    argv = ["pipeline", "--config", args.config]
    if args.out_dir:
        argv += ["--out-dir", args.out_dir]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.no_train:
        argv.append("--no-train")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
