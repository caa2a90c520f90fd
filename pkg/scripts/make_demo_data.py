"""Regenerate the bundled demo dataset, its grid and its true parameters.

Usage:
    python3 scripts/make_demo_data.py [--out DIR]

Without ``--out`` the files inside the package (``src/stnngp/data``) are rewritten.
The simulation settings, including the pinned seed, come from ``demo.toml``, so
the output is byte-identical to the checked-in files.
"""
import argparse
import sys
from pathlib import Path

import stnngp
from stnngp.cli import main as cli

DATA = Path(stnngp.__file__).parent / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(DATA))
    args = ap.parse_args()
    target = Path(args.out) / "demo.csv"
    return cli(["simulate", "--config", str(DATA / "demo.toml"), "--data", str(target)])


if __name__ == "__main__":
    sys.exit(main())
