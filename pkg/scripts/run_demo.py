"""Run every subcommand on the bundled demo dataset.

Usage:
    python3 scripts/run_demo.py [--out demo_out] [--iterations 600]

Fits the model at m = 10 and m = 20, predicts on the 3 x 3 demo grid for 24
months, runs the holdout validation, prints the DIC table and the posterior
summary. All outputs land under ``--out``.
"""
import argparse
import sys
from pathlib import Path

import stnngp
from stnngp.cli import main as cli

DEMO = str(Path(stnngp.__file__).parent / "data" / "demo.toml")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    out = Path(args.out)
    run = ["--iterations", str(args.iterations), "--burn-in", str(args.iterations // 2), "--threads",
           str(args.threads)]
    steps = [
        ["fit", "--config", DEMO, "--out", str(out / "m10"), "--m", "10"] + run,
        ["fit", "--config", DEMO, "--out", str(out / "m20"), "--m", "20"] + run,
        ["predict", "--config", DEMO, "--out", str(out / "prediction"), "--archive", str(out / "m10" / "archive"),
         "--threads", str(args.threads)],
        ["validate", "--config", DEMO, "--out", str(out / "validation")] + run,
        ["dic", str(out / "m10" / "archive"), str(out / "m20" / "archive"), "--config", DEMO, "--out",
         str(out / "dic")],
        ["summary", str(out / "m10" / "archive"), "--out", str(out / "summary")],
    ]
    for argv in steps:
        print(f"\n$ stnngp {' '.join(argv)}", flush=True)
        code = cli(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
