"""Sweep the group count (or patch area, or neighbour radius) on the phantom.

Thin wrapper over ``dynmri sweep`` that fixes the noiseless phantom protocol:

    python scripts/sensitivity.py --param Ng --values 1,2,4,8,11,16 --out ng.csv
"""

import argparse
import sys

from dynmri.cli import main as cli_main


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--param", default="Ng", choices=["Ng", "L", "R1"])
    ap.add_argument("--values", default="1,2,4,8,11,16")
    ap.add_argument("--frames", type=int, default=3)
    ap.add_argument("--side", type=int, default=64)
    ap.add_argument("--iters", type=int)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    cmd = ["sweep", "--param", args.param, "--values", args.values, "--frames", str(args.frames),
           "--side", str(args.side), "--noiseless"]
    if args.iters:
        cmd += ["--iters", str(args.iters)]
    if args.out:
        cmd += ["--out", args.out]
    return cli_main(cmd)


if __name__ == "__main__":
    sys.exit(main())
