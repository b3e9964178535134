"""Run the synthetic experiments and the planner benchmark with default settings.

Equivalent to calling ``c2hm-lab exp-curse``, ``exp-delta``, ``plan`` and
``plan --random 0 --count 20`` in turn, with all output under one directory.
"""

import argparse
import sys
from pathlib import Path

from c2hm.cli import main as lab


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/experiments"))
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    common = ["--seed", str(args.seed)]
    jobs = {
        "curse": ["exp-curse"],
        "delta": ["exp-delta"],
        "scenarios": ["plan"],
        "random": ["plan", "--random", "0", "--count", "20"],
    }
    codes = {}
    for name, argv in jobs.items():
        print(f"== {name}")
        codes[name] = lab(argv + common + ["--out", str(args.out / name)])
    failed = [k for k, c in codes.items() if c != 0]
    print("all passed" if not failed else f"failed: {', '.join(failed)}")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
