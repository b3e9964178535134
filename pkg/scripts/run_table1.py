"""Train both models on several seeds and print the metrics table.

    python scripts/run_table1.py --seeds 1 2 3 4 5 --out runs/table1
"""

import argparse
from pathlib import Path

from c2hm.cli import build_config, cmd_train
from c2hm.metrics import read_metrics_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    parser.add_argument("--out", type=Path, default=Path("runs/table1"))
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    args = parser.parse_args()

    rows, wins = [], 0
    for seed in args.seeds:
        out = args.out / f"seed{seed}"
        report = cmd_train(build_config(overrides=args.overrides, seed=seed, out=str(out)))
        report.write(out)
        rows += read_metrics_csv((out / "metrics.csv").read_text())
        wins += report.passed
        for v in report.verdicts:
            print(f"seed {seed} {v.line()}")

    print(f"\n{'model':<10} {'seed':>4} {'RE':>8} {'CC':>10} {'GF':>7} {'LC':>8}")
    for r in rows:
        print(f"{r.model:<10} {r.seed:>4} {r.re:8.4f} {r.cc:10.4f} {r.gf:7.4f} {r.lc:8.4f}")
    print(f"\nseeds with every check passing: {wins}/{len(args.seeds)}")


if __name__ == "__main__":
    main()
