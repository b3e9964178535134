"""Wall time per refinement iteration as the latent width k doubles.

Writes timing.csv and a log-log SVG (k doubles along the x axis, so equal
steps there are equal ratios). Only a measurement; no slope is asserted.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from c2hm.cli import write_csv
from c2hm.inference import amortized_cycle_step, half_cycle_step
from c2hm.model import ModelConfig, init_params
from c2hm.rng import SeededRng
from c2hm.svg import line_plot


def per_step(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ks", type=int, nargs="+", default=[16, 32, 64, 128, 256, 512])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--out", type=Path, default=Path("runs/timing"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    rows, grad_t, amort_t = [], [], []
    psi = SeededRng(0).uniform(784)
    for k in args.ks:
        p = init_params(ModelConfig(d=16, k=k, hidden=256), seed=0)
        phi = np.zeros(16)
        g = per_step(lambda: half_cycle_step(p, phi, psi, 0.01), args.repeats)
        a = per_step(lambda: amortized_cycle_step(p, phi, psi), args.repeats)
        rows.append([k, g, a])
        grad_t.append(g)
        amort_t.append(a)
        print(f"k={k:4d}  gradient {g * 1e3:8.3f} ms  amortized {a * 1e3:8.3f} ms")
    write_csv(args.out / "timing.csv", "timing-v1", ["k", "gradient_seconds", "amortized_seconds"], rows)
    (args.out / "timing.svg").write_text(line_plot(
        {"gradient": np.array(grad_t), "amortized": np.array(amort_t)},
        "Seconds per refinement step", f"k = {', '.join(map(str, args.ks))}", "seconds", log_y=True))


if __name__ == "__main__":
    main()
