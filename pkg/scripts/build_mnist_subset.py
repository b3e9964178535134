"""Rebuild data/mnist/mnist10k-*.gz from the digits bundled in the npm `mnist` package.

The npm package (v1.1.0) stores 10,000 MNIST digits as one JSON file per class
with pixels pre-divided by 255 and rounded to three decimals; rounding
``value * 255`` recovers the original bytes exactly. Images are shuffled with a
fixed seed so any prefix is class-balanced.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits
"""

import argparse
import gzip
import json
from pathlib import Path

import numpy as np

from c2hm.data_io import BUNDLED_DIR, BUNDLED_IMAGES, BUNDLED_LABELS, write_idx
from c2hm.rng import SeededRng

SHUFFLE_SEED = 20240601


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("--out", type=Path, default=BUNDLED_DIR)
    args = parser.parse_args()

    images, labels = [], []
    for c in range(10):
        flat = np.array(json.loads((args.digits_dir / f"{c}.json").read_text())["data"])
        block = np.rint(flat.reshape(-1, 784) * 255).astype(np.uint8)
        images.append(block)
        labels.append(np.full(len(block), c, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = SeededRng(SHUFFLE_SEED).permutation(len(labels))
    images, labels = images[order].reshape(-1, 28, 28), labels[order]

    args.out.mkdir(parents=True, exist_ok=True)
    for name, arr in ((BUNDLED_IMAGES, images), (BUNDLED_LABELS, labels)):
        (args.out / name).write_bytes(gzip.compress(write_idx(arr), mtime=0))
    print(f"wrote {len(labels)} digits to {args.out}")


if __name__ == "__main__":
    main()
