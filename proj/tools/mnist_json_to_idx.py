#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

The npm package (https://www.npmjs.com/package/mnist) bundles 10,000 MNIST
digits as normalized floats, one JSON file per class. This writes a fixed,
seeded 8000/2000 train/test split in the standard IDX layout:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_json_to_idx.py package/src/digits data/mnist
"""

import argparse
import json
import random
import struct
from pathlib import Path


def write_idx_images(path, images, rows, cols):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20210101)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        data = json.loads((Path(args.digits_dir) / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            pixels = [max(0, min(255, round(v * 255.0))) for v in data[i:i + 784]]
            samples.append((pixels, digit))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test], samples[args.test:]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, split in (("train", train), ("t10k", test)):
        write_idx_images(out / f"{prefix}-images-idx3-ubyte", [s[0] for s in split], 28, 28)
        write_idx_labels(out / f"{prefix}-labels-idx1-ubyte", [s[1] for s in split])
        print(f"{prefix}: {len(split)} images")


if __name__ == "__main__":
    main()
