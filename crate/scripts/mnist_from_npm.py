#!/usr/bin/env python3
"""Build gzipped IDX files from the digit JSON shipped in the npm `mnist` package.

The package (MIT, github.com/cazala/mnist) carries 10,000 MNIST digits stored
as pixel/255 rounded to three decimals. Bytes are recovered with round(v*255).
The digits are shuffled with a fixed seed and split 8000 train / 2000 test.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, rows):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for r in rows:
            f.write(bytes(r))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pix = [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            samples.append((pix, digit))
    random.Random(20200101).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    write_images(dst / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {dst}")


if __name__ == "__main__":
    main()
