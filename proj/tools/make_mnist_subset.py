#!/usr/bin/env python3
"""Build the desk-scale MNIST subset (IDX, gzipped) used by the acceptance suite.

Source: the `mnist` npm package (src/digits/<d>.json), which ships 10000 MNIST
digits as pixel/255 values rounded to three decimals. The rounding is well
below half a grey level, so round(v * 255) recovers the original bytes.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

N_TRAIN, N_TEST, SEED = 5000, 1000, 20190417


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    samples = []
    for digit in range(10):
        raw = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        count = len(raw) // 784
        for i in range(count):
            px = [min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784]]
            samples.append((px, digit))
    random.Random(SEED).shuffle(samples)
    train, test = samples[:N_TRAIN], samples[N_TRAIN:N_TRAIN + N_TEST]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"{len(samples)} digits available; wrote {len(train)} train / {len(test)} test to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
