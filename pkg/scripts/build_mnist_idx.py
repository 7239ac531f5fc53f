"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package (MIT, github.com/cazala/mnist) bundles 10 000 MNIST digits as
784-float arrays rounded to three decimals. Rounding ``v * 255`` recovers the
original uint8 pixels exactly (max error 0.125 < 0.5).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_idx.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src, dst, seed=0):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        arr = np.rint(np.asarray(flat, dtype=np.float64) * 255).astype(np.uint8)
        arr = arr.reshape(-1, 28, 28)
        images.append(arr)
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    dst.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    print(f"wrote {n} digits to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
