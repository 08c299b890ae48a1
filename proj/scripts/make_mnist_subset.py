#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the digits bundled in the npm `mnist`
package (10,000 real MNIST digits stored as JSON, pixel values /255 rounded to
three decimals).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist

Per class, the first 80% of digits go to the training file and the rest to the
test file; both files are then shuffled with a fixed seed.
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np

SIDE = 28


def write_idx(prefix: Path, images: np.ndarray, labels: np.ndarray) -> None:
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">BBBBIII", 0, 0, 8, 3, len(images), SIDE, SIDE))
        f.write(images.astype(np.uint8).tobytes())
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">BBBBI", 0, 0, 8, 1, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        raw = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
        imgs = np.rint(raw.reshape(-1, SIDE * SIDE) * 255.0).clip(0, 255)
        cut = int(round(0.8 * len(imgs)))
        train_x.append(imgs[:cut])
        test_x.append(imgs[cut:])
        train_y.append(np.full(cut, digit))
        test_y.append(np.full(len(imgs) - cut, digit))
    rng = np.random.default_rng(0)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        perm = rng.permutation(len(y))
        write_idx(dst / name, x[perm], y[perm])
        print(f"{name}: {len(y)} images")


if __name__ == "__main__":
    main()
