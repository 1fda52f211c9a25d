#!/usr/bin/env python3
"""Convert the digit samples bundled with the `mnist` npm package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_digits_idx.py package/src/digits tests/data/digits

Writes gzipped train/t10k image and label files (8000/2000 split, fixed seed).
"""
import argparse
import gzip
import json
import pathlib
import struct

import numpy as np


def write_idx(path, array, dtype_code=0x08):
    header = struct.pack(">HBB", 0, dtype_code, array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for d in range(10):
        data = json.load(open(pathlib.Path(args.digits_dir) / f"{d}.json"))["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.rint(arr * 255.0).clip(0, 255))
        labels.append(np.full(len(arr), d))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    n = args.train

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[:n])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:n])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[n:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[n:])
    print(f"wrote {n} train / {len(labels) - n} test samples to {out}")


if __name__ == "__main__":
    main()
