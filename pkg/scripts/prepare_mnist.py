#!/usr/bin/env python3
"""Cut a class-balanced MNIST subset and write it as gzipped IDX files.

The repo ships data/mnist/ produced by this script: 5000 training samples
(500 per digit, first occurrences in the original order) and 1000 test
samples (100 per digit). Point --source at a directory containing the
original files (train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte, optionally .gz) to
regenerate; they are available from the usual MNIST mirrors.
"""

from __future__ import annotations

import argparse
import gzip
import struct
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from kdfs.datasets import load_idx  # noqa: E402


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, _, h, w = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def balanced_subset(labels: np.ndarray, per_class: int) -> np.ndarray:
    picks = []
    for k in range(10):
        rows = np.flatnonzero(labels == k)
        if rows.size < per_class:
            raise SystemExit(f"class {k} has only {rows.size} samples, need {per_class}")
        picks.append(rows[:per_class])
    return np.sort(np.concatenate(picks))


def find(source: Path, stem: str) -> Path:
    for cand in (source / stem, source / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise SystemExit(f"missing {stem}[.gz] under {source}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", required=True, help="directory with the original IDX files")
    ap.add_argument("--dest", default="data/mnist")
    ap.add_argument("--train-per-class", type=int, default=500)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    source, dest = Path(args.source), Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)

    train = load_idx(find(source, "train-images-idx3-ubyte"),
                     find(source, "train-labels-idx1-ubyte"))
    test = load_idx(find(source, "t10k-images-idx3-ubyte"),
                    find(source, "t10k-labels-idx1-ubyte"))

    tr = balanced_subset(train.labels, args.train_per_class)
    te = balanced_subset(test.labels, args.test_per_class)
    write_idx_images(dest / "train-images.idx.gz", train.images[tr])
    write_idx_labels(dest / "train-labels.idx.gz", train.labels[tr])
    write_idx_images(dest / "test-images.idx.gz", test.images[te])
    write_idx_labels(dest / "test-labels.idx.gz", test.labels[te])
    print(f"wrote {tr.size} train / {te.size} test samples to {dest}")


if __name__ == "__main__":
    main()
