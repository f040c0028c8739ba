#!/usr/bin/env python3
"""Drive the full MNIST desk experiment through the CLI pipeline.

Trains the reference network on the shipped 5000-sample MNIST subset,
prunes it toward the requested compression rate, fine-tunes the compact
network, exports it, and prints the evaluation and comparison reports.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from kdfs.cli import main as kdfs_main  # noqa: E402

CONFIG = """\
[run]
out_dir = {out}
seed = {seed}

[dataset]
kind = idx
train_images = {data}/train-images.idx.gz
train_labels = {data}/train-labels.idx.gz
test_images = {data}/test-images.idx.gz
test_labels = {data}/test-labels.idx.gz

[model]
widths = 16,32,64
blocks = 1,1,1
stem_stride = 2

[train]
epochs = {epochs}
finetune_epochs = {finetune_epochs}
teacher_epochs = {teacher_epochs}
batch_size = 64

[loss]
compression_rate = {r}
"""


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--data", default=str(ROOT / "data" / "mnist"))
    ap.add_argument("--r", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--finetune-epochs", type=int, default=10)
    ap.add_argument("--teacher-epochs", type=int, default=15)
    args = ap.parse_args()

    text = CONFIG.format(out=args.out, data=args.data, r=args.r, seed=args.seed,
                         epochs=args.epochs, finetune_epochs=args.finetune_epochs,
                         teacher_epochs=args.teacher_epochs)
    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(text)
        cfg = fh.name

    for phase in ("train-teacher", "prune", "finetune", "export", "eval", "report"):
        print(f"== {phase}")
        code = kdfs_main([phase, "--config", cfg])
        if code != 0:
            print(f"{phase} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
