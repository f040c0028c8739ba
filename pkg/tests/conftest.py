import sys
from pathlib import Path

import numpy as np
import pytest

# the standalone counting script doubles as the FLOPs oracle in tests
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "mnist"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_paths() -> dict:
    return {
        "train_images": DATA_DIR / "train-images.idx.gz",
        "train_labels": DATA_DIR / "train-labels.idx.gz",
        "test_images": DATA_DIR / "test-images.idx.gz",
        "test_labels": DATA_DIR / "test-labels.idx.gz",
    }
