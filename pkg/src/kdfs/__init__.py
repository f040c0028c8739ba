"""Differentiable filter pruning engine.

Learns per-filter keep/drop masks through Gumbel-Softmax sampling with a
straight-through gradient, steered by a frozen reference network (feature
reconstruction + softened-logit distillation) and a global FLOPs budget,
then physically extracts and fine-tunes the compact network.
"""

__version__ = "0.1.0"

from .errors import KdfsError  # noqa: F401
from .tensor import Tape, Tensor, backward  # noqa: F401
