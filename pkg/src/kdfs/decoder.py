"""Stage-feature reconstruction decoders.

One small decoder sits at the end of every stage during pruning training.
It maps the masked student's stage features back onto the frozen teacher's,
and the Frobenius norm of the residual is the reconstruction loss that
lets the teacher's representation steer which filters survive. Decoders
are training-only scaffolding; exported models never contain them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import kaiming_conv
from .tensor import Tensor


@dataclass
class DecoderSpec:
    depth: int  # hidden 3x3 conv+ReLU layers
    channels: int  # stage width, kept through every layer
    stage: int  # which stage end this decoder sits at
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth not in (1, 2):
            raise ConfigError(f"decoder depth must be 1 or 2, got {self.depth}")
        if self.channels < 1:
            raise ConfigError("decoder needs at least one channel")


class Decoder:
    """`depth` hidden 3x3 conv+ReLU layers of the stage width followed by a
    linear 1x1 projection; stride 1 and padding preserve spatial size."""

    def __init__(self, spec: DecoderSpec, seed: int = 0):
        self.spec = spec
        gen = rngmod.stream(seed, rngmod.INIT, 2, spec.stage)
        c, k = spec.channels, spec.kernel_size
        self.hidden: list[tuple[Tensor, Tensor]] = []
        for _ in range(spec.depth):
            w = Tensor(kaiming_conv(gen, c, c, k), requires_grad=True)
            b = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
            self.hidden.append((w, b))
        self.out_w = Tensor(kaiming_conv(gen, c, c, 1), requires_grad=True)
        self.out_b = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        pad = self.spec.kernel_size // 2
        h = x
        for w, b in self.hidden:
            h = T.relu(T.channel_bias(T.conv2d(h, w, 1, pad), b))
        return T.channel_bias(T.conv2d(h, self.out_w, 1, 0), self.out_b)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.hidden):
            out.append((f"d{self.spec.stage}.h{i}.w", w))
            out.append((f"d{self.spec.stage}.h{i}.b", b))
        out.append((f"d{self.spec.stage}.out.w", self.out_w))
        out.append((f"d{self.spec.stage}.out.b", self.out_b))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def build_decoder(spec: DecoderSpec, seed: int = 0) -> Decoder:
    return Decoder(spec, seed)


def build_stage_decoders(stage_widths: list[int], depth: int, seed: int = 0) -> list[Decoder]:
    return [build_decoder(DecoderSpec(depth=depth, channels=w, stage=i), seed)
            for i, w in enumerate(stage_widths)]


def rl_loss(teacher_features: Tensor, decoded: Tensor) -> Tensor:
    """Frobenius norm of the reconstruction residual over the whole batch
    tensor (not squared, not mean-reduced; the loss weight absorbs scale)."""
    if teacher_features.shape != decoded.shape:
        raise DimensionError(
            f"feature shapes differ: teacher {teacher_features.shape} vs decoded {decoded.shape}")
    return T.frobenius_norm(T.sub(teacher_features, decoded))
