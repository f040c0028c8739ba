"""Network construction and execution: conv+BN blocks, residual stages,
masked forward passes, and the zero-padding scatter that keeps pruned
blocks dimension-compatible with their residual connections.

Masks multiply the post-batch-norm, pre-activation output of every
prunable convolution. With ReLU downstream this makes a masked channel
identically zero, which is exactly what physical removal produces, so the
masked network and the extracted compact network agree in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

BN_MOMENTUM = 0.1


@dataclass
class Architecture:
    """Shape of a basic-block residual classifier."""

    widths: list[int]
    blocks: list[int]
    classes: int
    in_channels: int = 1
    image_size: int = 28
    stem_stride: int = 1

    def __post_init__(self):
        if len(self.widths) != len(self.blocks):
            raise ConfigError("widths and blocks must have one entry per stage")
        if not self.widths:
            raise ConfigError("at least one stage is required")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"zero-width stage in {self.widths}")
        if any(b < 1 for b in self.blocks):
            raise ConfigError(f"every stage needs at least one block, got {self.blocks}")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.stem_stride < 1:
            raise ConfigError("stem stride must be >= 1")

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "blocks": list(self.blocks),
            "classes": self.classes,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


class ConvBlock:
    """Convolution + batch norm unit."""

    def __init__(self, weight: np.ndarray, stride: int, padding: int, prunable: bool):
        c_out = weight.shape[0]
        self.weight = Tensor(weight, requires_grad=True)
        self.gamma = Tensor(np.ones(c_out, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c_out, dtype=np.float32)
        self.running_var = np.ones(c_out, dtype=np.float32)
        self.stride = stride
        self.padding = padding
        self.prunable = prunable

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = T.conv2d(x, self.weight, self.stride, self.padding)
        if mode == "train":
            out, mu, var = T.batchnorm_train(h, self.gamma, self.beta)
            self.running_mean += BN_MOMENTUM * (mu - self.running_mean)
            self.running_var += BN_MOMENTUM * (var - self.running_var)
            return out
        a = self.gamma.data / np.sqrt(self.running_var + T.BN_EPS)
        b = self.beta.data - self.running_mean * a
        return T.channel_bias(T.channel_scale(h, Tensor(a)), Tensor(b))

    def params(self) -> list[Tensor]:
        return [self.weight, self.gamma, self.beta]


@dataclass
class BasicBlock:
    conv1: ConvBlock
    conv2: ConvBlock
    shortcut: ConvBlock | None  # 1x1 conv when shape changes, else identity
    out_channels: int
    # kept-channel indices at the block output; None means all channels
    # (set by the pruner, consumed by the zero-padding scatter)
    keep_idx: np.ndarray | None = None


@dataclass
class ForwardTrace:
    logits: Tensor
    stage_features: list[Tensor]


@dataclass
class Network:
    arch: Architecture
    stem: ConvBlock
    stages: list[list[BasicBlock]]
    fc_w: Tensor  # [C_last, classes]
    fc_b: Tensor

    def prunable_convs(self) -> list[ConvBlock]:
        out = []
        for stage in self.stages:
            for block in stage:
                if block.conv1.prunable:
                    out.append(block.conv1)
                if block.conv2.prunable:
                    out.append(block.conv2)
        return out

    def mask_sizes(self) -> list[int]:
        return [c.out_channels for c in self.prunable_convs()]

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("stem.w", self.stem.weight), ("stem.g", self.stem.gamma), ("stem.b", self.stem.beta)]
        for si, stage in enumerate(self.stages):
            for bi, blk in enumerate(stage):
                pre = f"s{si}.b{bi}"
                for cname, conv in (("c1", blk.conv1), ("c2", blk.conv2), ("sc", blk.shortcut)):
                    if conv is None:
                        continue
                    out.append((f"{pre}.{cname}.w", conv.weight))
                    out.append((f"{pre}.{cname}.g", conv.gamma))
                    out.append((f"{pre}.{cname}.b", conv.beta))
        out.append(("fc.w", self.fc_w))
        out.append(("fc.b", self.fc_b))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [("stem.rm", self.stem.running_mean), ("stem.rv", self.stem.running_var)]
        for si, stage in enumerate(self.stages):
            for bi, blk in enumerate(stage):
                pre = f"s{si}.b{bi}"
                for cname, conv in (("c1", blk.conv1), ("c2", blk.conv2), ("sc", blk.shortcut)):
                    if conv is None:
                        continue
                    out.append((f"{pre}.{cname}.rm", conv.running_mean))
                    out.append((f"{pre}.{cname}.rv", conv.running_var))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params():
            p.requires_grad = flag

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)


def build_resnet(arch: Architecture, seed: int = 0) -> Network:
    """Residual network with identity shortcuts (1x1 conv where the shape
    changes). The stem, all shortcut convs and the classifier are never
    prunable; every other conv carries exactly one mask slot."""
    gen = rngmod.stream(seed, rngmod.INIT)
    stem = ConvBlock(kaiming_conv(gen, arch.widths[0], arch.in_channels, 3),
                     stride=arch.stem_stride, padding=1, prunable=False)
    stages: list[list[BasicBlock]] = []
    c_in = arch.widths[0]
    for si, (width, nblocks) in enumerate(zip(arch.widths, arch.blocks)):
        stage = []
        for bi in range(nblocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            conv1 = ConvBlock(kaiming_conv(gen, width, c_in, 3), stride, 1, prunable=True)
            conv2 = ConvBlock(kaiming_conv(gen, width, width, 3), 1, 1, prunable=True)
            shortcut = None
            if stride != 1 or c_in != width:
                shortcut = ConvBlock(kaiming_conv(gen, width, c_in, 1), stride, 0, prunable=False)
            stage.append(BasicBlock(conv1, conv2, shortcut, out_channels=width))
            c_in = width
        stages.append(stage)
    c_last = arch.widths[-1]
    fc_w = Tensor((gen.standard_normal((c_last, arch.classes)) * np.sqrt(2.0 / c_last)).astype(np.float32),
                  requires_grad=True)
    fc_b = Tensor(np.zeros(arch.classes, dtype=np.float32), requires_grad=True)
    return Network(arch, stem, stages, fc_w, fc_b)


def zero_pad_scatter(features: Tensor, mask: np.ndarray) -> Tensor:
    """Scatter pruned feature channels back to their original indices.

    Output channel j carries the next pruned-feature channel when
    mask[j] == 1 (ascending order) and is all-zero otherwise, so residual
    additions keep their original width.
    """
    mask = np.asarray(mask)
    if mask.ndim != 1:
        raise DimensionError(f"mask must be a vector, got shape {mask.shape}")
    idx = np.flatnonzero(mask)
    if features.shape[1] != idx.size:
        raise DimensionError(
            f"mask keeps {idx.size} channels but features have {features.shape[1]}")
    return T.channel_scatter(features, idx, mask.shape[0])


def channel_gather(features: Tensor, mask: np.ndarray) -> Tensor:
    """Inverse of zero_pad_scatter: select the kept channels."""
    idx = np.flatnonzero(np.asarray(mask))
    n, c, h, w = features.shape
    data = features.data[:, idx]
    def bwd(g):
        gx = np.zeros_like(features.data)
        gx[:, idx] = g
        return (gx,)
    return T._apply((features,), data, bwd)


def _block_forward(blk: BasicBlock, x: Tensor, masks: list[Tensor] | None,
                   mask_pos: int, mode: str) -> tuple[Tensor, Tensor, int]:
    """Returns (block output, masked pre-activation of conv2, next mask slot).

    The second tensor is the sampling output this block contributes: the
    post-batch-norm conv2 channels right after masking, before the residual
    shortcut can repopulate dropped channels. Stage-feature capture uses it.
    """
    h = blk.conv1.forward(x, mode)
    if masks is not None and blk.conv1.prunable:
        h = T.channel_scale(h, masks[mask_pos])
        mask_pos += 1
    h = T.relu(h)
    y = blk.conv2.forward(h, mode)
    if masks is not None and blk.conv2.prunable:
        y = T.channel_scale(y, masks[mask_pos])
        mask_pos += 1
    sampled = y
    if blk.keep_idx is not None:
        y = T.channel_scatter(y, blk.keep_idx, blk.out_channels)
        sampled = y
    s = blk.shortcut.forward(x, mode) if blk.shortcut is not None else x
    return T.relu(T.add(y, s)), sampled, mask_pos


def forward(net: Network, batch: Tensor, masks: list[Tensor] | None = None,
            mode: str = "train") -> ForwardTrace:
    """Run the network, optionally masking every prunable conv.

    Masks are ordered like `net.prunable_convs()`; each entry must be a
    vector of that conv's output width. Stage-end features are captured
    after masking (they are downstream of every mask in the stage).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if masks is not None:
        sizes = net.mask_sizes()
        if len(masks) != len(sizes):
            raise DimensionError(f"expected {len(sizes)} masks, got {len(masks)}")
        for i, (m, c) in enumerate(zip(masks, sizes)):
            if m.shape != (c,):
                raise DimensionError(f"mask {i} has shape {m.shape}, conv expects ({c},)")
    h = T.relu(net.stem.forward(batch, mode))
    stage_feats: list[Tensor] = []
    pos = 0
    for stage in net.stages:
        for blk in stage:
            h, sampled, pos = _block_forward(blk, h, masks, pos, mode)
        stage_feats.append(sampled)
    pooled = T.global_avg_pool(h)
    logits = T.add_rowvec(T.matmul(pooled, net.fc_w), net.fc_b)
    return ForwardTrace(logits=logits, stage_features=stage_feats)
