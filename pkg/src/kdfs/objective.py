"""Loss terms and the differentiable FLOPs budget.

FLOPs are multiply-accumulates (1 MAC = 1 FLOP, the thop convention);
batch norm, activations and pooling are excluded from both teacher and
student so the reduction ratio is unaffected. The budget regularizer is
normalized by the teacher total so one weight works across architectures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, NumericError
from .layers import Network
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda_kd: float = 0.05
    lambda_rl: float = 1000.0
    lambda_reg: float = 10000.0
    kd_temperature: float = 3.0
    compression_rate: float = 0.5
    squared_regularizer: bool = False

    def __post_init__(self):
        if min(self.lambda_kd, self.lambda_rl, self.lambda_reg) < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.kd_temperature <= 0:
            raise ContractError("softening temperature must be positive")
        if not 0.0 <= self.compression_rate < 1.0:
            raise ContractError(f"compression rate must be in [0, 1), got {self.compression_rate}")


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"ce_loss: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(f"labels outside [0, {logits.shape[1]}): {labels.min()}..{labels.max()}")
    picked = T.row_gather(T.log_softmax(logits, axis=1), labels)
    return T.scale(T.tsum(picked), -1.0 / logits.shape[0])


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def kd_loss(teacher_logits: Tensor | np.ndarray, student_logits: Tensor, temp: float) -> Tensor:
    """Batch mean of T^2 * KL(teacher softened || student softened).

    The teacher side is a constant: no gradient ever reaches it.
    """
    if temp <= 0:
        raise ContractError(f"softening temperature must be positive, got {temp}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"kd_loss: teacher {t.shape} vs student {student_logits.shape}")
    n = t.shape[0]
    a_t = _softmax_np(t / temp, axis=1)
    # constant entropy part, computed with the same formula/dtype as the op side
    ent = float((a_t * _log_softmax_np(t / temp, axis=1)).sum())
    ls_s = T.log_softmax(T.scale(student_logits, 1.0 / temp), axis=1)
    cross = T.tsum(T.mul(Tensor(a_t.astype(student_logits.dtype)), ls_s))
    coeff = temp * temp / n
    return T.add_const(T.scale(cross, -coeff), coeff * ent)


@dataclass
class ConvCost:
    """Cost record of one conv layer: out_hw * k^2 * (in count) * (out count),
    where either count may be tied to a mask's channel-sum."""

    layer_id: str
    out_hw: int  # H_out * W_out
    ksize: int
    in_channels: int
    out_channels: int
    in_mask: int | None = None  # index into the mask list, None = fixed
    out_mask: int | None = None

    @property
    def fixed_factor(self) -> int:
        return self.out_hw * self.ksize * self.ksize


@dataclass
class FlopsModel:
    conv_costs: list[ConvCost]
    fc_in: int
    classes: int
    n_masks: int

    @property
    def fc_cost(self) -> int:
        return self.fc_in * self.classes

    def teacher_total(self) -> int:
        return self.evaluate(None)

    def evaluate(self, masks: list[np.ndarray] | None) -> int:
        """Exact integer FLOPs for concrete (binary) masks; None = all ones."""
        if masks is not None and len(masks) != self.n_masks:
            raise ContractError(f"expected {self.n_masks} masks, got {len(masks)}")

        def count(mask_idx, full):
            if mask_idx is None or masks is None:
                return full
            return int(round(float(np.asarray(masks[mask_idx]).sum())))

        total = 0
        for c in self.conv_costs:
            total += c.fixed_factor * count(c.in_mask, c.in_channels) * count(c.out_mask, c.out_channels)
        return total + self.fc_cost

    def graph(self, mask_tensors: list[Tensor]) -> Tensor:
        """Tape-attached FLOPs as a composition of mask channel-sums, so the
        budget is differentiable through the straight-through masks."""
        if len(mask_tensors) != self.n_masks:
            raise ContractError(f"expected {self.n_masks} masks, got {len(mask_tensors)}")
        sums: dict[int, Tensor] = {}

        def msum(i: int) -> Tensor:
            if i not in sums:
                sums[i] = T.tsum(mask_tensors[i])
            return sums[i]

        total: Tensor | None = None
        fixed = self.fc_cost
        for c in self.conv_costs:
            if c.in_mask is None and c.out_mask is None:
                fixed += c.fixed_factor * c.in_channels * c.out_channels
                continue
            if c.in_mask is None:
                term = T.scale(msum(c.out_mask), c.fixed_factor * c.in_channels)
            elif c.out_mask is None:
                term = T.scale(msum(c.in_mask), c.fixed_factor * c.out_channels)
            else:
                term = T.scale(T.mul(msum(c.out_mask), msum(c.in_mask)), c.fixed_factor)
            total = term if total is None else T.add(total, term)
        if total is None:
            raise ContractError("no prunable layers in the cost model")
        return T.add_const(total, float(fixed))


def build_flops_model(net: Network) -> FlopsModel:
    """Symbolic per-layer cost of a (possibly already pruned) network.

    The input side of a block's first conv is always at full stage width
    because block outputs are zero-padded back to their nominal width
    before the residual addition.
    """
    arch = net.arch
    size = arch.image_size
    costs: list[ConvCost] = []

    def out_size(s: int, k: int, stride: int, pad: int) -> int:
        return (s + 2 * pad - k) // stride + 1

    size = out_size(size, 3, arch.stem_stride, 1)
    costs.append(ConvCost("stem", size * size, 3, net.stem.in_channels, net.stem.out_channels))
    mask_idx = 0
    for si, stage in enumerate(net.stages):
        for bi, blk in enumerate(stage):
            pre = f"s{si}.b{bi}"
            in_size = size
            size = out_size(size, 3, blk.conv1.stride, 1)
            c1 = ConvCost(f"{pre}.c1", size * size, 3, blk.conv1.in_channels, blk.conv1.out_channels)
            if blk.conv1.prunable:
                c1.out_mask = mask_idx
            costs.append(c1)
            c2 = ConvCost(f"{pre}.c2", size * size, 3, blk.conv2.in_channels, blk.conv2.out_channels)
            if blk.conv1.prunable:
                c2.in_mask = mask_idx
                mask_idx += 1
            if blk.conv2.prunable:
                c2.out_mask = mask_idx
                mask_idx += 1
            costs.append(c2)
            if blk.shortcut is not None:
                sc_size = out_size(in_size, 1, blk.shortcut.stride, 0)
                costs.append(ConvCost(f"{pre}.sc", sc_size * sc_size, 1,
                                      blk.shortcut.in_channels, blk.shortcut.out_channels))
    return FlopsModel(costs, fc_in=net.fc_w.shape[0], classes=net.fc_w.shape[1],
                      n_masks=mask_idx)


def flops_of(model: FlopsModel, masks: list[np.ndarray] | None = None) -> int:
    return model.evaluate(masks)


def flops_regularizer(student_flops: Tensor | float, teacher_flops: float, r: float,
                      squared: bool = False):
    """Distance between the student budget and (1-r) of the teacher's,
    normalized by the teacher total. Piecewise linear (or squared) with its
    minimum exactly on budget."""
    if teacher_flops <= 0:
        raise ContractError("teacher FLOPs must be positive")
    target = 1.0 - r
    if isinstance(student_flops, Tensor):
        gap = T.add_const(T.scale(student_flops, 1.0 / teacher_flops), -target)
        return T.mul(gap, gap) if squared else T.absolute(gap)
    gap = student_flops / teacher_flops - target
    return gap * gap if squared else abs(gap)


def total_loss(ce: Tensor, kd: Tensor, rl_per_stage: list[Tensor], reg: Tensor,
               weights: LossWeights) -> Tensor:
    """ce + lambda_kd * kd + lambda_rl * sum(rl) + lambda_reg * reg."""
    for name, term in (("ce", ce), ("kd", kd), ("reg", reg),
                       *((f"rl[{i}]", t) for i, t in enumerate(rl_per_stage))):
        if not np.isfinite(term.data).all():
            raise NumericError(f"loss term {name} is not finite")
    total = T.add(ce, T.scale(kd, weights.lambda_kd))
    for rl in rl_per_stage:
        total = T.add(total, T.scale(rl, weights.lambda_rl))
    return T.add(total, T.scale(reg, weights.lambda_reg))
