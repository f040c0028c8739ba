"""Differentiable filter sampling.

Each prunable conv owns a learnable [C,2] score matrix. Training draws
Gumbel noise, relaxes the scores with a temperature-scaled softmax, and
hard-thresholds the result into a binary keep/drop mask whose gradient is
passed straight through to the relaxed probabilities. Inference skips the
noise entirely and thresholds the raw scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

UNIFORM_CLAMP = 1e-10


@dataclass
class TemperatureSchedule:
    kind: str  # "linear" | "exponential"
    tau0: float = 1.0
    tauE: float = 0.1
    epochs: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "exponential"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.tau0 <= 0 or self.tauE <= 0:
            raise ContractError("temperatures must be positive")
        if self.epochs < 1:
            raise ContractError("schedule needs at least one epoch")


def temperature_at(sched: TemperatureSchedule, e: int | float) -> float:
    if not 0 <= e <= sched.epochs:
        raise ContractError(f"epoch {e} outside [0, {sched.epochs}]")
    frac = e / sched.epochs
    if sched.kind == "linear":
        return (1.0 - frac) * sched.tau0 + frac * sched.tauE
    return sched.tau0 * (sched.tauE / sched.tau0) ** frac


def gumbel_noise(gen: np.random.Generator, rows: int) -> np.ndarray:
    """Standard Gumbel(0,1) draws, shape [rows, 2]."""
    u = gen.random((rows, 2))
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return (-np.log(-np.log(u))).astype(np.float32)


def gumbel_softmax(p: Tensor, g: np.ndarray, tau: float) -> Tensor:
    """Row-stochastic relaxation of the scores: softmax((P + G) / tau).

    The softmax subtracts the row max before exponentiating, so small
    temperatures stay finite.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if p.data.ndim != 2 or p.shape[1] != 2:
        raise DimensionError(f"scores must be [C,2], got {p.shape}")
    if g.shape != p.shape:
        raise DimensionError(f"noise shape {g.shape} must match scores {p.shape}")
    noisy = T.add(p, Tensor(g.astype(p.dtype)))
    return T.softmax(T.scale(noisy, 1.0 / tau), axis=1)


def hard_mask(pi: np.ndarray | Tensor) -> np.ndarray:
    """Binary mask from relaxed probabilities; ties keep the filter."""
    arr = pi.data if isinstance(pi, Tensor) else np.asarray(pi)
    return (arr[:, 1] >= arr[:, 0]).astype(np.float32)


def ste_forward_backward(pi: Tensor) -> Tensor:
    """Hard mask in the forward pass, identity gradient in the backward."""
    return T.ste_mask(pi)


def inference_mask(p: np.ndarray | Tensor) -> np.ndarray:
    """Noise-free mask: threshold the raw scores directly."""
    return hard_mask(p)


@dataclass
class MaskState:
    """Snapshot of one layer's sampling step."""

    pi: np.ndarray  # [C,2] relaxed probabilities
    m: np.ndarray  # [C] binary mask

    def validate(self) -> None:
        if not np.allclose(self.pi.sum(axis=1), 1.0, atol=1e-6):
            raise ContractError("relaxed probabilities must be row-stochastic")
        if not np.array_equal(self.m, hard_mask(self.pi)):
            raise ContractError("mask does not match the argmax of pi")


class SamplerParams:
    """One [C,2] learnable score matrix per prunable conv, plus the
    per-layer noise streams (derived from the run seed and layer index, so
    layer evaluation order cannot change the draws)."""

    def __init__(self, ps: list[Tensor], gens: list[np.random.Generator]):
        self.ps = ps
        self.gens = gens

    @classmethod
    def init(cls, mask_sizes: list[int], seed: int) -> "SamplerParams":
        gen = rngmod.stream(seed, rngmod.INIT, 1)
        # Kaiming-style scaling over the matrix fan-in (two columns)
        std = np.sqrt(2.0 / 2.0)
        ps = [Tensor((gen.standard_normal((c, 2)) * std).astype(np.float32), requires_grad=True)
              for c in mask_sizes]
        gens = [rngmod.stream(seed, rngmod.GUMBEL + i) for i in range(len(mask_sizes))]
        return cls(ps, gens)

    def __len__(self) -> int:
        return len(self.ps)

    def sample(self, tau: float) -> tuple[list[Tensor], list[Tensor]]:
        """Draw fresh noise for every layer; returns (pis, masks)."""
        pis, masks = [], []
        for p, gen in zip(self.ps, self.gens):
            g = gumbel_noise(gen, p.shape[0])
            pi = gumbel_softmax(p, g, tau)
            pis.append(pi)
            masks.append(ste_forward_backward(pi))
        return pis, masks

    def inference_masks(self) -> list[np.ndarray]:
        return [inference_mask(p) for p in self.ps]

    def keep_margins(self) -> list[np.ndarray]:
        """Per-filter score advantage of keeping over dropping."""
        return [p.data[:, 1] - p.data[:, 0] for p in self.ps]

    def rng_states(self) -> list[dict]:
        return [rngmod.capture(g) for g in self.gens]

    def restore_rng(self, states: list[dict]) -> None:
        self.gens = [rngmod.restore(s) for s in states]
