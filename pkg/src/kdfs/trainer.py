"""Training loops: teacher pretraining, the pruning phase (sampling masks,
distilling, steering the FLOPs budget), and fine-tuning of the extracted
compact network. One backward pass per batch populates the gradients of
network weights, decoder weights and sampler scores together; AdaMax
updates all of them.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import Dataset, batches
from .decoder import Decoder, rl_loss
from .errors import ContractError, NumericError
from .layers import Network, forward
from .objective import (LossWeights, build_flops_model, ce_loss, flops_of,
                        flops_regularizer, kd_loss, total_loss)
from .sampler import SamplerParams, TemperatureSchedule, temperature_at
from .serialize import load as _load
from .serialize import save as _save
from .tensor import Tape, Tensor, backward

log = logging.getLogger("kdfs")

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

METRIC_COLUMNS = ["epoch", "tau", "lr", "ce", "kd", "rl", "reg",
                  "flops_ratio", "train_acc", "eval_acc"]

# refuse to cache teacher outputs beyond this many bytes
TEACHER_CACHE_LIMIT = 1 << 29


@dataclass
class TrainConfig:
    epochs: int
    finetune_epochs: int = 0
    lr: float = 1e-2
    lr_min: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: TemperatureSchedule | None = None
    checkpoint_interval: int = 0

    def __post_init__(self):
        if not self.epochs > self.finetune_epochs >= 0:
            raise ContractError(
                f"need epochs > finetune_epochs >= 0, got {self.epochs}, {self.finetune_epochs}")
        if not self.lr > self.lr_min > 0:
            raise ContractError(f"need lr > lr_min > 0, got {self.lr}, {self.lr_min}")
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")
        if self.schedule is None:
            self.schedule = TemperatureSchedule(
                "linear", epochs=max(self.epochs - self.finetune_epochs, 1))

    @property
    def prune_epochs(self) -> int:
        return self.epochs - self.finetune_epochs

    def digest(self) -> str:
        import hashlib
        return hashlib.blake2b(repr(self).encode(), digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdaMaxState:
    m: list[np.ndarray]
    u: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdaMaxState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adamax_step(params: list[Tensor], grads: list[np.ndarray], state: AdaMaxState,
                lr: float, weight_decay: float | list[float] = 0.0) -> None:
    """One in-place update; infinity-norm accumulator never shrinks within a
    run, and the first-moment bias correction uses the shared step count."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and state must align")
    decays = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    state.t += 1
    step = lr / (1.0 - BETA1 ** state.t)
    for p, g, m, u, wd in zip(params, grads, state.m, state.u, decays):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        if wd:
            g = g + p.data.astype(g.dtype) * g.dtype.type(wd)
        m *= BETA1
        m += (1.0 - BETA1) * g
        np.maximum(BETA2 * u, np.abs(g), out=u)
        p.data -= (step * m / (u + EPS)).astype(p.data.dtype)


class AdaMax:
    """Convenience wrapper reading gradients off the tensors."""

    def __init__(self, params: list[Tensor], weight_decays: list[float] | float = 0.0):
        self.params = params
        self.decays = (weight_decays if isinstance(weight_decays, list)
                       else [weight_decays] * len(params))
        self.state = AdaMaxState.for_params(params)

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        adamax_step(self.params, grads, self.state, lr, self.decays)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(e: int | float, phase_epochs: int, lr0: float, lr_min: float) -> float:
    if phase_epochs <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * e / phase_epochs))


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


# ---------------------------------------------------------------------------
# evaluation


def evaluate(net: Network, ds: Dataset, masks: list[np.ndarray] | None = None,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode (frozen batch-norm statistics)."""
    mask_tensors = None if masks is None else [Tensor(m) for m in masks]
    correct = 0
    for x, y, _ in batches(ds, batch_size, seed=0, shuffle=False):
        trace = forward(net, Tensor(x), mask_tensors, mode="eval")
        correct += int((trace.logits.data.argmax(axis=1) == y).sum())
    return correct / len(ds)


class _MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def add(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(_format_row(row))
        log.info("epoch %3d  ce %.4f  kd %.4f  rl %.4f  reg %.5f  flops %.3f  train %.4f  eval %s",
                 row["epoch"], row["ce"], row["kd"], row["rl"], row["reg"],
                 row["flops_ratio"], row["train_acc"],
                 "-" if row["eval_acc"] is None else f"{row['eval_acc']:.4f}")


def _format_row(row: dict) -> list[str]:
    out = []
    for col in METRIC_COLUMNS:
        v = row[col]
        if v is None:
            out.append("")
        elif col == "epoch":
            out.append(str(v))
        else:
            out.append(f"{v:.8g}")
    return out


# ---------------------------------------------------------------------------
# teacher pretraining


def train_teacher(net: Network, train_ds: Dataset, eval_ds: Dataset | None,
                  cfg: TrainConfig, metrics_path: Path | None = None) -> list[dict]:
    """Cross-entropy-only training of the reference network."""
    opt = AdaMax(net.params(), cfg.weight_decay)
    writer = _MetricsWriter(metrics_path)
    for e in range(1, cfg.epochs + 1):
        lr = cosine_lr(e - 1, cfg.epochs, cfg.lr, cfg.lr_min)
        ce_sum = 0.0
        seen = correct = 0
        for x, y, _ in batches(train_ds, cfg.batch_size, _epoch_seed(cfg.seed, e)):
            with Tape():
                trace = forward(net, Tensor(x), mode="train")
                loss = ce_loss(trace.logits, y)
                if not np.isfinite(loss.data):
                    raise NumericError(f"teacher loss diverged at epoch {e}")
                backward(loss)
            opt.step(lr)
            opt.zero_grad()
            ce_sum += loss.item() * len(y)
            correct += int((trace.logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        writer.add({"epoch": e, "tau": 0.0, "lr": lr, "ce": ce_sum / seen, "kd": 0.0,
                    "rl": 0.0, "reg": 0.0, "flops_ratio": 1.0, "train_acc": correct / seen,
                    "eval_acc": None if eval_ds is None else evaluate(net, eval_ds)})
    return writer.rows


# ---------------------------------------------------------------------------
# teacher output caching


class _TeacherOutputs:
    """Per-sample logits and stage features of the frozen teacher.

    The teacher runs in eval mode, so its outputs are a pure function of
    the sample; when they fit in memory we compute them once and gather
    rows per batch instead of re-running the teacher every epoch.
    """

    def __init__(self, teacher: Network, ds: Dataset, need_features: bool,
                 batch_size: int = 256):
        self.teacher = teacher
        self.ds = ds
        self.need_features = need_features
        self.logits: np.ndarray | None = None
        self.features: list[np.ndarray] | None = None
        if ds.augment:
            return  # augmented batches are not a function of the sample index
        probe = forward(teacher, Tensor(ds.normalized(np.arange(min(2, len(ds))))), mode="eval")
        feat_bytes = sum(4 * len(ds) * int(np.prod(f.shape[1:])) for f in probe.stage_features)
        if not need_features:
            feat_bytes = 0
        if feat_bytes > TEACHER_CACHE_LIMIT:
            log.info("teacher feature cache (%.0f MB) over limit; recomputing per batch",
                     feat_bytes / 2**20)
            return
        n = len(ds)
        self.logits = np.empty((n, probe.logits.shape[1]), dtype=np.float32)
        if need_features:
            self.features = [np.empty((n, *f.shape[1:]), dtype=np.float32)
                             for f in probe.stage_features]
        for x, _, idx in batches(ds, batch_size, seed=0, shuffle=False):
            trace = forward(teacher, Tensor(x), mode="eval")
            self.logits[idx] = trace.logits.data
            if need_features:
                for s, f in enumerate(trace.stage_features):
                    self.features[s][idx] = f.data

    def for_batch(self, x: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if self.logits is not None:
            feats = [f[idx] for f in self.features] if self.features is not None else []
            return self.logits[idx], feats
        trace = forward(self.teacher, Tensor(x), mode="eval")
        feats = [f.data for f in trace.stage_features] if self.need_features else []
        return trace.logits.data, feats


# ---------------------------------------------------------------------------
# pruning phase (the main loop)


def _named_training_params(student: Network, decoders: list[Decoder],
                           sampler: SamplerParams) -> tuple[list[str], list[Tensor], list[float]]:
    names, params, decays = [], [], []
    for n, p in student.named_params():
        names.append(n)
        params.append(p)
        decays.append(1.0)  # scaled by cfg.weight_decay later
    for d in decoders:
        for n, p in d.named_params():
            names.append(n)
            params.append(p)
            decays.append(0.0)
    for i, p in enumerate(sampler.ps):
        names.append(f"sampler.p{i}")
        params.append(p)
        decays.append(0.0)
    return names, params, decays


def save_checkpoint(path: Path, phase: str, epoch: int, named: list[tuple[str, np.ndarray]],
                    opt: AdaMax, param_names: list[str], sampler: SamplerParams | None,
                    meta: dict | None = None) -> None:
    arrays = {name: arr for name, arr in named}
    for name, m, u in zip(param_names, opt.state.m, opt.state.u):
        arrays[f"adamax.m.{name}"] = m
        arrays[f"adamax.u.{name}"] = u
    desc = {
        "kind": "checkpoint",
        "phase": phase,
        "epoch": epoch,
        "adamax_t": opt.state.t,
        "rng": sampler.rng_states() if sampler is not None else [],
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _save(path, desc, arrays)


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    desc, arrays = _load(path)
    if desc.get("kind") != "checkpoint":
        raise ContractError(f"{path} holds a {desc.get('kind')!r} payload, not a checkpoint")
    return desc, arrays


def _restore_into(arrays: dict[str, np.ndarray], named_params: list[tuple[str, Tensor]],
                  named_buffers: list[tuple[str, np.ndarray]], opt: AdaMax,
                  param_names: list[str]) -> None:
    for name, p in named_params:
        p.data = arrays[name].copy()
    for name, buf in named_buffers:
        buf[...] = arrays[name]
    for i, name in enumerate(param_names):
        opt.state.m[i] = arrays[f"adamax.m.{name}"].copy()
        opt.state.u[i] = arrays[f"adamax.u.{name}"].copy()


def kdfs_train(student: Network, teacher: Network, sampler: SamplerParams,
               decoders: list[Decoder], train_ds: Dataset, eval_ds: Dataset | None,
               cfg: TrainConfig, metrics_path: Path | None = None,
               checkpoint_path: Path | None = None,
               resume: tuple[dict, dict[str, np.ndarray]] | None = None) -> list[dict]:
    """Mask-sampling training: per batch, draw noise, relax and threshold the
    masks, run the masked student, align with the frozen teacher, and take
    one AdaMax step on weights, decoders and sampler scores together."""
    teacher.set_requires_grad(False)
    weights = cfg.loss
    schedule = cfg.schedule
    flops_model = build_flops_model(student)
    teacher_flops = flops_model.teacher_total()

    names, params, decay_flags = _named_training_params(student, decoders, sampler)
    opt = AdaMax(params, [f * cfg.weight_decay for f in decay_flags])

    named_arrays = (student.named_params()
                    + [(n, p) for d in decoders for (n, p) in d.named_params()]
                    + [(f"sampler.p{i}", p) for i, p in enumerate(sampler.ps)])
    start_epoch = 1
    if resume is not None:
        desc, arrays = resume
        if desc["phase"] != "prune":
            raise ContractError(f"checkpoint is for phase {desc['phase']!r}, expected 'prune'")
        _restore_into(arrays, named_arrays, student.named_buffers(), opt, names)
        opt.state.t = desc["adamax_t"]
        sampler.restore_rng(desc["rng"])
        start_epoch = desc["epoch"] + 1

    outputs = _TeacherOutputs(teacher, train_ds, need_features=weights.lambda_rl > 0)
    writer = _MetricsWriter(metrics_path)
    use_kd = weights.lambda_kd > 0
    use_rl = weights.lambda_rl > 0
    zero = Tensor(np.zeros((), dtype=np.float32))

    for e in range(start_epoch, cfg.prune_epochs + 1):
        tau = temperature_at(schedule, min(e, schedule.epochs))
        lr = cosine_lr(e - 1, cfg.prune_epochs, cfg.lr, cfg.lr_min)
        sums = {"ce": 0.0, "kd": 0.0, "rl": 0.0, "reg": 0.0}
        seen = correct = 0
        for x, y, idx in batches(train_ds, cfg.batch_size, _epoch_seed(cfg.seed, e)):
            t_logits, t_feats = outputs.for_batch(x, idx)
            with Tape():
                pis, masks = sampler.sample(tau)
                trace = forward(student, Tensor(x), masks, mode="train")
                ce = ce_loss(trace.logits, y)
                kd = kd_loss(t_logits, trace.logits, weights.kd_temperature) if use_kd else zero
                rls = []
                if use_rl:
                    rls = [rl_loss(Tensor(tf), decoders[s].forward(trace.stage_features[s]))
                           for s, tf in enumerate(t_feats)]
                reg = flops_regularizer(flops_model.graph(masks), teacher_flops,
                                        weights.compression_rate, weights.squared_regularizer)
                loss = total_loss(ce, kd, rls, reg, weights)
                backward(loss)
            opt.step(lr)
            opt.zero_grad()
            n = len(y)
            sums["ce"] += ce.item() * n
            sums["kd"] += kd.item() * n
            sums["rl"] += sum(r.item() for r in rls) * n
            sums["reg"] += reg.item() * n
            correct += int((trace.logits.data.argmax(axis=1) == y).sum())
            seen += n
        hard = sampler.inference_masks()
        ratio = flops_of(flops_model, hard) / teacher_flops
        eval_acc = None
        if eval_ds is not None:
            eval_acc = evaluate(student, eval_ds, masks=hard)
        writer.add({"epoch": e, "tau": tau, "lr": lr,
                    "ce": sums["ce"] / seen, "kd": sums["kd"] / seen,
                    "rl": sums["rl"] / seen, "reg": sums["reg"] / seen,
                    "flops_ratio": ratio, "train_acc": correct / seen, "eval_acc": eval_acc})
        if checkpoint_path is not None:
            if cfg.checkpoint_interval and e % cfg.checkpoint_interval == 0 \
                    and e != cfg.prune_epochs:
                stamped = checkpoint_path.with_name(
                    f"{checkpoint_path.stem}.e{e}{checkpoint_path.suffix}")
                save_checkpoint(stamped, "prune", e,
                                [(n, p.data) for n, p in named_arrays] + student.named_buffers(),
                                opt, names, sampler, meta={"config": cfg.digest()})
            if e == cfg.prune_epochs:
                save_checkpoint(checkpoint_path, "prune", e,
                                [(n, p.data) for n, p in named_arrays] + student.named_buffers(),
                                opt, names, sampler, meta={"config": cfg.digest()})
    return writer.rows


def realize_masks(sampler: SamplerParams) -> list[np.ndarray]:
    """Noise-free masks for extraction; a layer that would lose every filter
    keeps its single best-scoring one (loudly)."""
    masks = sampler.inference_masks()
    for i, (m, margin) in enumerate(zip(masks, sampler.keep_margins())):
        if m.sum() == 0:
            j = int(np.argmax(margin))
            m[j] = 1.0
            log.warning("layer %d: mask dropped every filter; keeping filter %d "
                        "(largest keep margin %.4f)", i, j, float(margin[j]))
    return masks


# ---------------------------------------------------------------------------
# fine-tuning of the extracted network


def finetune(pruned: Network, teacher: Network, train_ds: Dataset,
             eval_ds: Dataset | None, cfg: TrainConfig,
             metrics_path: Path | None = None) -> list[dict]:
    """Train only the compact network's weights, mask frozen, at 1/100 of
    the pruning learning rate, with cross-entropy plus distillation."""
    if cfg.finetune_epochs == 0:
        return []
    teacher.set_requires_grad(False)
    weights = cfg.loss
    lr = cfg.lr / 100.0
    opt = AdaMax(pruned.params(), cfg.weight_decay)
    outputs = _TeacherOutputs(teacher, train_ds, need_features=False)
    flops_model = build_flops_model(pruned)
    ratio = flops_of(flops_model) / flops_of(build_flops_model(teacher))
    writer = _MetricsWriter(metrics_path)
    use_kd = weights.lambda_kd > 0
    zero = Tensor(np.zeros((), dtype=np.float32))
    for e in range(1, cfg.finetune_epochs + 1):
        sums = {"ce": 0.0, "kd": 0.0}
        seen = correct = 0
        for x, y, idx in batches(train_ds, cfg.batch_size, _epoch_seed(cfg.seed + 1, e)):
            t_logits, _ = outputs.for_batch(x, idx)
            with Tape():
                trace = forward(pruned, Tensor(x), mode="train")
                ce = ce_loss(trace.logits, y)
                kd = kd_loss(t_logits, trace.logits, weights.kd_temperature) if use_kd else zero
                loss = T.add(ce, T.scale(kd, weights.lambda_kd))
                if not np.isfinite(loss.data):
                    raise NumericError(f"fine-tune loss diverged at epoch {e}")
                backward(loss)
            opt.step(lr)
            opt.zero_grad()
            n = len(y)
            sums["ce"] += ce.item() * n
            sums["kd"] += kd.item() * n
            correct += int((trace.logits.data.argmax(axis=1) == y).sum())
            seen += n
        writer.add({"epoch": e, "tau": 0.0, "lr": lr, "ce": sums["ce"] / seen,
                    "kd": sums["kd"] / seen, "rl": 0.0, "reg": 0.0, "flops_ratio": ratio,
                    "train_acc": correct / seen,
                    "eval_acc": None if eval_ds is None else evaluate(pruned, eval_ds)})
    return writer.rows
