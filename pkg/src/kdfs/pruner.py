"""Physical pruning: turn a trained masked network into a compact one,
serialize it losslessly, and report compression numbers.

Extraction removes the output channels of every prunable conv whose mask
entry is zero, slices the matching input channels out of the consumer
conv, and attaches the kept-channel index list that the zero-padding
scatter uses to restore block outputs to their nominal width. No weights
are re-expanded; the scatter is an explicit index operation in the graph.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .layers import Architecture, BasicBlock, ConvBlock, Network
from .objective import build_flops_model, flops_of
from .serialize import load as _load
from .serialize import save as _save
from .tensor import Tensor


def _slice_conv(conv: ConvBlock, keep_out: np.ndarray | None,
                keep_in: np.ndarray | None) -> ConvBlock:
    w = conv.weight.data
    if keep_out is not None:
        w = w[keep_out]
    if keep_in is not None:
        w = w[:, keep_in]
    out = ConvBlock(w.copy(), conv.stride, conv.padding, conv.prunable)
    rows = keep_out if keep_out is not None else slice(None)
    out.gamma = Tensor(conv.gamma.data[rows].copy(), requires_grad=True)
    out.beta = Tensor(conv.beta.data[rows].copy(), requires_grad=True)
    out.running_mean = conv.running_mean[rows].copy()
    out.running_var = conv.running_var[rows].copy()
    return out


def extract(net: Network, masks: list[np.ndarray]) -> Network:
    """Compact network equivalent (in eval mode) to `net` run with `masks`."""
    sizes = net.mask_sizes()
    if len(masks) != len(sizes):
        raise ContractError(f"expected {len(sizes)} masks, got {len(masks)}")
    keeps: list[np.ndarray] = []
    for i, (m, c) in enumerate(zip(masks, sizes)):
        m = np.asarray(m)
        if m.shape != (c,):
            raise DimensionError(f"mask {i} has shape {m.shape}, expected ({c},)")
        if not np.isin(m, (0, 1)).all():
            raise ContractError(f"mask {i} is not binary")
        if m.sum() == 0:
            raise ContractError(
                f"mask {i} drops every filter; repair degenerate masks before extraction")
        keeps.append(np.flatnonzero(m))

    stem = _slice_conv(net.stem, None, None)
    stages: list[list[BasicBlock]] = []
    pos = 0
    for stage in net.stages:
        out_stage = []
        for blk in stage:
            k1, k2 = keeps[pos], keeps[pos + 1]
            pos += 2
            conv1 = _slice_conv(blk.conv1, k1, None)
            conv2 = _slice_conv(blk.conv2, k2, k1)
            shortcut = _slice_conv(blk.shortcut, None, None) if blk.shortcut else None
            out_stage.append(BasicBlock(conv1, conv2, shortcut,
                                        out_channels=blk.out_channels, keep_idx=k2))
        stages.append(out_stage)
    fc_w = Tensor(net.fc_w.data.copy(), requires_grad=True)
    fc_b = Tensor(net.fc_b.data.copy(), requires_grad=True)
    return Network(net.arch, stem, stages, fc_w, fc_b)


# ---------------------------------------------------------------------------
# model files


def _net_arrays(net: Network) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in net.named_params()}
    arrays.update({name: buf for name, buf in net.named_buffers()})
    return arrays


def _net_descriptor(net: Network, provenance: dict | None) -> dict:
    keep = []
    pruned = False
    for stage in net.stages:
        stage_keep = []
        for blk in stage:
            if blk.keep_idx is None:
                stage_keep.append(None)
            else:
                stage_keep.append([int(i) for i in blk.keep_idx])
                pruned = True
        keep.append(stage_keep)
    return {
        "kind": "model",
        "arch": net.arch.to_dict(),
        "keep_idx": keep,
        "pruned": pruned,
        "provenance": provenance or {},
    }


def save_model(path, net: Network, provenance: dict | None = None) -> None:
    _save(path, _net_descriptor(net, provenance), _net_arrays(net))


def _rebuild(desc: dict, arrays: dict[str, np.ndarray]) -> Network:
    arch = Architecture.from_dict(desc["arch"])
    stem = ConvBlock(arrays["stem.w"], arch.stem_stride, 1, prunable=False)
    stages: list[list[BasicBlock]] = []
    c_in = arch.widths[0]
    for si, (width, nblocks) in enumerate(zip(arch.widths, arch.blocks)):
        stage = []
        for bi in range(nblocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            pre = f"s{si}.b{bi}"
            conv1 = ConvBlock(arrays[f"{pre}.c1.w"], stride, 1, prunable=True)
            conv2 = ConvBlock(arrays[f"{pre}.c2.w"], 1, 1, prunable=True)
            shortcut = None
            if stride != 1 or c_in != width:
                shortcut = ConvBlock(arrays[f"{pre}.sc.w"], stride, 0, prunable=False)
            keep = desc["keep_idx"][si][bi]
            blk = BasicBlock(conv1, conv2, shortcut, out_channels=width,
                             keep_idx=None if keep is None else np.asarray(keep, dtype=np.int64))
            stage.append(blk)
            c_in = width
        stages.append(stage)
    net = Network(arch, stem, stages,
                  Tensor(arrays["fc.w"], requires_grad=True),
                  Tensor(arrays["fc.b"], requires_grad=True))
    for name, p in net.named_params():
        p.data = arrays[name].copy()
    for name, buf in net.named_buffers():
        buf[...] = arrays[name]
    return net


def load_model(path) -> tuple[Network, dict]:
    desc, arrays = _load(path)
    if desc.get("kind") != "model":
        raise ContractError(f"{path} holds a {desc.get('kind')!r} payload, not a model")
    return _rebuild(desc, arrays), desc


# ---------------------------------------------------------------------------
# reporting


def report(pruned: Network, teacher: Network) -> dict:
    """FLOPs/params of the pruned model against its reference, with the
    per-layer kept-channel table. Reductions are 1 - pruned/teacher."""
    p_model, t_model = build_flops_model(pruned), build_flops_model(teacher)
    p_flops, t_flops = flops_of(p_model), flops_of(t_model)
    p_params, t_params = pruned.param_count(), teacher.param_count()
    per_layer = []
    p_convs, t_convs = pruned.prunable_convs(), teacher.prunable_convs()
    names = [c.layer_id for c in t_model.conv_costs if c.out_mask is not None]
    for name, pc, tc in zip(names, p_convs, t_convs):
        per_layer.append({"layer": name, "kept": pc.out_channels, "original": tc.out_channels})
    return {
        "flops": p_flops,
        "teacher_flops": t_flops,
        "params": p_params,
        "teacher_params": t_params,
        "flops_reduction_pct": 100.0 * (1.0 - p_flops / t_flops),
        "params_reduction_pct": 100.0 * (1.0 - p_params / t_params),
        "per_layer": per_layer,
    }


def report_csv(rep: dict) -> str:
    lines = ["metric,value",
             f"flops,{rep['flops']}",
             f"teacher_flops,{rep['teacher_flops']}",
             f"params,{rep['params']}",
             f"teacher_params,{rep['teacher_params']}",
             f"flops_reduction_pct,{rep['flops_reduction_pct']:.4f}",
             f"params_reduction_pct,{rep['params_reduction_pct']:.4f}",
             "layer,kept,original"]
    for row in rep["per_layer"]:
        lines.append(f"{row['layer']},{row['kept']},{row['original']}")
    return "\n".join(lines) + "\n"


def report_table(rep: dict) -> str:
    lines = [
        f"FLOPs  : {rep['flops']:>14,} / {rep['teacher_flops']:,}"
        f"  ({rep['flops_reduction_pct']:.2f}% reduction)",
        f"Params : {rep['params']:>14,} / {rep['teacher_params']:,}"
        f"  ({rep['params_reduction_pct']:.2f}% reduction)",
        f"{'layer':<12} {'kept':>5} {'orig':>5}",
    ]
    for row in rep["per_layer"]:
        lines.append(f"{row['layer']:<12} {row['kept']:>5} {row['original']:>5}")
    return "\n".join(lines)
