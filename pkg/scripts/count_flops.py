#!/usr/bin/env python3
"""Standalone FLOPs / parameter counter for the CIFAR-style ResNet family.

Counts multiply-accumulates (1 MAC = 1 FLOP, the thop convention) layer by
layer straight from the architecture numbers. Deliberately shares no code
with the engine's cost model so the two can be checked against each other.

Conventions:
  * conv cost      = H_out * W_out * C_out * k * k * C_in
  * linear cost    = in_features * out_features
  * batch norm, activations and pooling are not counted
  * params = learnable tensors only (conv/linear weights, linear bias,
    batch-norm scale+shift); running statistics excluded
"""

from __future__ import annotations

import argparse


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def count_resnet(
    widths: list[int],
    blocks: list[int],
    image_size: int,
    in_channels: int,
    classes: int,
) -> dict:
    """Count MACs and params of the basic-block ResNet built by this repo.

    Layout: 3x3 stem conv (stride 1, pad 1), then one stage per entry of
    `widths`, each stage `blocks[i]` basic blocks (two 3x3 convs each).
    The first block of every stage after the first downsamples with
    stride 2 and carries a 1x1 conv shortcut. Global average pool and a
    single fully-connected classifier finish the network.
    """
    if len(widths) != len(blocks):
        raise ValueError("widths and blocks must have equal length")
    per_layer = []
    flops = 0
    params = 0

    def add_conv(name, h, w, cin, cout, k, s, p):
        nonlocal flops, params
        ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
        cost = ho * wo * cout * k * k * cin
        per_layer.append((name, cin, cout, cost))
        flops += cost
        params += cout * cin * k * k + 2 * cout  # weight + bn scale/shift
        return ho, wo

    h = w = image_size
    h, w = add_conv("stem", h, w, in_channels, widths[0], 3, 1, 1)
    c_in = widths[0]
    for si, (width, nblocks) in enumerate(zip(widths, blocks)):
        for bi in range(nblocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            name = f"s{si}.b{bi}"
            ho, wo = add_conv(f"{name}.conv1", h, w, c_in, width, 3, stride, 1)
            add_conv(f"{name}.conv2", ho, wo, width, width, 3, 1, 1)
            if stride != 1 or c_in != width:
                add_conv(f"{name}.shortcut", h, w, c_in, width, 1, stride, 0)
            h, w = ho, wo
            c_in = width

    flops += c_in * classes
    params += c_in * classes + classes
    per_layer.append(("fc", c_in, classes, c_in * classes))
    return {"flops": flops, "params": params, "per_layer": per_layer}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--widths", default="16,32,64")
    ap.add_argument("--blocks", default="9,9,9")
    ap.add_argument("--image-size", type=int, default=32)
    ap.add_argument("--in-channels", type=int, default=3)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--per-layer", action="store_true")
    args = ap.parse_args()

    widths = [int(x) for x in args.widths.split(",")]
    blocks = [int(x) for x in args.blocks.split(",")]
    out = count_resnet(widths, blocks, args.image_size, args.in_channels, args.classes)
    print(f"flops  {out['flops']:,} MACs")
    print(f"params {out['params']:,}")
    if args.per_layer:
        for name, cin, cout, cost in out["per_layer"]:
            print(f"  {name:<16} {cin:>4} -> {cout:<4} {cost:>12,}")


if __name__ == "__main__":
    main()
