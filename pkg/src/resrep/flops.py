"""Multiply-add accounting.  Only convolutions cost anything; the classifier is a 1x1 conv."""

from __future__ import annotations

from dataclasses import dataclass

from .layers import Compactor, Conv2d, GlobalAvgPool
from .tensor import out_size


@dataclass(frozen=True)
class LayerCost:
    layer: int
    out_hw: tuple[int, int]
    in_channels: int
    out_channels: int
    k: int
    multiply_adds: int


def layer_flops(c: int, d: int, k: int, h_out: int, w_out: int) -> int:
    if min(c, d, k, h_out, w_out) < 1:
        raise ValueError(f"layer_flops needs positive sizes, got C={c} D={d} k={k} H'={h_out} W'={w_out}")
    return d * c * k * k * h_out * w_out


def infer_shapes(model) -> list[tuple[int, int, int]]:
    """(C, H, W) of every node's output for a single example."""
    shapes: list[tuple[int, int, int]] = []
    for node in model.nodes:
        c, h, w = model.input_shape if node.inputs[0] == -1 else shapes[node.inputs[0]]
        if isinstance(node, Conv2d):
            kh, kw = node.kernel.shape[2:]
            shapes.append((node.out_channels, out_size(h, kh, node.stride, node.padding), out_size(w, kw, node.stride, node.padding)))
        elif isinstance(node, GlobalAvgPool):
            shapes.append((c, 1, 1))
        else:
            shapes.append((c, h, w))
    return shapes


def layer_costs(model, count_compactors=None, widths=None) -> list[LayerCost]:
    """Per-conv costs.  ``widths`` maps conv index -> (in_channels, out_channels) overrides."""
    if count_compactors is None:
        count_compactors = model.kind != "reparam"
    shapes = infer_shapes(model)
    widths = widths or {}
    costs = []
    for i, node in enumerate(model.nodes):
        if not isinstance(node, Conv2d) or (isinstance(node, Compactor) and not count_compactors):
            continue
        _, h, w = shapes[i]
        c, d = widths.get(i, (node.in_channels, node.out_channels))
        k = node.kernel.shape[2]
        costs.append(LayerCost(i, (h, w), c, d, k, layer_flops(c, d, k, h, w)))
    return costs


def model_flops(model, count_compactors=None) -> int:
    """Whole-model multiply-adds.

    Compactors are skipped on ``reparam`` models, which still have to be
    converted; pass ``count_compactors=True`` to cost one as deployed.
    """
    return sum(c.multiply_adds for c in layer_costs(model, count_compactors))
