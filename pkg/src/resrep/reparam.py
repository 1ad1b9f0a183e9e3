"""Compactor insertion and the exact conv-BN-compactor -> conv conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GraphError, ModelGraph
from .layers import Compactor, Conv2d
from .tensor import ShapeError, conv2d, row_norms, transpose01

EPSILON = 1e-5


class FullyPrunedError(ValueError):
    """A compactor would lose every row."""

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"compactor of target layer {layer} fully pruned")


@dataclass
class FusedConv:
    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match kernel {self.kernel.shape}")


def _rebuild(model: ModelGraph, nodes: dict[int, object], kind: str) -> ModelGraph:
    """Rebuild with some nodes replaced.

    ``nodes[i]`` is a replacement node, or an int ``j`` meaning "drop node i and
    let its readers read node j instead".  Node inputs refer to old indices.
    """
    new_nodes, remap = [], {-1: -1}
    for i, old in enumerate(model.nodes):
        rep = nodes.get(i, old)
        if isinstance(rep, int):
            remap[i] = remap[rep]
            continue
        rep.inputs = tuple(remap[j] for j in rep.inputs)
        remap[i] = len(new_nodes)
        new_nodes.append(rep)
    for n in new_nodes:
        if isinstance(n, Compactor):
            n.owner = remap[n.owner]
    out = ModelGraph(new_nodes, model.input_shape, model.num_classes, kind=kind, name=model.name)
    out.index_map = remap
    return out


def insert_compactors(model: ModelGraph) -> ModelGraph:
    """Append an identity compactor after every target conv-BN pair."""
    targets = model.targets()
    if not targets:
        raise GraphError("model has no target layers")
    src = model.copy()
    nodes, remap = [], {-1: -1}
    plan = {}
    for t in targets:
        conv = src.nodes[t]
        bn, comp, _ = src.chain(t)
        if comp is not None:
            raise GraphError(f"target layer {t} already has a compactor")
        if conv.bias is not None:
            raise GraphError(f"target layer {t} has a conv bias; conv-BN form required")
        if bn is None or src.nodes[bn].inputs != (t,):
            raise GraphError(f"target layer {t} is not directly followed by batch norm")
        plan[bn] = t
    for i, node in enumerate(src.nodes):
        node.inputs = tuple(remap[j] for j in node.inputs)
        nodes.append(node)
        remap[i] = len(nodes) - 1
        if i in plan:
            d = node.channels
            nodes.append(Compactor.identity(d, src.dtype, owner=remap[plan[i]], inputs=(remap[i],)))
            remap[i] = len(nodes) - 1
    return ModelGraph(nodes, src.input_shape, src.num_classes, kind="reparam", name=src.name)


def fuse_conv_bn(kernel, mu, sigma, gamma, beta) -> FusedConv:
    """Fold BN statistics into the kernel: K_j * gamma_j/sigma_j, bias beta_j - mu_j*gamma_j/sigma_j."""
    if np.any(sigma <= 0):
        raise ValueError("batch-norm sigma must be positive")
    scale = gamma / sigma
    return FusedConv(kernel * scale.reshape(-1, 1, 1, 1), beta - mu * scale)


def prune_compactor(q, eps=EPSILON):
    """Drop rows whose L2 norm is below ``eps``.  Returns (Q', survivors, pruned)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norms = row_norms(q.reshape(q.shape[0], -1, 1, 1))
    keep = np.flatnonzero(norms >= eps)
    drop = np.flatnonzero(norms < eps)
    if keep.size == 0:
        raise FullyPrunedError(-1)
    return q[keep], keep, drop


def merge_compactor(kernel, bias, q) -> FusedConv:
    """Fold a pointwise conv ``q`` (D' x D) into the conv (kernel, bias) it follows.

    The kernel is treated as C images of D channels and convolved with q,
    then transposed back.
    """
    q4 = q.reshape(q.shape[0], q.shape[1], 1, 1)
    if q4.shape[1] != kernel.shape[0]:
        raise ShapeError(f"compactor {q.shape[:2]} cannot follow kernel {kernel.shape}")
    merged = transpose01(conv2d(transpose01(kernel), q4))
    return FusedConv(merged, q4[:, :, 0, 0] @ bias)


def propagate_pruning(kernel, survivors):
    """Keep only the ``survivors`` input channels of a successor kernel."""
    survivors = np.asarray(survivors, dtype=np.intp)
    if survivors.size and (survivors.min() < 0 or survivors.max() >= kernel.shape[1]):
        raise ShapeError(f"survivor indices out of range for kernel {kernel.shape}")
    return np.ascontiguousarray(kernel[:, survivors])


def convert_model(model: ModelGraph, eps=EPSILON):
    """Merge every conv-BN-compactor into one narrower conv and slice its successor.

    BN uses running statistics.  Returns ``(converted, widths)`` where widths
    lists ``(target index, original width, final width)`` with indices in the
    input model.
    """
    comps = model.compactors()
    if not comps:
        raise GraphError("model has no compactors to convert")
    src = model.copy()
    replace: dict[int, object] = {}
    widths = []
    for t in src.targets():
        bn_i, comp_i, succ_i = src.chain(t)
        if comp_i is None:
            raise GraphError(f"target layer {t} has no compactor")
        if bn_i is None:
            raise GraphError(f"target layer {t} has no batch norm to fuse")
        conv, bn, comp = src.nodes[t], src.nodes[bn_i], src.nodes[comp_i]
        fused = fuse_conv_bn(conv.kernel, bn.buffers["running_mean"], bn.std(), bn.params["gamma"], bn.params["beta"])
        try:
            q, keep, _ = prune_compactor(comp.matrix, eps)
        except FullyPrunedError:
            raise FullyPrunedError(t) from None
        merged = merge_compactor(fused.kernel, fused.bias, q)
        replace[t] = Conv2d(merged.kernel, merged.bias, conv.stride, conv.padding, inputs=conv.inputs, target=True)
        replace[bn_i] = t
        replace[comp_i] = t
        succ = src.nodes[succ_i]
        succ.params["kernel"] = propagate_pruning(succ.kernel, keep)
        succ.zero_grad()
        widths.append((t, conv.out_channels, int(keep.size)))
    return _rebuild(src, replace, "converted"), widths


def prune_channels(model: ModelGraph, keep: dict[int, np.ndarray]) -> ModelGraph:
    """Physically remove channels of target layers, keeping ``keep[target]``.

    Where a compactor exists its rows are removed; otherwise the target conv's
    output channels and the matching BN entries are.  The successor's input
    channels follow either way.
    """
    out = model.copy()
    for t, idx in keep.items():
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            raise FullyPrunedError(t)
        bn_i, comp_i, succ_i = out.chain(t)
        if comp_i is not None:
            comp = out.nodes[comp_i]
            comp.params["kernel"] = np.ascontiguousarray(comp.kernel[idx])
            comp.buffers["mask"] = comp.mask[idx]
            comp.zero_grad()
        else:
            conv = out.nodes[t]
            for name in list(conv.params):
                conv.params[name] = np.ascontiguousarray(conv.params[name][idx])
            conv.zero_grad()
            if bn_i is not None:
                bn = out.nodes[bn_i]
                for store in (bn.params, bn.buffers):
                    for name in store:
                        store[name] = np.ascontiguousarray(store[name][idx])
                bn.zero_grad()
        succ = out.nodes[succ_i]
        succ.params["kernel"] = propagate_pruning(succ.kernel, idx)
        succ.zero_grad()
    return out


def target_widths(model: ModelGraph) -> dict[int, int]:
    """Effective output width of every target layer (compactor rows if present)."""
    comps = model.compactors()
    return {t: model.nodes[comps[t]].out_channels if t in comps else model.nodes[t].out_channels for t in model.targets()}


def channel_norms(model: ModelGraph) -> dict[int, np.ndarray]:
    """Per-channel norms used to rank channels: compactor rows, else target kernel rows."""
    comps = model.compactors()
    out = {}
    for t in model.targets():
        node = model.nodes[comps[t]] if t in comps else model.nodes[t]
        out[t] = row_norms(node.kernel).astype(np.float64)
    return out
