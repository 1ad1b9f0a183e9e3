"""Model graph, cross-entropy objective and evaluation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm2d, Compactor, Conv2d, Node, ReLU
from .tensor import ShapeError


class GraphError(ValueError):
    pass


class ModelGraph:
    """Nodes in topological order; the last node's output is the logits.

    ``kind`` is ``"base"``, ``"reparam"`` (compactors attached) or
    ``"converted"`` (compactors merged away).
    """

    def __init__(self, nodes: list[Node], input_shape, num_classes, kind="base", name="model"):
        self.nodes = list(nodes)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.kind = kind
        self.name = name
        self.validate()

    # structure -------------------------------------------------------------

    def consumers(self):
        out = {i: [] for i in range(-1, len(self.nodes))}
        for i, node in enumerate(self.nodes):
            for j in node.inputs:
                out[j].append(i)
        return out

    def targets(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if isinstance(n, Conv2d) and not isinstance(n, Compactor) and n.target]

    def compactors(self) -> dict[int, int]:
        """Map target conv index -> index of its compactor."""
        return {n.owner: i for i, n in enumerate(self.nodes) if isinstance(n, Compactor)}

    def chain(self, target: int):
        """Walk from a target conv through its BN / compactor / ReLU to the consuming conv.

        Returns ``(bn, compactor, successor)``; bn and compactor may be None.
        """
        cons = self.consumers()
        bn = comp = None
        i = target
        while True:
            nxt = cons[i]
            if len(nxt) != 1:
                raise GraphError(f"target conv {target}: node {i} feeds {len(nxt)} consumers, expected one conv")
            i = nxt[0]
            node = self.nodes[i]
            if isinstance(node, Compactor):
                comp = i
            elif isinstance(node, BatchNorm2d):
                bn = i
            elif isinstance(node, Conv2d):
                return bn, comp, i
            elif not isinstance(node, ReLU):
                raise GraphError(f"target conv {target} reaches {node.kind} node {i} before any conv")

    def successors(self) -> dict[int, int]:
        return {t: self.chain(t)[2] for t in self.targets()}

    def validate(self):
        for i, node in enumerate(self.nodes):
            if any(j >= i or j < -1 for j in node.inputs):
                raise GraphError(f"node {i} reads {node.inputs}; graph must be topologically ordered")
        for t in self.targets():
            self.chain(t)
        return self

    # numerics --------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, n in enumerate(self.nodes) for k, v in n.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, n in enumerate(self.nodes) for k, v in n.grads.items()}

    def zero_grad(self):
        for n in self.nodes:
            n.zero_grad()

    @property
    def dtype(self):
        for n in self.nodes:
            for v in n.params.values():
                return v.dtype
        return np.dtype(np.float32)

    def astype(self, dtype):
        for n in self.nodes:
            n.astype(dtype)
        return self

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        x = np.asarray(x, dtype=self.dtype)
        acts = []
        for i, node in enumerate(self.nodes):
            args = [x if j == -1 else acts[j] for j in node.inputs]
            try:
                acts.append(node.forward(*args, train=train))
            except ShapeError as e:
                raise ShapeError(f"node {i} ({node.kind}): {e}") from None
        out = acts[-1]
        if out.shape[2:] != (1, 1):
            raise ShapeError(f"final node emits {out.shape}; expected (N, classes, 1, 1)")
        return out.reshape(out.shape[0], -1)

    def backward(self, dlogits):
        """Accumulate parameter gradients given d(loss)/d(logits)."""
        n = len(self.nodes)
        dacts: list[np.ndarray | None] = [None] * n
        dacts[-1] = dlogits.reshape(dlogits.shape + (1, 1))
        dinput = None
        for i in range(n - 1, -1, -1):
            g = dacts[i]
            if g is None:
                continue
            dacts[i] = None
            for j, dj in zip(self.nodes[i].inputs, self.nodes[i].backward(g)):
                if dj is None:
                    continue
                if j == -1:
                    dinput = dj if dinput is None else dinput + dj
                elif dacts[j] is None:
                    dacts[j] = dj
                else:
                    dacts[j] = dacts[j] + dj
        return dinput

    def __call__(self, x, train=False):
        return self.forward(x, train)

    def __repr__(self):
        return f"ModelGraph({self.name!r}, kind={self.kind}, nodes={len(self.nodes)}, input={self.input_shape})"


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1
    return float(loss), (d / n).astype(logits.dtype, copy=False)


@dataclass
class LossOutput:
    loss: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    logits: np.ndarray | None = None


def loss_and_grads(model: ModelGraph, x, labels) -> LossOutput:
    """Train-mode forward, cross-entropy, backward.  No penalty terms."""
    model.zero_grad()
    logits = model.forward(x, train=True)
    loss, dlogits = softmax_cross_entropy(logits, np.asarray(labels))
    model.backward(dlogits)
    return LossOutput(loss, model.gradients(), logits)


def predict(model: ModelGraph, x, batch_size=256):
    return np.concatenate([model.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def evaluate(model: ModelGraph, dataset, batch_size=256) -> float:
    """Top-1 accuracy in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for x, y in dataset.batches(batch_size):
        correct += int((model.forward(x).argmax(axis=1) == y).sum())
    return correct / len(dataset)

