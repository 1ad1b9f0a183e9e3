"""Graph nodes with hand-written forward and backward passes.

Every node lists the indices of the nodes it reads (``-1`` is the model
input).  Trainable tensors live in ``params`` and their gradients in
``grads`` under the same names; non-trainable state lives in ``buffers``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, conv2d, conv2d_backward


class Node:
    kind = "node"

    def __init__(self, inputs=(-1,)):
        self.inputs = tuple(inputs)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def attrs(self) -> dict:
        """Hyper-parameters needed to rebuild the node (checkpointing)."""
        return {}

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k, v in store.items():
                if v.dtype.kind == "f":
                    store[k] = v.astype(dtype)
        self.zero_grad()
        return self

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}(inputs={self.inputs}{', ' if shapes else ''}{shapes})"


class Conv2d(Node):
    """Convolution; ``target`` marks it as a pruning candidate."""

    kind = "conv"

    def __init__(self, kernel, bias=None, stride=1, padding=0, inputs=(-1,), target=False):
        super().__init__(inputs)
        self.params["kernel"] = kernel
        if bias is not None:
            self.params["bias"] = bias
        self.stride = stride
        self.padding = padding
        self.target = target
        self.zero_grad()

    @property
    def kernel(self):
        return self.params["kernel"]

    @property
    def bias(self):
        return self.params.get("bias")

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    def attrs(self):
        return {"stride": self.stride, "padding": self.padding, "target": self.target}

    def forward(self, x, train=False):
        out, self._cols = conv2d(x, self.kernel, self.bias, self.stride, self.padding, return_cols=True)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        dx, dk, db = conv2d_backward(dout, self._x_shape, self.kernel, self._cols, self.stride, self.padding)
        self.grads["kernel"] += dk
        if "bias" in self.params:
            self.grads["bias"] += db
        self._cols = None
        return (dx,)


class Compactor(Conv2d):
    """Pointwise conv appended to a target conv-BN; starts as a D x D identity.

    Pruning leaves a D' x D kernel, so only the 1x1 shape is enforced.
    """

    kind = "compactor"

    def __init__(self, kernel, mask=None, owner=-1, inputs=(-1,)):
        d = kernel.shape[0]
        if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
            raise ShapeError(f"compactor kernel must be (D', D, 1, 1), got {kernel.shape}")
        super().__init__(kernel, None, 1, 0, inputs)
        self.buffers["mask"] = np.ones(d, dtype=np.uint8) if mask is None else np.asarray(mask, dtype=np.uint8)
        self.owner = owner

    @classmethod
    def identity(cls, d, dtype=np.float32, owner=-1, inputs=(-1,)):
        return cls(np.eye(d, dtype=dtype).reshape(d, d, 1, 1), owner=owner, inputs=inputs)

    @property
    def mask(self):
        return self.buffers["mask"]

    @property
    def matrix(self):
        return self.kernel.reshape(self.out_channels, -1)

    def attrs(self):
        return {"owner": self.owner}


class BatchNorm2d(Node):
    kind = "bn"

    def __init__(self, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1, inputs=(-1,)):
        super().__init__(inputs)
        self.params["gamma"] = gamma
        self.params["beta"] = beta
        self.buffers["running_mean"] = running_mean
        self.buffers["running_var"] = running_var
        self.eps = eps
        self.momentum = momentum
        self.zero_grad()

    @classmethod
    def fresh(cls, d, dtype=np.float32, inputs=(-1,)):
        return cls(
            np.ones(d, dtype), np.zeros(d, dtype), np.zeros(d, dtype), np.ones(d, dtype), inputs=inputs
        )

    @property
    def channels(self):
        return self.params["gamma"].shape[0]

    def std(self):
        """Inference-time sigma, sqrt(running_var + eps)."""
        return np.sqrt(self.buffers["running_var"] + self.eps)

    def attrs(self):
        return {"eps": self.eps, "momentum": self.momentum}

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm over {self.channels} channels got input {x.shape}")
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        beta = self.params["beta"].reshape(1, -1, 1, 1)
        if not train:
            mean = self.buffers["running_mean"].reshape(1, -1, 1, 1)
            std = self.std().reshape(1, -1, 1, 1)
            return (x - mean) / std * gamma + beta
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm *= 1 - self.momentum
        rm += self.momentum * mean
        rv *= 1 - self.momentum
        rv += self.momentum * var * (m / max(m - 1, 1))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv)
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv = self._cache
        self._cache = None
        self.grads["gamma"] += (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["gamma"].reshape(1, -1, 1, 1)
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return ((dxhat - mean_d - xhat * mean_dx) * inv.reshape(1, -1, 1, 1),)


class ReLU(Node):
    kind = "relu"

    def forward(self, x, train=False):
        self._pos = x > 0
        return np.where(self._pos, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        # zero subgradient at exactly 0
        return (np.where(self._pos, dout, 0).astype(dout.dtype, copy=False),)


class Add(Node):
    """Residual join; both inputs must agree in shape."""

    kind = "add"

    def __init__(self, inputs):
        if len(inputs) != 2:
            raise ValueError("add takes exactly two inputs")
        super().__init__(inputs)

    def forward(self, a, b, train=False):
        if a.shape != b.shape:
            raise ShapeError(f"residual add of {a.shape} and {b.shape}")
        return a + b

    def backward(self, dout):
        return (dout, dout)


class GlobalAvgPool(Node):
    """Mean over H, W; keeps a (N, C, 1, 1) shape so a 1x1 conv can act as the classifier."""

    kind = "gap"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout):
        n, c, h, w = self._shape
        return (np.broadcast_to(dout / (h * w), self._shape).astype(dout.dtype),)


NODE_TYPES = {cls.kind: cls for cls in (Conv2d, Compactor, BatchNorm2d, ReLU, Add, GlobalAvgPool)}
