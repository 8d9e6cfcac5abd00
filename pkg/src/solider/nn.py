"""Parameter containers and the layers shared across the pipeline."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Tracks parameters, numpy buffers, and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of all parameters and buffers."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray], prefix: str = ""):
        """Copy matching arrays in place; raises naming the first mismatch."""
        own = self.state_arrays()
        for name, arr in own.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing tensor '{key}'")
            src = state[key]
            if tuple(src.shape) != tuple(arr.shape):
                raise ValueError(
                    f"structure mismatch at tensor '{key}': expected {tuple(arr.shape)}, got {tuple(src.shape)}"
                )
            arr[...] = src.astype(arr.dtype)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    __call__ = forward


class WeightNormLinear(Module):
    """Final prototype layer: rows of the weight are L2-normalized at use."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = parameter(rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim)))

    def forward(self, x: Tensor) -> Tensor:
        norm = T.l2norm(self.weight, axis=1, keepdims=True, eps=1e-12)
        w = T.div(self.weight, norm)
        return T.matmul(x, T.transpose(w, (1, 0)))

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    __call__ = forward


class BatchNorm1d(Module):
    """Feature-wise batch norm with momentum-0.1 running statistics."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(dim, dtype=T.get_default_dtype()))
        self.register_buffer("running_var", np.ones(dim, dtype=T.get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta,
            self.running_mean, self.running_var,
            momentum=self.momentum, eps=self.eps, training=self.training,
        )

    __call__ = forward


class Mlp(Module):
    """Two-layer GELU MLP used inside transformer blocks."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    __call__ = forward
