"""Semantic controller: encodes the ratio value into per-channel modulation.

A scalar ``lam`` in [0, 1] is mapped by a tiny two-layer encoder to a weight
vector and a bias vector of the host block's channel width. The weight path
goes through softplus (so the multiplier is always positive) and scales the
feature map; the bias is added raw.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor

# softplus(SOFTPLUS_ONE) == 1 exactly, making the initial multiplier 1.
SOFTPLUS_ONE = math.log(math.e - 1.0)


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    return lam


class LambdaController(Module):
    """Per-block conditional modulation of a (n, h, w, c) token field."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        self.channels = channels
        self.fc1 = Linear(1, hidden, rng)
        self.fc2 = Linear(hidden, 2 * channels, rng)
        # Identity at init: zero final weights; bias chosen so the weight
        # vector comes out of softplus as exactly 1 and the bias vector as 0.
        self.fc2.weight.data[...] = 0.0
        bias = np.zeros(2 * channels)
        bias[:channels] = SOFTPLUS_ONE
        self.fc2.bias.data[...] = bias

    def encode(self, lam: float) -> tuple[Tensor, Tensor]:
        """Return (weight multiplier (c,), bias (c,)) for one lambda."""
        lam = check_lambda(lam)
        v = Tensor(np.array([[lam]], dtype=T.get_default_dtype()))
        enc = self.fc2(T.gelu(self.fc1(v)))
        w = T.softplus(T.reshape(T.narrow(enc, 1, 0, self.channels), (self.channels,)))
        b = T.reshape(T.narrow(enc, 1, self.channels, self.channels), (self.channels,))
        return w, b

    def forward(self, tokens: Tensor, lam: float) -> Tensor:
        if tokens.shape[-1] != self.channels:
            raise T.ShapeError(
                "controller", f"channel mismatch: tokens {tokens.shape} vs controller c={self.channels}"
            )
        w, b = self.encode(lam)
        return T.add(T.mul(tokens, w), b)

    __call__ = forward
