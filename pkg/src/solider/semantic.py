"""Semantic head and the token-level part classification loss.

Student tokens are flattened to (n*h*w, c), pushed through a small
linear/batch-norm/relu stack, and classified into N+1 classes (N parts plus
background). The loss averages hard-label cross-entropy over every token of
every non-degenerate image; the masked re-feed path repeats the same loss on
an image with one part blanked out, supervised by the original labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMap, flatten_tokens
from .labeler import SemanticLabelMap, mask_part
from .nn import BatchNorm1d, Linear, Module, ModuleList
from .tensor import Tensor


class SemanticHead(Module):
    """blocks x [linear -> batch-norm -> relu], then a linear classifier."""

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator,
                 hidden: int = 64, blocks: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden] * blocks
        stack = []
        for i in range(blocks):
            stack.append(Linear(dims[i], dims[i + 1], rng))
            stack.append(BatchNorm1d(dims[i + 1]))
        self.stack = ModuleList(stack)
        self.classifier = Linear(dims[-1], num_classes, rng)
        self.num_classes = num_classes

    def forward(self, x: Tensor) -> Tensor:
        for i in range(0, len(self.stack), 2):
            x = T.relu(self.stack[i + 1](self.stack[i](x)))
        return self.classifier(x)

    __call__ = forward


@dataclass
class TokenLogits:
    """(n*h*w, classes) logits; row index = n*(h*w) + u*w + v."""

    logits: Tensor
    grid: tuple  # (n, h, w)


def semantic_head_forward(fm_s: FeatureMap, head: SemanticHead) -> TokenLogits:
    n, c, h, w = fm_s.shape
    flat = flatten_tokens(fm_s)
    return TokenLogits(head(flat), (n, h, w))


def semantic_loss(token_logits: TokenLogits, label_map: SemanticLabelMap) -> Tensor:
    """Per-image mean over all h*w tokens, then mean over non-degenerate images.

    Tokens of degenerate images get a zero target row, contributing exactly
    zero loss and zero gradient. All-degenerate batches return constant 0.
    """
    n, h, w = token_logits.grid
    classes = label_map.part_count + 1
    if label_map.labels.shape != (n, h, w):
        raise T.ShapeError("semantic-loss",
                           f"labels {label_map.labels.shape} vs grid {(n, h, w)}")
    flat_labels = label_map.labels.reshape(n * h * w)
    if flat_labels.min() < 1 or flat_labels.max() > classes:
        raise ValueError(f"labels must lie in 1..{classes}")
    onehot = np.zeros((n * h * w, classes), dtype=token_logits.logits.dtype)
    onehot[np.arange(n * h * w), flat_labels - 1] = 1.0
    keep = ~label_map.degenerate
    n_valid = int(keep.sum())
    if n_valid == 0:
        return Tensor(0.0)
    onehot[np.repeat(label_map.degenerate, h * w)] = 0.0
    logp = T.log_softmax(token_logits.logits, axis=1)
    total = T.tsum(T.mul(logp, Tensor(-onehot)))
    return T.scalar_mul(total, 1.0 / (h * w * n_valid))


def masked_refeed_loss(backbone, head: SemanticHead, images: np.ndarray,
                       label_map: SemanticLabelMap, lam: float,
                       rng: np.random.Generator, mask_enabled: bool = True,
                       fm: FeatureMap | None = None) -> tuple:
    """L_sm on the image and on its part-masked copy, averaged.

    Labels come in precomputed (teacher-derived, so constants); the masked
    copy reuses them unchanged. Pass `fm` to reuse an existing student
    forward for the plain term. Returns (loss, degenerate_count).
    """
    degenerate_count = int(label_map.degenerate.sum())
    if fm is None:
        fm = backbone(images, lam)
    loss_plain = semantic_loss(semantic_head_forward(fm, head), label_map)
    if not mask_enabled:
        return loss_plain, degenerate_count
    patch_px = images.shape[2] // label_map.labels.shape[1]
    masked, _ = mask_part(images, label_map, rng, patch_px)
    fm_masked = backbone(masked, lam)
    loss_masked = semantic_loss(semantic_head_forward(fm_masked, head), label_map)
    return T.scalar_mul(T.add(loss_plain, loss_masked), 0.5), degenerate_count
