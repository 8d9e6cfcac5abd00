"""Teacher-student contrastive objective and its moving parts.

Projection heads map pooled backbone features to prototype logits. The loss
is cross-entropy between the teacher's centered, sharpened distribution and
the student's; the teacher never receives gradient and is updated only as an
exponential moving average of the student.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import bilinear_resize
from .nn import Linear, Module, WeightNormLinear
from .tensor import Tensor


class ProjectionHead(Module):
    """in_dim -> hidden -> bottleneck, L2-normalize, then prototype logits."""

    def __init__(self, in_dim: int, rng: np.random.Generator,
                 hidden: int = 256, bottleneck: int = 256, prototypes: int = 1024):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, bottleneck, rng)
        self.prototypes = WeightNormLinear(bottleneck, prototypes, rng)
        self.out_dim = prototypes

    def forward(self, x: Tensor) -> Tensor:
        x = self.fc2(T.gelu(self.fc1(x)))
        norm = T.l2norm(x, axis=1, keepdims=True, eps=1e-12)
        return self.prototypes(T.div(x, norm))

    __call__ = forward


def dino_loss(student_logits: Tensor, teacher_logits, center,
              temp_s: float = 0.1, temp_t: float = 0.04) -> Tensor:
    """Mean over the batch of -sum_k P_t log P_s.

    P_t = softmax((teacher - center) / temp_t), computed off-tape so no
    gradient can reach the teacher. P_s = softmax(student / temp_s).
    """
    if temp_s <= 0 or temp_t <= 0:
        raise ValueError(f"temperatures must be positive, got {temp_s}, {temp_t}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    c = center.data if isinstance(center, Tensor) else np.asarray(center)
    shifted = (t - c) / temp_t
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p_t = e / e.sum(axis=1, keepdims=True)
    return T.soft_cross_entropy(T.scalar_mul(student_logits, 1.0 / temp_s), p_t)


def ema_update(teacher: Module, student: Module, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise over all state."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"ema momentum must be in [0,1), got {m}")
    t_state = teacher.state_arrays()
    s_state = student.state_arrays()
    if set(t_state) != set(s_state):
        missing = set(t_state) ^ set(s_state)
        raise ValueError(f"structure mismatch: {sorted(missing)[:3]}")
    for name, t_arr in t_state.items():
        s_arr = s_state[name]
        if t_arr.shape != s_arr.shape:
            raise ValueError(f"structure mismatch at tensor '{name}': {t_arr.shape} vs {s_arr.shape}")
        t_arr *= m
        t_arr += (1.0 - m) * s_arr


def center_update(center: np.ndarray, teacher_batch_logits, momentum: float = 0.9) -> np.ndarray:
    """center <- momentum * center + (1 - momentum) * batch mean of teacher logits."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"center momentum must be in [0,1], got {momentum}")
    t = teacher_batch_logits.data if isinstance(teacher_batch_logits, Tensor) else np.asarray(teacher_batch_logits)
    if t.ndim != 2 or t.shape[1] != center.shape[0]:
        raise T.ShapeError("center-update", f"logits {t.shape} vs center {center.shape}")
    return momentum * center + (1.0 - momentum) * t.mean(axis=0)


@dataclass
class AugConfig:
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    hflip_prob: float = 0.5
    jitter: float = 0.2

    @classmethod
    def identity(cls):
        return cls(crop_scale_min=1.0, crop_scale_max=1.0, hflip_prob=0.0, jitter=0.0)


def _augment_one(img: np.ndarray, aug: AugConfig, rng: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    scale = rng.uniform(aug.crop_scale_min, aug.crop_scale_max)
    side = np.sqrt(scale)
    ch = max(1, int(round(h * side)))
    cw = max(1, int(round(w * side)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = img[:, top:top + ch, left:left + cw]
    if (ch, cw) != (h, w):
        out = bilinear_resize(out, h, w)
    if rng.random() < aug.hflip_prob:
        out = out[:, :, ::-1]
    if aug.jitter > 0:
        gain = 1.0 + rng.uniform(-aug.jitter, aug.jitter, size=3)
        shift = rng.uniform(-aug.jitter, aug.jitter)
        out = out * gain[:, None, None].astype(img.dtype) + np.asarray(shift, dtype=img.dtype)
    return np.ascontiguousarray(out, dtype=img.dtype)


def make_views(images: np.ndarray, aug: AugConfig, rng: np.random.Generator) -> tuple:
    """Two independently augmented copies of the batch; one RNG stream per view.

    Child streams are seeded from integer draws so the parent generator's
    serialized state fully determines them (checkpoint resume stays exact).
    """
    seeds = rng.integers(0, 2 ** 63 - 1, size=2)
    views = []
    for seed in seeds:
        stream = np.random.default_rng(int(seed))
        views.append(np.stack([_augment_one(img, aug, stream) for img in images]))
    return views[0], views[1]
