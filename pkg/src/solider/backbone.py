"""Micro windowed-attention transformer producing the token feature field.

Two stages of window-attention blocks over non-overlapping windows, one 2x
patch-merging downsample in between, and an optional semantic controller
applied after every block's residual sum. Output is a (n, c, h, w) token
field whose (u, v) cells map back to image patch regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .controller import LambdaController, check_lambda
from .nn import LayerNorm, Linear, Mlp, Module, ModuleList, parameter
from .tensor import Tensor


@dataclass
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (2, 4)
    window_size: int = 4
    mlp_ratio: float = 2.0
    shifted_windows: bool = False
    controller_hidden: int = 16

    def __post_init__(self):
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have one entry per stage")
        for i, h in enumerate(self.heads):
            if self.stage_dim(i) % h != 0:
                raise ValueError(f"stage {i} dim {self.stage_dim(i)} not divisible by {h} heads")

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    @property
    def num_blocks(self) -> int:
        return sum(self.depths)

    @property
    def out_dim(self) -> int:
        return self.stage_dim(len(self.depths) - 1)

    def total_downsample(self) -> int:
        return self.patch_size * (2 ** (len(self.depths) - 1))

    def check_image_shape(self, h_px: int, w_px: int) -> None:
        unit = self.patch_size * self.window_size
        if h_px % unit or w_px % unit:
            raise T.ShapeError(
                "patch-embed",
                f"image {h_px}x{w_px} must be a multiple of patch*window = {unit}",
            )
        h, w = h_px // self.patch_size, w_px // self.patch_size
        for stage in range(len(self.depths)):
            if h % self.window_size or w % self.window_size:
                raise T.ShapeError(
                    "window-partition",
                    f"stage {stage} grid {h}x{w} not divisible by window {self.window_size}",
                )
            h, w = h // 2, w // 2


@dataclass
class FeatureMap:
    """Token field F with shape (n, c, h, w)."""

    tokens: Tensor
    stage: int
    lambda_used: float | None = None

    @property
    def shape(self):
        return self.tokens.shape

    def numpy(self) -> np.ndarray:
        return self.tokens.numpy()


def flatten_tokens(fm: FeatureMap) -> Tensor:
    """(n, c, h, w) -> (n*h*w, c) with row index n*(h*w) + u*w + v."""
    n, c, h, w = fm.tokens.shape
    return T.reshape(T.transpose(fm.tokens, (0, 2, 3, 1)), (n * h * w, c))


def global_pool(fm: FeatureMap) -> Tensor:
    """(n, c, h, w) -> (n, c) average over the token grid."""
    return T.tmean(fm.tokens, axis=(2, 3))


def _roll(x: Tensor, shift: int, axis: int) -> Tensor:
    size = x.shape[axis]
    shift %= size
    if shift == 0:
        return x
    return T.concat([T.narrow(x, axis, shift, size - shift), T.narrow(x, axis, 0, shift)], axis)


def window_partition(x: Tensor, s: int) -> Tensor:
    """(n, h, w, c) -> (n * h/s * w/s, s*s, c)."""
    n, h, w, c = x.shape
    x = T.reshape(x, (n, h // s, s, w // s, s, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n * (h // s) * (w // s), s * s, c))


def window_merge(x: Tensor, s: int, n: int, h: int, w: int) -> Tensor:
    """Inverse of window_partition."""
    c = x.shape[-1]
    x = T.reshape(x, (n, h // s, w // s, s, s, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h, w, c))


class PatchEmbed(Module):
    def __init__(self, cfg: BackboneConfig, image_hw: tuple[int, int], rng: np.random.Generator):
        super().__init__()
        p = cfg.patch_size
        self.patch_size = p
        self.grid = (image_hw[0] // p, image_hw[1] // p)
        self.proj = Linear(3 * p * p, cfg.embed_dim, rng)
        # strong positional prior: token content must stay location-aware at
        # small data scale, where nothing else pushes position into channels
        self.pos_bias = parameter(rng.normal(0.0, 0.5, size=(*self.grid, cfg.embed_dim)))

    def forward(self, images: Tensor) -> Tensor:
        n, ch, hp, wp = images.shape
        if ch != 3:
            raise T.ShapeError("patch-embed", f"expected 3 channels, got {ch}")
        p = self.patch_size
        h, w = hp // p, wp // p
        x = T.reshape(images, (n, 3, h, p, w, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (n * h * w, 3 * p * p))
        x = self.proj(x)
        x = T.reshape(x, (n, h, w, x.shape[-1]))
        return T.add(x, self.pos_bias)

    __call__ = forward


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        qkv = self.qkv(x)
        qkv = T.reshape(qkv, (b, t, 3, self.heads, self.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q = T.reshape(T.narrow(qkv, 0, 0, 1), (b, self.heads, t, self.head_dim))
        k = T.reshape(T.narrow(qkv, 0, 1, 1), (b, self.heads, t, self.head_dim))
        v = T.reshape(T.narrow(qkv, 0, 2, 1), (b, self.heads, t, self.head_dim))
        attn = T.softmax(T.scalar_mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale), axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, c))
        return self.proj(out)

    __call__ = forward


class SwinBlock(Module):
    def __init__(self, dim: int, heads: int, window_size: int, mlp_ratio: float,
                 shift: int, rng: np.random.Generator):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        s = self.window_size
        if h % s or w % s:
            raise T.ShapeError("window-partition", f"grid {h}x{w} not divisible by window {s}")
        y = self.norm1(x)
        if self.shift:
            y = _roll(_roll(y, self.shift, 1), self.shift, 2)
        y = window_partition(y, s)
        y = self.attn(y)
        y = window_merge(y, s, n, h, w)
        if self.shift:
            y = _roll(_roll(y, -self.shift, 1), -self.shift, 2)
        x = T.add(x, y)
        n_tok = n * h * w
        z = T.reshape(self.norm2(x), (n_tok, c))
        z = T.reshape(self.mlp(z), (n, h, w, c))
        return T.add(x, z)

    __call__ = forward


class PatchMerging(Module):
    """2x2 neighborhood concat + projection to double the channel width.

    Projection only, no norm: normalizing here would equalize token scales
    across the whole field, and downstream consumers rank tokens by norm.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        x = T.reshape(x, (n, h // 2, 2, w // 2, 2, c))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (n * (h // 2) * (w // 2), 4 * c))
        x = self.reduce(x)
        return T.reshape(x, (n, h // 2, w // 2, 2 * c))

    __call__ = forward


class Backbone(Module):
    """Stacked stages with one controller per block, applied after the residual sum."""

    def __init__(self, cfg: BackboneConfig, image_hw: tuple[int, int], rng: np.random.Generator):
        super().__init__()
        cfg.check_image_shape(*image_hw)
        self.cfg = cfg
        self.image_hw = image_hw
        self.patch_embed = PatchEmbed(cfg, image_hw, rng)
        blocks, controllers, downsamples = [], [], []
        for stage, depth in enumerate(cfg.depths):
            dim = cfg.stage_dim(stage)
            for i in range(depth):
                shift = cfg.window_size // 2 if (cfg.shifted_windows and i % 2 == 1) else 0
                blocks.append(SwinBlock(dim, cfg.heads[stage], cfg.window_size, cfg.mlp_ratio, shift, rng))
                controllers.append(LambdaController(dim, cfg.controller_hidden, rng))
            if stage + 1 < len(cfg.depths):
                downsamples.append(PatchMerging(dim, rng))
        self.blocks = ModuleList(blocks)
        self.controllers = ModuleList(controllers)
        self.downsamples = ModuleList(downsamples)
        self._stage_end = np.cumsum(cfg.depths).tolist()

    def forward(self, images, lam: float, use_controllers: bool = True) -> FeatureMap:
        lam = check_lambda(lam)
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=T.get_default_dtype()))
        self.cfg.check_image_shape(images.shape[2], images.shape[3])
        x = self.patch_embed(images)
        stage = 0
        for i, block in enumerate(self.blocks):
            x = block(x)
            if use_controllers:
                x = self.controllers[i](x, lam)
            if i + 1 == self._stage_end[stage] and stage + 1 < len(self.cfg.depths):
                x = self.downsamples[stage](x)
                stage += 1
        tokens = T.transpose(x, (0, 3, 1, 2))
        return FeatureMap(tokens=tokens, stage=len(self.cfg.depths) - 1,
                          lambda_used=lam if use_controllers else None)

    __call__ = forward
