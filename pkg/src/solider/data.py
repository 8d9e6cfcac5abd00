"""Synthetic person-figure corpus, image ingestion, and pixel helpers.

The corpus embodies the prior the pipeline relies on: an erect figure fills
the image top to bottom, split into three horizontal bands (top wear, bottom
wear, shoes) whose colors are drawn per identity. Band boundaries and figure
placement jitter per image so token position alone cannot predict a band.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

# pixel normalization: (x - mean) / std on [0,1] channel values
NORM_MEAN = 0.5
NORM_STD = 0.25

MANIFEST_NAME = "manifest.json"


@dataclass
class ImageBatch:
    """Normalized pixels (n, 3, H, W) plus per-image identifiers."""

    pixels: np.ndarray
    source_ids: list

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 32
    band_upper: float = 0.4
    band_lower: float = 0.35
    band_shoes: float = 0.25
    figure_width: float = 0.55
    identities: int = 32
    images_per_identity: int = 64
    background: float = 0.5
    noise_sigma: float = 0.02
    # per-image geometry jitter, all as fractions of the relevant extent
    center_jitter: float = 0.12
    width_jitter: float = 0.15
    band_jitter: float = 0.08
    min_color_dist: float = 0.15

    @property
    def band_fractions(self) -> tuple:
        return (self.band_upper, self.band_lower, self.band_shoes)

    def validate(self):
        if abs(sum(self.band_fractions) - 1.0) > 1e-9:
            raise ValueError(f"band fractions must sum to 1, got {self.band_fractions}")
        if self.height < 16 or self.width < 16:
            raise ValueError("image must be at least 16x16")
        if not 0.1 <= self.figure_width <= 1.0:
            raise ValueError("figure_width must be in [0.1, 1]")
        return self


def normalize(pixels01: np.ndarray) -> np.ndarray:
    return ((pixels01 - NORM_MEAN) / NORM_STD).astype(np.float32)


def denormalize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(pixels * NORM_STD + NORM_MEAN, 0.0, 1.0)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (c, h, w) with half-pixel-center sampling; same-size is exact."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = (ys - y0).astype(img.dtype)
    tx = (xs - x0).astype(img.dtype)
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    top = img[:, y0c][:, :, x0c] * (1 - tx) + img[:, y0c][:, :, x1c] * tx
    bot = img[:, y1c][:, :, x0c] * (1 - tx) + img[:, y1c][:, :, x1c] * tx
    return top * (1 - ty[None, :, None]) + bot * ty[None, :, None]


def band_row_counts(rows: int, fractions) -> list:
    """Rows per band from cumulative-floor boundaries.

    Boundary k sits at floor(rows * cumsum(fractions)[k]); any rounding
    remainder therefore lands in the last band.
    """
    cuts = []
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        cuts.append(int(math.floor(rows * acc)))
    edges = [0] + cuts + [rows]
    return [edges[i + 1] - edges[i] for i in range(len(fractions))]


def _identity_colors(rng: np.random.Generator, min_dist: float) -> np.ndarray:
    """Three saturated band colors, distinct from one another.

    Each channel sits near 0.1 or 0.9 with a small jitter, so every band is
    far from the gray background while identities stay distinguishable.
    """
    colors = []
    while len(colors) < 3:
        poles = np.where(rng.random(3) < 0.5, 0.1, 0.9)
        c = np.clip(poles + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        if any(np.linalg.norm(c - prev) < min_dist for prev in colors):
            continue
        colors.append(c)
    return np.stack(colors)


def _snap(value: float, step: int, lo: int, hi: int) -> int:
    """Round to the nearest multiple of step, clipped into [lo, hi]."""
    if hi < lo:
        lo, hi = hi, lo
    snapped = int(round(value / step)) * step
    return int(np.clip(snapped, lo, hi))


def _paint_image(spec: SyntheticSpec, colors: np.ndarray, rng: np.random.Generator, align: int = 1):
    """One jittered figure; returns (pixels01 (3,H,W), per-pixel class grid (H,W)).

    Figure edges and band boundaries land on multiples of `align` so each
    align x align cell is covered by a single class.
    """
    h, w = spec.height, spec.width
    fig_w = w * spec.figure_width * (1.0 + rng.uniform(-spec.width_jitter, spec.width_jitter))
    fig_w = _snap(fig_w, align, -(-6 // align) * align, w)
    center = w / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter) * w
    left = _snap(center - fig_w / 2.0, align, 0, w - fig_w)

    f1, f2, _ = spec.band_fractions
    b1 = _snap(h * (f1 + rng.uniform(-spec.band_jitter, spec.band_jitter)), align, align, h - 2 * align)
    b2 = _snap(h * (f1 + f2 + rng.uniform(-spec.band_jitter, spec.band_jitter)), align, b1 + align, h - align)

    classes = np.full((h, w), 4, dtype=np.int32)  # 4 = background
    cols = slice(left, left + fig_w)
    classes[0:b1, cols] = 1
    classes[b1:b2, cols] = 2
    classes[b2:h, cols] = 3

    pixels = np.full((3, h, w), spec.background, dtype=np.float64)
    for part in (1, 2, 3):
        mask = classes == part
        pixels[:, mask] = colors[part - 1][:, None]
    if spec.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, spec.noise_sigma, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0), classes


def token_labels_from_classes(classes: np.ndarray, downsample: int) -> np.ndarray:
    """Majority per-pixel class inside each token cell; first max wins ties."""
    h, w = classes.shape
    gh, gw = h // downsample, w // downsample
    labels = np.zeros((gh, gw), dtype=np.int32)
    for u in range(gh):
        for v in range(gw):
            cell = classes[u * downsample:(u + 1) * downsample, v * downsample:(v + 1) * downsample]
            counts = [(cell == cls).sum() for cls in (1, 2, 3, 4)]
            labels[u, v] = 1 + int(np.argmax(counts))
    return labels


def gen_synthetic_corpus(spec: SyntheticSpec, seed: int, out_dir: str, downsample: int = 8) -> dict:
    """Write PNGs plus a manifest with identities and ground-truth token labels."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    idx = 0
    for ident in range(spec.identities):
        colors = _identity_colors(rng, spec.min_color_dist)
        for _ in range(spec.images_per_identity):
            pixels01, classes = _paint_image(spec, colors, rng, align=downsample)
            name = f"img_{idx:05d}.png"
            arr = np.round(pixels01 * 255.0).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr, mode="RGB").save(os.path.join(out_dir, name))
            entries.append({
                "file": name,
                "identity": ident,
                "token_labels": token_labels_from_classes(classes, downsample).tolist(),
            })
            idx += 1
    manifest = {
        "version": 1,
        "seed": seed,
        "downsample": downsample,
        "spec": asdict(spec),
        "images": entries,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


@dataclass
class CorpusData:
    """A generated corpus loaded back into memory."""

    images: np.ndarray          # (n, 3, H, W) normalized
    identities: np.ndarray      # (n,) int
    token_labels: np.ndarray    # (n, gh, gw) int, ground truth
    files: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def batch(self, indices) -> ImageBatch:
        return ImageBatch(self.images[indices], [self.files[i] for i in np.atleast_1d(indices)])


def load_corpus(corpus_dir: str) -> CorpusData:
    with open(os.path.join(corpus_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    images, idents, labels, files = [], [], [], []
    for entry in manifest["images"]:
        img = Image.open(os.path.join(corpus_dir, entry["file"])).convert("RGB")
        pixels01 = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        images.append(normalize(pixels01))
        idents.append(entry["identity"])
        labels.append(np.asarray(entry["token_labels"], dtype=np.int32))
        files.append(entry["file"])
    return CorpusData(
        images=np.stack(images),
        identities=np.asarray(idents, dtype=np.int64),
        token_labels=np.stack(labels),
        files=files,
    )


def ingest_images(image_dir: str, target_hw: tuple) -> tuple:
    """Load a directory of images resized to target; returns (ImageBatch, skipped)."""
    th, tw = target_hw
    names = sorted(os.listdir(image_dir)) if os.path.isdir(image_dir) else []
    pixels, ids, skipped = [], [], 0
    for name in names:
        if name == MANIFEST_NAME:
            continue
        path = os.path.join(image_dir, name)
        if not os.path.isfile(path):
            continue
        try:
            img = Image.open(path).convert("RGB")
        except Exception:
            warnings.warn(f"skipping unreadable file {name}")
            skipped += 1
            continue
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        if arr.shape[1:] != (th, tw):
            arr = bilinear_resize(arr, th, tw)
        pixels.append(normalize(arr))
        ids.append(name)
    stacked = np.stack(pixels) if pixels else np.zeros((0, 3, th, tw), dtype=np.float32)
    return ImageBatch(stacked, ids), skipped
