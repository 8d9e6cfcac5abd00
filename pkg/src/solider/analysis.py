"""Representation diagnostics across the ratio value.

For each lambda on a grid: extract frozen features, average token vectors
into one unit-norm vector per (image, part), then measure how far parts of
the same image sit from each other (intra) and how far same-labeled parts
of different images sit (inter). Linear probes on the same frozen features
give a semantic-vs-appearance accuracy trade-off readout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import tensor as T
from .backbone import global_pool
from .labeler import SemanticLabelMap, make_labels


@dataclass
class PartFeature:
    """Unit-norm mean token vector of one part in one image."""

    image_id: int
    part: int
    vector: np.ndarray


@dataclass
class SweepReport:
    lambdas: list
    intra: list
    inter: list
    part_probe_acc: list
    identity_probe_acc: list

    def rows(self):
        for i, lam in enumerate(self.lambdas):
            yield (lam, self.intra[i], self.inter[i],
                   self.part_probe_acc[i], self.identity_probe_acc[i])


def extract_features(backbone, images: np.ndarray, lam: float,
                     batch_size: int = 64) -> tuple:
    """Frozen forward passes; returns (pooled (n,c), tokens (n,c,h,w))."""
    pooled, tokens = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            fm = backbone(images[start:start + batch_size], lam)
            pooled.append(global_pool(fm).numpy())
            tokens.append(fm.numpy())
    if not pooled:
        c = backbone.cfg.out_dim
        return np.zeros((0, c), dtype=np.float32), np.zeros((0, c, 0, 0), dtype=np.float32)
    return np.concatenate(pooled), np.concatenate(tokens)


def build_part_features(tokens: np.ndarray, labels: np.ndarray, n_parts: int) -> list:
    """One PartFeature per (image, present part); empty parts are skipped."""
    n = tokens.shape[0]
    grid = np.transpose(tokens, (0, 2, 3, 1))
    out = []
    for i in range(n):
        for part in range(1, n_parts + 1):
            mask = labels[i] == part
            if not mask.any():
                continue
            vec = grid[i][mask].mean(axis=0).astype(np.float64)
            norm = np.linalg.norm(vec)
            if norm <= 0:
                continue
            out.append(PartFeature(i, part, vec / norm))
    return out


def _cosine_distances(vectors: np.ndarray) -> float:
    """Mean pairwise cosine distance among unit vectors (rows)."""
    sims = vectors @ vectors.T
    m = vectors.shape[0]
    iu = np.triu_indices(m, k=1)
    return float((1.0 - sims[iu]).mean())


def intra_image_distance(parts: list) -> float:
    """Mean over images of mean pairwise distance among that image's parts."""
    by_image = {}
    for pf in parts:
        by_image.setdefault(pf.image_id, []).append(pf.vector)
    per_image = [_cosine_distances(np.stack(vecs))
                 for vecs in by_image.values() if len(vecs) >= 2]
    if not per_image:
        raise ValueError("no image contributes two or more parts")
    return float(np.mean(per_image))


def inter_image_distance(parts: list) -> float:
    """Mean over labels of mean pairwise distance across distinct images."""
    by_part = {}
    for pf in parts:
        by_part.setdefault(pf.part, []).append(pf.vector)
    per_label = [_cosine_distances(np.stack(vecs))
                 for vecs in by_part.values() if len(vecs) >= 2]
    if not per_label:
        raise ValueError("no part label is shared by two or more images")
    return float(np.mean(per_label))


def _probe_accuracy(x: np.ndarray, y: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a logistic probe on frozen features."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    half = len(y) // 2
    train, test = order[:half], order[half:]
    if len(np.unique(y[train])) < 2:
        return float((y[test] == y[train][0]).mean())
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x[train], y[train])
    return float(clf.score(x[test], y[test]))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def lambda_sweep(backbone, images: np.ndarray, lambdas, n_parts: int,
                 label_source: str = "pseudo", truth_labels: np.ndarray | None = None,
                 identities: np.ndarray | None = None, seed: int = 0,
                 batch_size: int = 64) -> SweepReport:
    """Distances and probe accuracies at each lambda on frozen features.

    label_source 'pseudo' reruns the labeler on each lambda's own teacher-free
    features; 'truth' uses the corpus manifest grids. Probes are skipped
    (reported as nan) when the needed targets are missing.
    """
    if label_source not in ("pseudo", "truth"):
        raise ValueError(f"label_source must be 'pseudo' or 'truth', got '{label_source}'")
    if label_source == "truth" and truth_labels is None:
        raise ValueError("truth labels requested but none provided")
    report = SweepReport([], [], [], [], [])
    for lam in lambdas:
        pooled, tokens = extract_features(backbone, images, lam, batch_size)
        if label_source == "truth":
            labels = truth_labels
        else:
            label_map: SemanticLabelMap = make_labels(tokens, n_parts, seed=seed)
            labels = label_map.labels
        parts = build_part_features(tokens, labels, n_parts)
        report.lambdas.append(float(lam))
        report.intra.append(intra_image_distance(parts))
        report.inter.append(inter_image_distance(parts))
        part_x = np.stack([pf.vector for pf in parts])
        part_y = np.asarray([pf.part for pf in parts])
        report.part_probe_acc.append(_probe_accuracy(part_x, part_y, seed))
        if identities is not None:
            report.identity_probe_acc.append(
                _probe_accuracy(_unit_rows(pooled.astype(np.float64)), identities, seed))
        else:
            report.identity_probe_acc.append(float("nan"))
    return report


SWEEP_COLUMNS = ("lambda", "intra_image_distance", "inter_image_distance",
                 "part_probe_acc", "identity_probe_acc")


def write_sweep_csv(report: SweepReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in report.rows():
            writer.writerow(row)
