"""scikit-learn style facades over the pipeline.

``SoliderEncoder.fit`` runs both training phases on an image array and
``transform`` extracts pooled features at the requested ratio value.
``TokenKMeans`` exposes the deterministic clusterer with the familiar
fit/predict surface.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .analysis import extract_features
from .config import RunConfig
from .controller import check_lambda
from .labeler import kmeans
from .trainer import finetune_solider, pretrain_dino
from .validation import check_image_array, check_matrix, check_scalar


class SoliderEncoder(BaseEstimator, TransformerMixin):
    """Two-phase self-supervised encoder with a controllable semantic ratio.

    Defaults are sized for tests; real runs should raise the epoch counts.
    """

    def __init__(self, lam: float = 1.0, parts: int = 3, seed: int = 0,
                 epochs_dino: int = 2, epochs_solider: int = 1, batch_size: int = 8,
                 lr: float = 5e-4, prototypes: int = 64):
        self.lam = lam
        self.parts = parts
        self.seed = seed
        self.epochs_dino = epochs_dino
        self.epochs_solider = epochs_solider
        self.batch_size = batch_size
        self.lr = lr
        self.prototypes = prototypes

    def _config(self, images: np.ndarray) -> RunConfig:
        return RunConfig(
            seed=self.seed, parts=self.parts, batch_size=self.batch_size,
            epochs_dino=self.epochs_dino, epochs_solider=self.epochs_solider,
            lr=self.lr, lr_solider=self.lr * 0.1, prototypes=self.prototypes,
            image_height=images.shape[2], image_width=images.shape[3],
        ).validate()

    def fit(self, X, y=None):
        check_lambda(self.lam)
        check_scalar(self.parts, "parts", low=1, kind=int)
        images = check_image_array(X)
        config = self._config(images)
        state = pretrain_dino(config, images)
        finetune_solider(state, images)
        self.state_ = state
        self.n_features_out_ = state.student.backbone.cfg.out_dim
        return self

    def transform(self, X, lam: float | None = None) -> np.ndarray:
        if not hasattr(self, "state_"):
            raise NotFittedError("fit the encoder before calling transform")
        use = check_lambda(self.lam if lam is None else lam)
        cfg = self.state_.config
        images = check_image_array(X, cfg.image_height, cfg.image_width)
        pooled, _ = extract_features(self.state_.student.backbone, images, use)
        return pooled

    def get_config(self) -> dict:
        if not hasattr(self, "state_"):
            raise NotFittedError("fit the encoder first")
        return dataclasses.asdict(self.state_.config)


class TokenKMeans(BaseEstimator):
    """Deterministic Lloyd/k-means++ clustering with restart selection."""

    def __init__(self, n_clusters: int = 3, n_init: int = 8, max_iter: int = 100,
                 tol: float = 1e-8, random_state: int = 0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        x = check_matrix(X)
        check_scalar(self.n_clusters, "n_clusters", low=1, kind=int)
        result = kmeans(x, self.n_clusters, seed=self.random_state,
                        max_iter=self.max_iter, tol=self.tol, n_init=self.n_init)
        self.cluster_centers_ = result.centers
        self.labels_ = result.assignments
        self.inertia_ = result.inertia
        self.n_iter_ = result.iterations_run
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("fit the clusterer before calling predict")
        x = check_matrix(X)
        if x.shape[1] != self.cluster_centers_.shape[1]:
            raise ValueError(
                f"expected {self.cluster_centers_.shape[1]} features, got {x.shape[1]}")
        d2 = ((x[:, None, :] - self.cluster_centers_[None]) ** 2).sum(-1)
        return d2.argmin(axis=1)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_
