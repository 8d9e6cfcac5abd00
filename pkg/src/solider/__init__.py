"""Semantic-controllable self-supervised pretraining.

Teacher-student contrastive training augmented with clustered pseudo part
labels and a lambda-conditioned controller that trades semantic against
appearance content in the learned representation.
"""

__version__ = "0.1.0"

from .estimator import SoliderEncoder, TokenKMeans

__all__ = ["SoliderEncoder", "TokenKMeans", "__version__"]
