"""Permutation-invariant bag scoring and contrastive alignment.

The package pairs an image represented as an unordered bag of region
features with a document represented as an unordered bag of sentence
features, scores the pair through interchangeable local/global
aggregators, trains two small encoders with an asymmetric text-to-image
contrastive loss, and evaluates classification, grounding and retrieval
on a synthetic latent-concept corpus.
"""

from .autodiff import ContractError, Var, finite_difference_check

__version__ = "0.1.0"

__all__ = ["ContractError", "Var", "finite_difference_check", "__version__"]
