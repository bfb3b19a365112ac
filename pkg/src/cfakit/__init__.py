"""Contrastive factor analysis with Gaussian (CFA) and Weibull (CNFA) latent
posteriors, exact matrix-factorization oracles on finite augmentation
worlds, and uncertainty and disentanglement evaluation.
"""

from cfakit.errors import CfaError, ContractError, DimensionError, DomainError, NumericError

__version__ = "0.1.0"

__all__ = ["CfaError", "ContractError", "DimensionError", "DomainError", "NumericError", "__version__"]
