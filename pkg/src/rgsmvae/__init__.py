"""Structured-sparsity training of a disentangling VAE for voice conversion.

Small numpy autodiff engine, layers, the VAE, the relaxed group-wise
splitting optimizer, a synthetic speaker corpus and evaluation metrics.
"""

from .errors import ContractError, DimensionError, DomainError, FormatError, RgsmVaeError, UnsupportedVersionError

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "RgsmVaeError",
    "UnsupportedVersionError",
]
