"""Learned low-latency video coding at desk scale."""

from .tensor import ContractError, DimensionError, NonFiniteError, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "DimensionError", "ContractError", "NonFiniteError", "__version__"]
