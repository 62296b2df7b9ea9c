"""Hybrid sparse attention at desk scale, verified against brute-force oracles."""

from .tensor import Tensor, Rng

__all__ = ["Tensor", "Rng"]
__version__ = "0.1.0"
