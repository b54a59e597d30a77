"""Auction mechanisms and dispersion tuning for STFS slot allocation."""

from . import equilibria, harness, mechanisms, stfs, valuation
from .errors import (
    AuctionError,
    DegenerateDistributionError,
    DomainError,
    InsufficientSampleError,
    ShapeError,
    ValidationError,
)
from .mechanisms import AuctionInstance, AuctionOutcome, Mechanism, MsaaConfig
from .valuation import ValuationParams

__version__ = "0.1.0"

__all__ = [
    "AuctionError", "AuctionInstance", "AuctionOutcome", "DegenerateDistributionError",
    "DomainError", "InsufficientSampleError", "Mechanism", "MsaaConfig", "ShapeError",
    "ValidationError", "ValuationParams", "equilibria", "harness", "mechanisms", "stfs",
    "valuation",
]
