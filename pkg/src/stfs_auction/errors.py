"""Exception types shared across the package."""


class AuctionError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(AuctionError, ValueError):
    """Invalid parameters or inputs."""


class DomainError(ValidationError):
    """Argument outside the domain where an operation is defined."""


class DegenerateDistributionError(DomainError):
    """A caller-supplied CDF has no mass where mass is required."""


class ShapeError(ValidationError):
    """Array shapes or grids do not agree."""


class InsufficientSampleError(AuctionError):
    """Too few Monte Carlo samples survived to form a stable estimate."""
