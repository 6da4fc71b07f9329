"""Multi-vehicle informative path planning over lakes with local Gaussian processes."""

__version__ = "0.1.0"
