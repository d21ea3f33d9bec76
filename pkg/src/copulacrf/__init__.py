"""Joint ordinal intensity estimation with copula CRF output structure."""

__version__ = "0.1.0"
