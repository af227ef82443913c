"""Random-erasing defense against model inversion, at desk scale."""

__version__ = "0.1.0"
