"""Certifiably robust federated adversarial training at desk scale."""

from fedsmooth.errors import ConfigError, FormatError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "NumericError", "ShapeError", "__version__"]
