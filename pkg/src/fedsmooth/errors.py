class ShapeError(ValueError):
    """Array dimensions do not match the network or each other."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, layer=None, context=None):
        self.message = message
        self.layer = layer
        self.context = dict(context or {})
        parts = [message]
        if layer is not None:
            parts.append(f"layer={layer}")
        parts.extend(f"{k}={v}" for k, v in self.context.items())
        super().__init__(", ".join(parts))

    def with_context(self, **context):
        merged = {**self.context, **context}
        return NumericError(self.message, layer=self.layer, context=merged)


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ConfigError(ValueError):
    """Invalid configuration value or dataset/config mismatch."""
