"""Exception types shared across the package.

The CLI maps these onto process exit codes (validation -> 2, divergence -> 3).
"""


class ValidationError(ValueError):
    """Invalid argument, shape, or configuration."""


class DimensionError(ValidationError):
    """Array shape does not match the network or model layout."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class DivergenceError(ArithmeticError):
    """A simulation or training run produced non-finite values."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ConvergenceError(ArithmeticError):
    """An iterative solver hit its iteration cap."""
