"""Exception types shared across the engine.

Two failure families matter operationally: malformed inputs/configuration
(ValidationError) and numerical breakdown during training or inference
(NumericError). The CLI maps them to distinct exit codes.
"""


class ValidationError(ValueError):
    """Inputs, shapes, or configuration violate a documented precondition."""


class NumericError(RuntimeError):
    """A computation produced NaN/inf or otherwise diverged."""
