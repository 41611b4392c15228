"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` (and subclasses) to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class RetargetError(Exception):
    pass


class ValidationError(RetargetError, ValueError):
    """Input data violates a documented invariant or precondition."""


class StructuralError(ValidationError):
    """Shapes, joint counts or hierarchies do not line up."""


class ConfigurationError(ValidationError):
    """A parameter combination is invalid (e.g. ``d_max <= d_min``)."""


class ExtractionError(ValidationError):
    """Anchor ray casting could not find the mesh surface."""


class NumericalError(RetargetError, ArithmeticError):
    """Non-finite values or divergence during optimization."""
