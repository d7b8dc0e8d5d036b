"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: config problems exit 2, numerical
failures exit 3, file/container problems exit 4.
"""


class LayoutError(ValueError):
    """Parameter layouts disagree (segment names, offsets, or lengths)."""


class ContainerError(ValueError):
    """A container file is malformed, truncated, or fails its checksum."""


class ConfigError(ValueError):
    """An experiment config failed validation."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss, gradient, or parameter."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-PSD kernel, non-finite objective)."""

    def __init__(self, message: str, lambdas=None):
        super().__init__(message)
        self.lambdas = lambdas


class DegenerateBasisError(ValueError):
    """The two task vectors are parallel; no 2-D plane basis exists."""
