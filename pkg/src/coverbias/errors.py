"""Exception hierarchy shared by all pipeline stages.

Exit codes are attached to the classes so the CLI can translate any
failure into the documented process status: 2 for schema/format
problems, 3 for domain violations, 4 for degenerate inputs.
"""


class CoverageBiasError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class SchemaError(CoverageBiasError):
    """Input does not match the expected structure or contract."""

    exit_code = 2


class ParseError(SchemaError):
    """A row or token could not be parsed; carries file context."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"{message} (line {line_number})"
        super().__init__(message)
        self.line_number = line_number


class DuplicateKey(SchemaError):
    """An identifier that must be unique appeared more than once."""


class GeometryError(SchemaError):
    """A geometry violates ring/closure requirements."""


class DomainError(CoverageBiasError):
    """A value is outside its declared domain."""

    exit_code = 3


class DegenerateInput(CoverageBiasError):
    """Input is structurally valid but statistically unusable."""

    exit_code = 4


class DegenerateDenominator(DegenerateInput):
    """A benchmark count of zero would divide the coverage ratio."""


class EmptySelection(DegenerateInput):
    """A filter or alignment step selected nothing."""
