"""Error types shared across the package."""


class CortexencError(ValueError):
    """Base class for user-facing errors (bad inputs, bad files, bad configs)."""


class FormatError(CortexencError):
    """A file does not conform to its documented format."""


class SchemaError(CortexencError):
    """A table is missing required columns or carries unexpected ones."""


class SingularModelError(CortexencError):
    """Normal equations are singular; a positive ridge penalty is required."""
