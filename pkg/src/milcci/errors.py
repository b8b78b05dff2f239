"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MilcciError(Exception):
    exit_code = 1
    code = "E"


class SchemaError(MilcciError, ValueError):
    """Malformed dataset, label, manifest or shape mismatch."""

    exit_code = 2
    code = "schema"


class ParameterError(MilcciError, ValueError):
    """Hyperparameter or argument out of its allowed range."""

    exit_code = 2
    code = "parameter"


class NumericError(MilcciError, ArithmeticError):
    exit_code = 3
    code = "numeric"


class FormatVersionError(SchemaError):
    code = "version"


class StorageError(MilcciError, OSError):
    exit_code = 4
    code = "io"
