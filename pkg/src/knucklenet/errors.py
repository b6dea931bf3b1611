"""Exception hierarchy.

Every error carries an ``error_class`` slug; the CLI prints it as the
machine-parseable first token of its one-line failure message.
"""


class KnuckleError(Exception):
    error_class = "error"


class ConfigError(KnuckleError, ValueError):
    error_class = "config-error"


class DimensionError(KnuckleError, ValueError):
    error_class = "dimension-error"


class DegenerateInputError(KnuckleError, ValueError):
    error_class = "degenerate-input"


class NumericalError(KnuckleError, ArithmeticError):
    error_class = "numerical-error"


class ProtocolError(KnuckleError, ValueError):
    error_class = "protocol-error"


class LoadError(KnuckleError, OSError):
    error_class = "load-error"


class MetricError(KnuckleError, ValueError):
    error_class = "metric-error"


class NormalizationError(KnuckleError, ValueError):
    error_class = "normalization-error"


class AlignmentError(KnuckleError, ValueError):
    error_class = "alignment-error"
