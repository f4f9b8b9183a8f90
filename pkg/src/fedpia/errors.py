"""Exception taxonomy shared by all modules."""


class FedpiaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedpiaError):
    """Operands have incompatible dimensions."""


class DataError(FedpiaError):
    """Input data violates a documented contract (bad labels, empty batch, ...)."""


class NumericError(FedpiaError):
    """A numeric precondition failed (infeasible marginals, zero divisor, ...)."""


class ConfigError(FedpiaError):
    """Experiment configuration is malformed or contains unknown keys."""


class ParseError(DataError):
    """A text input could not be parsed; message names the offending line."""
