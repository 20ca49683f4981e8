"""Exception hierarchy shared across the package."""


class BemError(Exception):
    """Base class for all errors raised by bem."""


class DimensionError(BemError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(BemError, ValueError):
    """A documented precondition was violated."""


class DomainError(BemError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NonFiniteError(BemError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(BemError, ValueError):
    """Invalid configuration key or value."""


class DivergenceError(BemError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CheckpointError(BemError, ValueError):
    """Corrupt, mismatched or unsupported checkpoint file."""


class PPMFormatError(BemError, ValueError):
    """Malformed or truncated PPM file."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class UnsupportedDepthError(PPMFormatError):
    """PPM uses a sample depth other than 8 bits."""


class MetricError(BemError, ValueError):
    """An IQA metric is unknown or produced an unusable score."""
