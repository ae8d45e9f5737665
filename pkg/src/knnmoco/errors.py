"""Exception types shared across the package."""


class KnnMocoError(Exception):
    """Base class for package errors."""


class ShapeError(KnnMocoError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(KnnMocoError, ArithmeticError):
    """An operation produced NaN/Inf or tried to normalize a zero vector."""


class ConfigError(KnnMocoError, ValueError):
    """Invalid configuration value, unknown config key, or contract misuse."""


class SamplingError(KnnMocoError, RuntimeError):
    """A geometric sampler could not produce a valid rectangle."""


class ConstraintInfeasibleError(SamplingError):
    """Rejection sampling exhausted its attempt budget."""


class RetrievalError(KnnMocoError, LookupError):
    """Nearest-neighbor retrieval asked for more than the bank can provide."""


class GenerationError(KnnMocoError, RuntimeError):
    """Synthetic data generation failed (e.g. object placement)."""


class CheckpointFormatError(KnnMocoError, ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class DataFormatError(KnnMocoError, ValueError):
    """Dataset file is malformed or has an unsupported version."""
