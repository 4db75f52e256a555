class DivergenceError(FloatingPointError):
    """A loss, gradient or sampling state went non-finite."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed or incompatible."""
