"""Exception types shared across the package."""


class PreconditionError(ValueError):
    """An operation was called with arguments outside its contract."""


class DimensionError(PreconditionError):
    """A vector or matrix has the wrong size.

    ``dimension`` names the offending quantity, e.g. ``"input_dim"``.
    """

    def __init__(self, dimension, expected, got):
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{dimension}: expected {expected}, got {got}")


class NumericalOverflowError(FloatingPointError):
    """A forward pass or loss produced a non-finite value."""


class UnsupportedTaskError(PreconditionError):
    """A scorer or metric was requested for a task it is not defined on."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; ``epoch`` and ``batch`` locate it."""

    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")
