"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """Input violates a documented precondition (shape, range, missing data)."""


class UndefinedMetricError(ValueError):
    """A metric is not defined for the given labels (e.g. one class only)."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )
