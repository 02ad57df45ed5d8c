"""Exception types shared across the pipeline."""


class ValidationError(ValueError):
    """Input data violates a documented contract (bad polygon, shape mismatch, ...)."""


class TrainingDiverged(RuntimeError):
    """A training loss went non-finite.

    Carries a snapshot of the offending batch so the failure can be inspected
    offline; the CLI writes it next to the intended checkpoint.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
