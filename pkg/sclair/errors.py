class SclairError(RuntimeError):
    """Base class for runtime failures (bad files, training breakdowns)."""


class ShapeError(ValueError):
    """Raised when operand extents disagree."""


class NonFiniteError(SclairError):
    """Raised when a NaN or Inf shows up in a checked tensor."""

    def __init__(self, name: str, detail: str | None = None):
        self.name = name
        message = f"non-finite values in {name}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class ManifestError(SclairError):
    pass


class CheckpointError(SclairError):
    pass


class GradcheckError(SclairError):
    pass


class TrainingError(SclairError):
    pass
