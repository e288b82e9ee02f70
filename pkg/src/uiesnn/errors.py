"""Exception hierarchy shared by every module."""


class UieSnnError(Exception):
    """Base class for all package errors."""


class ShapeError(UieSnnError, ValueError):
    """Raised when tensor shapes violate an operation's contract."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class PreconditionError(UieSnnError, ValueError):
    """Raised when an input is outside the domain an operation accepts."""


class ConfigError(UieSnnError, ValueError):
    """Raised for invalid network, schedule or run configuration."""


class CheckpointError(UieSnnError):
    """Raised when a checkpoint stream is corrupt, truncated or of the wrong version."""


class IngestionError(UieSnnError):
    """Raised when an image pair cannot be loaded."""

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path


class TapeError(UieSnnError, RuntimeError):
    """Internal invariant violation while replaying a recorded forward pass."""


class DivergenceError(UieSnnError, RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message, epoch=None, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


class StructuralError(UieSnnError, ValueError):
    """Raised when a spike trace and a layer graph do not describe the same network."""
