"""Exception types shared across the package."""


class ToscError(Exception):
    """Base class for all package errors."""


class ValidationError(ToscError, ValueError):
    """An argument violates a documented precondition."""


class NotFoundError(ToscError, FileNotFoundError):
    """A dataset root, manifest, bundle or result directory is missing."""


class IntegrityError(ToscError):
    """A file exists but its content is corrupt or inconsistent."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class DegenerateInputError(ValidationError):
    """Input for which the operation is undefined (e.g. power-normalizing a zero vector)."""


class TrainingDivergenceError(ToscError, RuntimeError):
    """A loss became NaN or infinite during training."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class ConfigError(ValidationError):
    """An experiment configuration is invalid; carries the source position when known."""

    def __init__(self, message, source=None, line=None, column=None):
        self.source, self.line, self.column = source, line, column
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:{column}:" if column is not None else f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
