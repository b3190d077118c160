"""Exception types shared across the package; the CLI maps them to exit codes."""


class BnspecError(Exception):
    """Base class for package errors."""


class ConfigError(BnspecError, ValueError):
    """Invalid user input: configuration, domain parameters, probe placement."""


class SolverError(BnspecError, RuntimeError):
    """A numerical solve failed to converge or was ill-posed."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
