"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or mode constraint violation."""


class DataError(ValueError):
    """Dataset could not be built or loaded."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; diagnostics were dumped before aborting."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
