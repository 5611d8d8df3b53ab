"""Exception hierarchy. CLI exit codes map onto these classes."""


class ClipOSError(Exception):
    exit_code = 1


class InputContractError(ClipOSError, ValueError):
    exit_code = 1


class ConfigError(ClipOSError, ValueError):
    """Invalid configuration. ``field`` holds the dotted path when known."""

    exit_code = 1

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DataError(ClipOSError):
    exit_code = 2


class ResolutionError(DataError, FileNotFoundError):
    """A dataset, checkpoint or image path that does not resolve."""


class NumericError(ClipOSError, ArithmeticError):
    exit_code = 3
