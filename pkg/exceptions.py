class DropoutToolkitError(Exception):
    """Base error; exit_code is what the CLI returns when it escapes."""

    exit_code = 1


class ConfigurationError(DropoutToolkitError):
    exit_code = 1


class UsageError(DropoutToolkitError):
    exit_code = 1


class DataError(DropoutToolkitError):
    exit_code = 2


class NumericError(DropoutToolkitError):
    exit_code = 3

    def __init__(self, primitive: str, message: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")
