"""Exception hierarchy shared by the core modules and the CLI."""


class ArmfleetError(Exception):
    """Base exception for armfleet errors."""

    exit_code = 1

    def __init__(self, message: str, code: str | None = None):
        self.message = message
        self.code = code
        super().__init__(self.message)

    def __str__(self) -> str:
        if self.code:
            return f"{self.message} [{self.code}]"
        return self.message


class ConfigError(ArmfleetError):
    """Invalid configuration file, option value or spec."""

    exit_code = 2
