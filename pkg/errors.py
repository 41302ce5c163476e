from typing import Optional

from models import ErrorDetail


class WLFError(Exception):
    """Base error; carries a stable code and the process exit code used by the CLI."""

    code = "WLF_ERROR"
    exit_code = 3

    def __init__(self, message: str, details: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_detail(self) -> ErrorDetail:
        return ErrorDetail(code=self.code, message=self.message, details=self.details)

    def __str__(self) -> str:
        if self.details:
            return f"{self.message} ({self.details})"
        return self.message


class ConfigError(WLFError):
    code = "CONFIG_ERROR"
    exit_code = 2


class LoadError(ConfigError):
    code = "LOAD_ERROR"


class UsageError(ConfigError):
    code = "USAGE_ERROR"


class ContractError(WLFError):
    """Shapes or preconditions of an operation were violated by the caller."""

    code = "CONTRACT_ERROR"
    exit_code = 2


class NumericError(WLFError):
    code = "NUMERIC_ERROR"
    exit_code = 3


class DivergenceError(NumericError):
    code = "DIVERGENCE"


class CapabilityError(WLFError):
    code = "CAPABILITY_ERROR"
    exit_code = 3


class AcceptanceError(WLFError):
    code = "ACCEPTANCE_FAILED"
    exit_code = 4
