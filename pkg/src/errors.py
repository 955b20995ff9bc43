"""
Exception hierarchy for the supply-chain risk toolkit.

Every error records the module it came from so the CLI can report
provenance, and carries the process exit code it maps to.
"""

from typing import Optional


class RiskToolkitError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.module = module or "toolkit"

    def __str__(self) -> str:
        return f"[{self.module}] {self.message}"


class InputMissingError(RiskToolkitError):
    """A referenced input file or upstream artifact does not exist"""

    exit_code = 2


class DataValidationError(RiskToolkitError):
    """Input data, labels, configuration or parameters are invalid"""

    exit_code = 3

    def __init__(self, message: str, module: Optional[str] = None, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, module)
        self.line = line


class InvariantViolation(RiskToolkitError):
    """An internal consistency check failed"""

    exit_code = 4
