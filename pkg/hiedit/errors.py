"""
Exception hierarchy shared by every hiedit module.

Each command-level error carries the process exit code the CLI reports for it.
"""
from typing import Optional


class HieditError(Exception):
    """Base class for errors the command line maps to an exit code."""
    exit_code = 1


class ConfigError(HieditError):
    """Invalid or inconsistent configuration (unknown keys, bad values, dimension mismatch)."""
    exit_code = 1


class InputValidationError(HieditError, ValueError):
    """A user-supplied input (image, instruction, file contents) failed validation."""
    exit_code = 1


class DataIOError(HieditError):
    """Reading or writing a file failed; the offending path is kept for the message."""
    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{message} (path: {path})" if path else message)


class InvariantViolation(HieditError):
    """A runtime invariant no longer holds; continuing would produce garbage."""
    exit_code = 3


class NonFiniteLossError(InvariantViolation):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, l_mllm: float, l_dm: float):
        self.step = step
        self.l_mllm = l_mllm
        self.l_dm = l_dm
        super().__init__(f"Non-finite loss at step {step}: l_mllm={l_mllm}, l_dm={l_dm}")


class ShapeError(ValueError):
    """Tensor dimensions do not agree; the message names every shape involved."""
    pass
