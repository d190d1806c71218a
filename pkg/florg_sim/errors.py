"""
Exception hierarchy for florg_sim.

Every error raised by the package derives from FlorgError; the CLI maps the
families below onto its documented exit codes.
"""

from typing import Optional


class FlorgError(Exception):
    """Base class for all florg_sim errors."""


class ContractViolation(FlorgError, ValueError):
    """A precondition of an operation does not hold (shape, range, emptiness)."""


class NotPsdError(FlorgError, ArithmeticError):
    """A matrix expected to be positive semi-definite has a clearly negative eigenvalue."""

    def __init__(self, min_eigenvalue: float, psd_tol: float):
        super().__init__(min_eigenvalue, psd_tol)
        self.min_eigenvalue = min_eigenvalue
        self.psd_tol = psd_tol

    def __str__(self) -> str:
        return (
            f"matrix is not PSD: smallest eigenvalue {self.min_eigenvalue:.6e} "
            f"< -psd_tol (-{self.psd_tol:.6e})"
        )


class AggregationError(FlorgError, RuntimeError):
    """The server aggregate is corrupt (not PSD or above the rank bound)."""


class DivergenceError(FlorgError, ArithmeticError):
    """Training produced a non-finite loss, gradient or aggregate."""

    def __init__(self, message: str, round_idx: Optional[int] = None, client_id: Optional[int] = None):
        super().__init__(message, round_idx, client_id)
        self.message = message
        self.round_idx = round_idx
        self.client_id = client_id

    def __str__(self) -> str:
        where = []
        if self.round_idx is not None:
            where.append(f"round {self.round_idx}")
        if self.client_id is not None:
            where.append(f"client {self.client_id}")
        suffix = f" ({', '.join(where)})" if where else ""
        return f"{self.message}{suffix}"


class ConfigError(FlorgError, ValueError):
    """Experiment configuration could not be parsed or failed validation."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message, key, line)
        self.message = message
        self.key = key
        self.line = line

    def __str__(self) -> str:
        prefix = f"line {self.line}: " if self.line is not None else ""
        return f"{prefix}{self.message}"


class CheckpointError(FlorgError, ValueError):
    """A checkpoint file is malformed, truncated or of an unsupported version."""


class OutputExistsError(FlorgError, FileExistsError):
    """Refusing to overwrite existing run outputs without an explicit overwrite flag."""
