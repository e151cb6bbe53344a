from typing import Optional

# Exit codes surfaced by the CLI
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VERIFICATION = 3


class SparseNNGPError(Exception):
    """Base error. Carries an exit code and a human readable detail."""

    exit_code: int = EXIT_USAGE

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class DomainError(SparseNNGPError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigurationError(SparseNNGPError, ValueError):
    """Invalid configuration or command-line usage."""


class NumericalError(SparseNNGPError, ArithmeticError):
    """Non-convergence, clamp violations, PSD violations."""


class SingularityError(NumericalError):
    """Linear solve impossible: every eigenvalue is below the cutoff."""


class TheoryDomainError(NumericalError):
    """The learning-curve theory has no valid solution (gamma >= 1)."""


class FormatError(SparseNNGPError):
    exit_code = EXIT_IO


class DataIOError(SparseNNGPError, OSError):
    exit_code = EXIT_IO


class VerificationFailure(SparseNNGPError):
    exit_code = EXIT_VERIFICATION
