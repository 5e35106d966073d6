"""Exception types shared across the package."""


class ValidationError(Exception):
    """Malformed inputs: bad dataset files, shape mismatches, incompatible configs."""


class NumericError(Exception):
    """Non-finite values or degenerate numerics encountered during computation."""


class ContextOverflowError(ValidationError):
    """A sequence exceeded the language model's context limit."""


class JudgeUnavailableError(Exception):
    """Remote judge endpoint failed; the caller may retry. Never carries a score."""
