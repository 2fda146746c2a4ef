"""Exception types shared across the pipeline.

Argument-level misuse raises plain ``ValueError`` at the call site; the
classes here cover failures that the CLI maps to distinct exit codes.
"""


class HardgenError(Exception):
    """Base class for pipeline-specific failures."""


class ConfigError(HardgenError, ValueError):
    """Invalid configuration: bad field value, unknown key, schema violation."""


class IntegrityError(HardgenError):
    """On-disk artifact is missing pieces or internally inconsistent."""


class DependencyError(HardgenError):
    """A required upstream artifact is absent or unusable."""


class NumericError(HardgenError):
    """Non-finite values where finite ones are required."""


class TrainingDivergence(NumericError):
    """Training loss became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite training loss at step {step}")


class InvariantViolation(HardgenError):
    """A frozen component changed when it must not have."""
