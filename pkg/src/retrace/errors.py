"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific type that applies.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Malformed input data, file contents, or configuration."""


class SolverError(RuntimeError):
    """An optimization failed to converge or produced non-finite values."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
