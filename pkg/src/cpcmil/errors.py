"""Exception types shared across the pipeline.

The CLI maps these onto its exit-code contract: usage errors exit 1,
ConfigurationError exits 2, NumericError exits 3, VerificationError exits 4.
"""


class ConfigurationError(Exception):
    """Requested shapes, profiles, modes, or files are inconsistent."""


class NumericError(Exception):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids is not None else []


class VerificationError(Exception):
    """A verification suite reported a failure."""
