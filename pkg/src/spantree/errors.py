"""Shared exception types.

Contract violations (bad arguments, malformed inputs, broken invariants) raise
ContractViolation; plain I/O failures surface as OSError.  The command line
maps the former to exit code 1 and the latter to exit code 2.
"""


class ContractViolation(ValueError):
    """An input or internal state violates a documented contract."""


class CheckpointError(ContractViolation):
    """A checkpoint directory is malformed, truncated, or inconsistent."""


class TrainingDiverged(ContractViolation):
    """Training hit a non-finite loss.  Checkpoints written so far are kept."""

    def __init__(self, message: str, checkpoints=None):
        super().__init__(message)
        self.checkpoints = checkpoints or []
