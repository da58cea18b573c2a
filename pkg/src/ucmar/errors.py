"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the exit status the
CLI maps it to.
"""


class UcmarError(Exception):
    code = "error"
    exit_code = 1


class InvalidArgument(UcmarError, ValueError):
    code = "invalid-argument"
    exit_code = 2


class InvalidInput(UcmarError, ValueError):
    code = "invalid-input"
    exit_code = 2


class IncompatibleCheckpoint(UcmarError):
    code = "incompatible-checkpoint"
    exit_code = 2


class ChecksumError(UcmarError):
    code = "checksum"
    exit_code = 4


class DegenerateGradient(UcmarError):
    """Raised when the gradient of a root-mean-square loss is requested at L == 0."""

    code = "degenerate-gradient"
    exit_code = 1


class TrainingDiverged(UcmarError):
    code = "training-diverged"
    exit_code = 3

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class IncompleteStore(UcmarError):
    code = "incomplete-store"
    exit_code = 2


class ConfigError(UcmarError, ValueError):
    code = "config"
    exit_code = 2
