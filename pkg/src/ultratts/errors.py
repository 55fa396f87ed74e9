"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class UltraTTSError(Exception):
    exit_code = 1


class InvalidArgumentError(UltraTTSError, ValueError):
    exit_code = 1


class ConfigError(UltraTTSError):
    exit_code = 1


class DataError(UltraTTSError):
    exit_code = 2


class InsufficientDataError(DataError, ValueError):
    pass


class AlignmentError(DataError, ValueError):
    def __init__(self, n_left, n_right, what="frame counts"):
        super().__init__(f"{what} differ: {n_left} vs {n_right}")
        self.n_left = n_left
        self.n_right = n_right


class CorruptFileError(DataError):
    pass


class DivergedError(UltraTTSError, ArithmeticError):
    exit_code = 3

    def __init__(self, epoch, loss=float("nan")):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
