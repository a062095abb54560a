"""Exception hierarchy shared by every stage.

The CLI maps each family onto a process exit code, so raise the most specific
class that fits.
"""


class SrpoError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(SrpoError, ValueError):
    exit_code = 2


class DependencyError(SrpoError):
    """A stage needs an artifact (usually a checkpoint) that does not exist."""

    exit_code = 3


class NumericError(SrpoError, FloatingPointError):
    exit_code = 4


class ShapeError(SrpoError, ValueError):
    def __init__(self, layer, expected, got):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"{layer}: expected input width {expected}, got {got}")


class NonFiniteGradientError(NumericError):
    def __init__(self, name):
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class CheckpointError(SrpoError):
    exit_code = 3
