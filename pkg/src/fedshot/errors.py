"""Exception hierarchy.

Every error raised by the library derives from :class:`FedshotError`. The three
intermediate classes map onto the CLI exit codes (config 2, data 3, numeric 4).
"""


class FedshotError(Exception):
    exit_code = 1


class ConfigError(FedshotError, ValueError):
    exit_code = 2


class DataError(FedshotError, ValueError):
    exit_code = 3


class NumericError(FedshotError, ArithmeticError):
    exit_code = 4


class IoError(DataError):
    """File could not be read or written; message carries the path."""


# signal
class MissingChannel(DataError):
    def __init__(self, name):
        super().__init__(f"channel {name!r} not present in recording")
        self.name = name


class EmptySpec(ConfigError):
    pass


class EmptyInput(DataError):
    pass


class TooShort(DataError):
    pass


# formats
class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


# embed / model
class EmptyTokenSequence(DataError):
    pass


class LayoutMismatch(DataError):
    pass


class EmptyBatch(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


# fed
class EmptyUpdateSet(DataError):
    pass


class AlphaOutOfRange(ConfigError):
    pass


class NoClients(DataError):
    pass


class NoTasks(DataError):
    pass


class MissingEncoder(DataError):
    pass


# episode
class TooFewPatients(DataError):
    pass


class InfeasibleAssignment(DataError):
    pass


class InsufficientSeizureSegments(DataError):
    pass


class InsufficientSegments(DataError):
    pass


# metrics
class EmptyMatrix(DataError):
    pass


class DegenerateMarginals(NumericError):
    pass


class RankDeficient(NumericError):
    pass


# synth
class InvalidSpec(ConfigError):
    pass
