"""Exception hierarchy. Every error carries a CLI exit code."""


class MpganError(Exception):
    exit_code = 1


class ConfigError(MpganError):
    exit_code = 2


class DataError(MpganError):
    exit_code = 3


class NumericError(MpganError):
    exit_code = 4


class InvalidSpec(ConfigError):
    pass


class FormatError(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class MissingClass(DataError):
    pass


class SplitError(DataError):
    pass


class EmptyDocument(DataError):
    pass


class RankError(ConfigError):
    pass


class NonScalarOutput(ConfigError):
    pass


class LabelOutOfRange(DataError):
    pass


class MissingPivot(DataError):
    pass


class BatchMismatch(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NeedsTwoClasses(DataError):
    pass


class MissingClassSamples(DataError):
    pass


class PatchCountMismatch(DataError):
    pass


class EmptyClass(DataError):
    pass


class UnknownFraction(ConfigError):
    pass


class MissingCheckpoint(DataError):
    pass
