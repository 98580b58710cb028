"""Exception hierarchy.

Every error raised by the package derives from :class:`CottError`. The three
intermediate classes group errors by what the command-line layer should do with
them (exit code 3, 4 or 5).
"""


class CottError(Exception):
    """Base class for all package errors."""


class DataError(CottError):
    """Bad or inconsistent input data."""


class CheckpointError(CottError):
    """A checkpoint could not be read."""


class PreconditionError(CottError):
    """A numeric or structural precondition was violated."""


class ConfigError(CottError):
    """Invalid training configuration."""


# prompt schema
class MalformedTemplate(PreconditionError):
    pass


class EmptyText(PreconditionError):
    pass


class ArityMismatch(PreconditionError):
    pass


class UnknownSymbol(PreconditionError):
    pass


class UnknownWord(PreconditionError):
    pass


# backend
class SequenceTooLong(PreconditionError):
    pass


class EmptyCandidateSet(PreconditionError):
    pass


# reasoner
class NoCounterfactualAvailable(PreconditionError):
    pass


class CandidateMismatch(PreconditionError):
    pass


class SpaceTooLarge(PreconditionError):
    pass


# contrastive
class DimensionMismatch(PreconditionError):
    pass


class ZeroVector(PreconditionError):
    pass


class NonPositiveTemperature(PreconditionError):
    pass


# data / evaluation
class MissingField(DataError):
    pass


class UnknownLabel(DataError):
    pass


class SpanOutOfBounds(DataError):
    pass


class EmptyDataset(DataError):
    pass


class InvalidConfig(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MissingGoldSteps(DataError):
    pass


# checkpoints
class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint schema version {found}, expected {expected}")
        self.found = found
        self.expected = expected
