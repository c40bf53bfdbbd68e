"""Exception hierarchy shared by every pcloop module."""


class PcloopError(Exception):
    """Base class for all pcloop errors."""


class DegenerateInput(PcloopError):
    pass


class ParseError(PcloopError):
    pass


class UnsupportedFormat(PcloopError):
    pass


class InvariantViolation(PcloopError):
    pass


class EmptyPatch(PcloopError):
    pass


class DimensionMismatch(PcloopError):
    pass


class InsufficientCorrespondences(PcloopError):
    pass


class NoConsensus(PcloopError):
    """RANSAC found no hypothesis supported by at least a minimal sample."""


class EmptyCorrespondences(PcloopError):
    pass


class MissingLabel(PcloopError):
    pass


class InsufficientAssociations(PcloopError):
    pass
