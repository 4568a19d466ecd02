"""Exception hierarchy shared by every module."""


class TreePoseError(Exception):
    """Base class for all errors raised by treepose."""


class InputError(TreePoseError, ValueError):
    """Malformed or out-of-contract input (maps to CLI exit code 2)."""


class ModelFormatError(TreePoseError):
    """A model byte stream could not be decoded."""


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedStreamError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class NotTreeRealizableError(TreePoseError):
    """Triplet tests failed on every candidate grouping.

    ``triplet`` holds the worst-violating (i, j, k) and ``deviation`` its
    spread in nats.
    """

    def __init__(self, message, triplet=None, deviation=None):
        super().__init__(message)
        self.triplet = triplet
        self.deviation = deviation


class ConcavityError(InputError):
    """Deformation weights would make the distance transform invalid."""


class ConvergenceWarning(UserWarning):
    pass
