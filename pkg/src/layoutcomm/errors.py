"""Exception hierarchy shared by all modules."""


class LayoutCommError(Exception):
    """Base class for every error raised by this package."""


class LayoutError(LayoutCommError):
    """Malformed layout or traverser composition."""


class DuplicateDimError(LayoutError):
    pass


class UnknownDimError(LayoutError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ProtoNotAllowedError(LayoutError):
    """A proto-structure was applied where it is not legal (e.g. bcast on a layout)."""


class ExtentError(LayoutError):
    """Extent deduction failed."""


class OpenExtentError(ExtentError):
    """A query needs an extent that is still open."""


class ExtentConflictError(ExtentError):
    """Known extents contradict a constraint."""


class NonDivisibleError(ExtentError):
    """A split or merge would need a non-integral extent."""


class BadIndexError(LayoutError, IndexError):
    """Index missing from a state or outside the dimension's range."""


class ParseError(LayoutCommError, ValueError):
    pass


class PlanError(LayoutCommError):
    """Invalid datatype plan or plan construction request."""


class CommError(LayoutCommError):
    """Failure inside the simulated communication engine."""


class PlanMismatchError(CommError):
    """Endpoint plans disagree in element count or scalar types."""


class DeadlockError(CommError):
    pass


class GroupAborted(CommError):
    """Raised in surviving ranks after another rank failed."""


class UndeliveredMessageError(CommError):
    pass


class SubspaceError(CommError):
    """The local structure is not a valid piece of the root structure."""


class ExtentMismatchError(SubspaceError):
    pass


class UncoveredDimError(SubspaceError):
    pass


class RankMismatchError(SubspaceError):
    pass


class ReplicationError(SubspaceError):
    """Gather target would receive several values for one element."""


class SpmdError(CommError):
    """One or more rank bodies failed.

    ``errors`` maps the failing rank to its exception; ``rank`` is the lowest
    rank whose failure was not a consequence of another rank failing.
    """

    def __init__(self, errors, rank):
        self.errors = dict(errors)
        self.rank = rank
        exc = self.errors[rank]
        super().__init__(f"rank {rank} failed: {type(exc).__name__}: {exc}")
