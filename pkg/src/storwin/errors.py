"""Exception hierarchy shared by every storwin layer."""


class StorwinError(Exception):
    pass


# -- window allocation / deallocation ---------------------------------------

class AllocationFailed(StorwinError):
    """Backing creation failed on at least one rank of a collective allocate."""


class InvalidHint(AllocationFailed):
    pass


class StoragePathInvalid(AllocationFailed):
    pass


class HybridSplitInvalid(AllocationFailed):
    pass


class EpochOpen(StorwinError):
    pass


class FlushFailed(StorwinError):
    pass


class ReservedKey(StorwinError):
    pass


# -- storage backing ---------------------------------------------------------

class StorageError(StorwinError):
    pass


class IoFailure(StorageError):
    pass


class SidecarConflict(StorageError):
    pass


class SidecarMissing(StorageError):
    pass


class SidecarCorrupt(StorageError):
    pass


class LengthMismatch(StorageError):
    pass


class OutOfRange(StorageError, IndexError):
    pass


class UseAfterClose(StorageError):
    pass


# -- one-sided operations ----------------------------------------------------

class RmaError(StorwinError):
    pass


class NoEpoch(RmaError):
    pass


class RangeError(RmaError, IndexError):
    pass


class UnknownRank(RmaError):
    pass


class BadElemSize(RmaError):
    pass


class LockHeld(RmaError):
    pass


class NotLocked(RmaError):
    pass


# -- rank harness ------------------------------------------------------------

class HarnessAborted(StorwinError):
    """Raised inside a rank that was blocked in a collective when the group aborted."""


class TimeoutDiagnostic(StorwinError):
    def __init__(self, running, timeout_s):
        self.running = sorted(running)
        self.timeout_s = timeout_s
        super().__init__(
            f"watchdog expired after {timeout_s:.3f}s; ranks still running: {self.running}"
        )


class RankFailure(StorwinError):
    def __init__(self, rank, cause):
        self.rank = rank
        self.cause = cause
        super().__init__(f"rank {rank} failed: {cause!r}")


# -- benchmark ---------------------------------------------------------------

class SizeOverflow(StorwinError):
    pass


class ValidationError(StorwinError):
    """A benchmark rep produced output that disagrees with the scalar recurrence."""
